import itertools
import math

import numpy as np
import pytest

from Models.errors import DataError, DimensionMismatchError, InvalidGridError, InvalidPermutationError, ModelFormatError
from Models.face_model import (
    HEADER_SIZE,
    FaceModel,
    FlatWeights,
    GridSpec,
    Permutation,
    compression_factor,
    deserialize,
    flatten,
    forward,
    from_bytes,
    grid_for_cloud,
    mse,
    permute_augment,
    predict,
    quantize,
    random_augmentations,
    random_permutations,
    resample,
    serialize,
    to_bytes,
    unflatten,
)
from Models.lm_trainer import LmConfig, train_lm
from Models.point_cloud import PointCloud


class TestForward:

    def test_hand_value(self, tiny_model):
        assert forward(tiny_model, 0.5, 0.9) == pytest.approx(math.tanh(math.tanh(0.5)), abs=1e-12)
        assert forward(tiny_model, 0.5, 0.9) == pytest.approx(0.4318082, abs=1e-6)

    def test_output_range(self, random_model, rng):
        values = predict(random_model, rng.uniform(-1, 1, size=(500, 2)))
        assert np.all(np.abs(values) < 1.0)

    def test_odd_symmetry_without_biases(self, rng):
        model = FaceModel(rng.normal(size=(4, 2)), np.zeros(4), rng.normal(size=4), 0.0)
        xy = rng.uniform(-1, 1, size=(20, 2))
        np.testing.assert_allclose(predict(model, -xy), -predict(model, xy), atol=1e-12)

    def test_predict_matches_forward(self, random_model):
        xy = np.array([[0.1, -0.2], [0.7, 0.3]])
        expected = [forward(random_model, x, y) for x, y in xy]
        np.testing.assert_allclose(predict(random_model, xy), expected)


class TestMse:

    def test_zero_model(self):
        cloud = PointCloud(np.array([[0.0, 0.0, 0.5], [0.3, -0.2, -0.5]]))
        assert mse(FaceModel.zeros(3), cloud) == pytest.approx(0.25)

    def test_non_negative(self, random_model, bump_cloud):
        assert mse(random_model, bump_cloud) >= 0.0


class TestFaceModel:

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DataError):
            FaceModel(np.zeros((2, 2)), np.zeros(3), np.zeros(3), 0.0)

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            FaceModel(np.zeros((1, 2)), np.zeros(1), np.array([np.inf]), 0.0)

    def test_rejects_empty_hidden_layer(self):
        with pytest.raises(DataError):
            FaceModel(np.zeros((0, 2)), np.zeros(0), np.zeros(0), 0.0)


class TestFlatten:

    def test_length(self):
        assert len(flatten(FaceModel.zeros(500))) == 2001
        assert len(flatten(FaceModel.zeros(1))) == 5

    def test_layout(self, tiny_model):
        np.testing.assert_array_equal(flatten(tiny_model).values, [1.0, 0.0, 0.0, 1.0, 0.0])

    def test_unflatten_inverts(self, random_model):
        restored = unflatten(flatten(random_model))
        np.testing.assert_array_equal(restored.wi, random_model.wi)
        np.testing.assert_array_equal(restored.bi, random_model.bi)
        np.testing.assert_array_equal(restored.wo, random_model.wo)
        assert restored.bo == random_model.bo

    def test_wrong_length(self):
        with pytest.raises(DimensionMismatchError):
            FlatWeights(np.zeros(8), 2)


class TestPermutation:

    def test_rejects_non_permutation(self):
        with pytest.raises(InvalidPermutationError):
            Permutation((0, 0, 1))

    def test_identity(self):
        assert Permutation.identity(4).is_identity
        assert not Permutation.swap(4, 1, 2).is_identity


class TestPermuteAugment:

    def test_swap_moves_rows(self, rng):
        model = FaceModel(rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=3), 0.3)
        swapped = permute_augment(model, Permutation.swap(3, 0, 2))
        for before, after in ((0, 2), (1, 1), (2, 0)):
            np.testing.assert_array_equal(swapped.wi[after], model.wi[before])
            assert swapped.bi[after] == model.bi[before]
            assert swapped.wo[after] == model.wo[before]
        assert swapped.bo == model.bo

    def test_swap_moves_flat_blocks(self, rng):
        model = FaceModel(rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=3), 0.3)
        flat = flatten(model).values
        swapped = flatten(permute_augment(model, Permutation.swap(3, 0, 2))).values
        np.testing.assert_array_equal(swapped[0:4], flat[8:12])
        np.testing.assert_array_equal(swapped[8:12], flat[0:4])
        assert swapped[-1] == flat[-1]

    def test_identity_permutation(self, random_model):
        same = permute_augment(random_model, Permutation.identity(random_model.hidden_count))
        np.testing.assert_array_equal(flatten(same).values, flatten(random_model).values)

    def test_function_is_unchanged(self, rng):
        model = FaceModel(rng.normal(size=(6, 2)), rng.normal(size=6), rng.normal(size=6), -0.1)
        xy = rng.uniform(-1, 1, size=(200, 2))
        for mapping in random_permutations(6, 20, seed=4):
            np.testing.assert_allclose(predict(permute_augment(model, mapping), xy), predict(model, xy), atol=1e-6)

    def test_trained_model_under_many_permutations(self, bump_cloud, rng):
        model, _ = train_lm(bump_cloud, LmConfig(hidden_count=50, max_epochs=5))
        xy = rng.uniform(-1, 1, size=(1000, 2))
        expected = predict(model, xy)
        for mapping in random_permutations(50, 100, seed=11, exclude_identity=True):
            deviation = np.max(np.abs(predict(permute_augment(model, mapping), xy) - expected))
            assert deviation <= 1e-6

    def test_size_mismatch(self, random_model):
        with pytest.raises(InvalidPermutationError):
            permute_augment(random_model, Permutation.identity(3))


class TestRandomAugmentations:

    def test_all_permutations_of_three(self, rng):
        model = FaceModel(rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=3), 0.0)
        vectors = random_augmentations(model, 6, seed=0)
        expected = {tuple(flatten(permute_augment(model, Permutation(p))).values)
                    for p in itertools.permutations(range(3))}
        assert {tuple(v.values) for v in vectors} == expected

    def test_too_many_requested(self, rng):
        model = FaceModel(rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=3), 0.0)
        with pytest.raises(InvalidPermutationError):
            random_augmentations(model, 7, seed=0)

    def test_exclude_identity(self):
        perms = random_permutations(3, 5, seed=2, exclude_identity=True)
        assert not any(p.is_identity for p in perms)
        with pytest.raises(InvalidPermutationError):
            random_permutations(3, 6, seed=2, exclude_identity=True)

    def test_large_models_are_distinct(self):
        perms = random_permutations(50, 100, seed=9)
        assert len({p.mapping for p in perms}) == 100

    def test_seeded(self, random_model):
        first = random_augmentations(random_model, 4, seed=13)
        second = random_augmentations(random_model, 4, seed=13)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.values, b.values)

    def test_count_must_be_positive(self):
        with pytest.raises(InvalidPermutationError):
            random_permutations(3, 0, seed=0)


class TestSerialization:

    def test_file_size(self, tmp_path):
        path = str(tmp_path / "m.nf3d")
        serialize(FaceModel.zeros(500), path)
        with open(path, "rb") as f:
            assert len(f.read()) == HEADER_SIZE + 8004
        assert HEADER_SIZE == 16

    def test_reserialize_is_byte_identical(self, random_model, tmp_path):
        path = str(tmp_path / "m.nf3d")
        serialize(random_model, path)
        assert to_bytes(deserialize(path)) == to_bytes(random_model)

    def test_values_are_float32(self, random_model):
        restored = from_bytes(to_bytes(random_model))
        np.testing.assert_allclose(flatten(restored).values, flatten(random_model).values, rtol=1e-6)
        np.testing.assert_array_equal(flatten(quantize(random_model)).values, flatten(restored).values)

    def test_bad_magic(self, random_model):
        data = b"XXXX" + to_bytes(random_model)[4:]
        with pytest.raises(ModelFormatError, match="magic"):
            from_bytes(data)

    def test_bad_version(self, random_model):
        data = bytearray(to_bytes(random_model))
        data[4] = 9
        with pytest.raises(ModelFormatError, match="version"):
            from_bytes(bytes(data))

    def test_truncated_payload(self, random_model):
        with pytest.raises(ModelFormatError, match="truncated"):
            from_bytes(to_bytes(random_model)[:-3])

    def test_truncated_header(self):
        with pytest.raises(ModelFormatError):
            from_bytes(b"NF3D")

    def test_trailing_bytes(self, random_model):
        with pytest.raises(ModelFormatError):
            from_bytes(to_bytes(random_model) + b"\x00\x00\x00\x00")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelFormatError, match="not found"):
            deserialize(str(tmp_path / "nothing.nf3d"))


def test_compression_factor():
    assert compression_factor(80000, 500) >= 80.0
    assert compression_factor(80000, 500) == pytest.approx(80000 * 24 / 8004)


class TestGrid:

    def test_rejects_reversed_bounds(self):
        with pytest.raises(InvalidGridError):
            GridSpec(0.5, -0.5, -1.0, 1.0, 10, 10)

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidGridError):
            GridSpec(-1.5, 1.0, -1.0, 1.0, 10, 10)

    def test_rejects_empty_grid(self):
        with pytest.raises(InvalidGridError):
            GridSpec(-1.0, 1.0, -1.0, 1.0, 0, 10)

    def test_single_node(self, tiny_model):
        cloud = resample(tiny_model, GridSpec(0.5, 0.5, 0.9, 0.9, 1, 1))
        assert cloud.count == 1
        np.testing.assert_allclose(cloud.points[0], [0.5, 0.9, forward(tiny_model, 0.5, 0.9)])

    def test_node_count_and_corners(self, random_model):
        cloud = resample(random_model, GridSpec(-1.0, 1.0, -0.5, 0.5, 5, 3))
        assert cloud.count == 15
        np.testing.assert_allclose(cloud.xy.min(axis=0), [-1.0, -0.5])
        np.testing.assert_allclose(cloud.xy.max(axis=0), [1.0, 0.5])

    def test_grid_for_cloud(self, bump_cloud):
        grid = grid_for_cloud(bump_cloud, factor=4.0)
        assert grid.nx * grid.ny == pytest.approx(4 * bump_cloud.count, rel=0.1)
        assert -1.0 <= grid.x_min <= grid.x_max <= 1.0


def bowl(xy):
    return 0.25 * (xy[:, 0] ** 2 + xy[:, 1] ** 2)


class TestResample:

    def test_denser_grid_tracks_surface(self):
        training = resample(FaceModel.zeros(1), GridSpec(-1.0, 1.0, -1.0, 1.0, 20, 20)).xy
        cloud = PointCloud(np.column_stack([training, bowl(training)]))
        model, report = train_lm(cloud, LmConfig(hidden_count=8, target_mse=1e-6, max_epochs=300))

        dense = resample(model, GridSpec(-1.0, 1.0, -1.0, 1.0, 40, 40))
        assert dense.count == 4 * cloud.count
        dense_mse = float(np.mean((dense.z - bowl(dense.xy)) ** 2))
        assert dense_mse <= 2 * report.final_mse
