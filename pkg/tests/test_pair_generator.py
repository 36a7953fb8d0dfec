import numpy as np
import pytest

from Models.errors import DimensionMismatchError, InfeasiblePairsError, ModelFormatError
from Models.face_model import FlatWeights
from Models.pair_generator import (
    PairGenerator,
    generate_pairs,
    group_by_identity,
    load_pairs,
    save_pairs,
    split_identities,
    split_pairs,
)
from Models.siamese import LabeledPair


def flat_model(rng, hidden_count=3):
    return FlatWeights(rng.normal(size=4 * hidden_count + 1), hidden_count)


def make_gallery(rng, identities, models, hidden_count=3):
    return [(f"id{i:02d}", [flat_model(rng, hidden_count) for _ in range(models)]) for i in range(identities)]


def owner_lookup(gallery):
    return {flat.values.tobytes(): identity for identity, models in gallery for flat in models}


class TestGeneratePairs:

    def test_two_by_two(self, rng):
        gallery = make_gallery(rng, 2, 2)
        owners = owner_lookup(gallery)
        pairs = generate_pairs(gallery, positives=2, negatives=2, seed=0)
        assert sorted(p.label for p in pairs) == [0, 0, 1, 1]
        for pair in pairs:
            same = owners[pair.a.values.tobytes()] == owners[pair.b.values.tobytes()]
            assert same == (pair.label == 1)
            assert not np.array_equal(pair.a.values, pair.b.values)

    def test_exact_counts_and_labels(self, rng):
        gallery = make_gallery(rng, 5, 4)
        owners = owner_lookup(gallery)
        pairs = generate_pairs(gallery, positives=25, negatives=100, seed=1)
        assert sum(p.label for p in pairs) == 25
        assert len(pairs) == 125
        for pair in pairs:
            same = owners[pair.a.values.tobytes()] == owners[pair.b.values.tobytes()]
            assert same == (pair.label == 1)

    def test_pairs_are_distinct(self, rng):
        gallery = make_gallery(rng, 3, 3)
        pairs = generate_pairs(gallery, positives=9, negatives=27, seed=2)
        keys = {(p.a.values.tobytes(), p.b.values.tobytes()) for p in pairs}
        assert len(keys) == len(pairs)

    def test_one_identity(self, rng):
        with pytest.raises(InfeasiblePairsError):
            generate_pairs(make_gallery(rng, 1, 1), positives=1, negatives=1, augment_per_model=5)

    def test_augmented_positives_for_single_model(self, rng):
        generator = PairGenerator(make_gallery(rng, 1, 1), augment_per_model=5, seed=0)
        assert len(generator.variants[0].vectors) == 6
        assert generator.available_positives == 15
        pairs = generator.generate(positives=15, negatives=0)
        assert all(p.label == 1 for p in pairs)
        with pytest.raises(InfeasiblePairsError):
            generator.generate(positives=1, negatives=1)

    def test_augmentation_is_required_for_positives(self, rng):
        gallery = make_gallery(rng, 3, 1)
        with pytest.raises(InfeasiblePairsError):
            generate_pairs(gallery, positives=1, negatives=1)
        pairs = generate_pairs(gallery, positives=3, negatives=3, augment_per_model=1)
        assert sum(p.label for p in pairs) == 3

    def test_too_many_negatives(self, rng):
        with pytest.raises(InfeasiblePairsError):
            generate_pairs(make_gallery(rng, 2, 2), positives=0, negatives=5)

    def test_seeded(self, rng):
        gallery = make_gallery(rng, 4, 3)
        first = generate_pairs(gallery, positives=6, negatives=10, augment_per_model=2, seed=7)
        second = generate_pairs(gallery, positives=6, negatives=10, augment_per_model=2, seed=7)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.a.values, b.a.values)
            np.testing.assert_array_equal(a.b.values, b.b.values)
            assert a.label == b.label

    def test_mixed_sizes(self, rng):
        gallery = [("a", [flat_model(rng, 3)]), ("b", [flat_model(rng, 2)])]
        with pytest.raises(DimensionMismatchError):
            generate_pairs(gallery, positives=0, negatives=1)

    def test_duplicate_identities(self, rng):
        gallery = [("a", [flat_model(rng)]), ("a", [flat_model(rng)])]
        with pytest.raises(InfeasiblePairsError):
            generate_pairs(gallery, positives=0, negatives=1)

    def test_shared_model_across_identities(self, rng):
        shared = flat_model(rng)
        gallery = [("a", [shared]), ("b", [shared])]
        with pytest.raises(InfeasiblePairsError):
            generate_pairs(gallery, positives=0, negatives=1)


class TestSplits:

    def test_split_pairs_keeps_ratio(self, rng):
        pairs = generate_pairs(make_gallery(rng, 4, 3), positives=10, negatives=20, seed=0)
        train, test = split_pairs(pairs, 0.5, seed=3)
        assert len(train) == 15 and len(test) == 15
        assert sum(p.label for p in train) == 5
        assert sum(p.label for p in test) == 5

    def test_split_pairs_is_a_partition(self, rng):
        pairs = generate_pairs(make_gallery(rng, 3, 3), positives=6, negatives=9, seed=0)
        train, test = split_pairs(pairs, 0.6, seed=1)
        assert {id(p) for p in train} | {id(p) for p in test} == {id(p) for p in pairs}
        assert not {id(p) for p in train} & {id(p) for p in test}

    def test_split_identities_is_disjoint(self, rng):
        gallery = make_gallery(rng, 10, 2)
        train, test = split_identities(gallery, 0.5, seed=4)
        train_ids = {identity for identity, _ in train}
        test_ids = {identity for identity, _ in test}
        assert len(train_ids) == 5 and len(test_ids) == 5
        assert not train_ids & test_ids

    def test_group_by_identity(self, rng):
        a1, a2, b1 = flat_model(rng), flat_model(rng), flat_model(rng)
        grouped = group_by_identity([("b", b1), ("a", a1), ("a", a2)])
        assert [identity for identity, _ in grouped] == ["a", "b"]
        assert grouped[0][1] == [a1, a2]


class TestPairFiles:

    def test_save_and_load(self, rng, tmp_path):
        pairs = generate_pairs(make_gallery(rng, 3, 2), positives=3, negatives=4, seed=0)
        path = str(tmp_path / "pairs.bin")
        save_pairs(pairs, path)
        loaded = load_pairs(path)
        assert [p.label for p in loaded] == [p.label for p in pairs]
        for original, restored in zip(pairs, loaded):
            np.testing.assert_allclose(restored.a.values, original.a.values, rtol=1e-6)
            np.testing.assert_allclose(restored.b.values, original.b.values, rtol=1e-6)

    def test_empty(self, tmp_path):
        with pytest.raises(InfeasiblePairsError):
            save_pairs([], str(tmp_path / "pairs.bin"))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "pairs.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(ModelFormatError):
            load_pairs(str(path))

    def test_truncated(self, rng, tmp_path):
        path = tmp_path / "pairs.bin"
        pair = LabeledPair(flat_model(rng), flat_model(rng), 1)
        save_pairs([pair], str(path))
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(ModelFormatError):
            load_pairs(str(path))
