import os

import numpy as np
import pytest

from Models.errors import DimensionMismatchError, GalleryError
from Models.face_model import FaceModel, deserialize, flatten, quantize
from Models.gallery import LOCK_FILE, EnrollmentMeta, Gallery
from Models.lm_trainer import init_weights
from Models.siamese import SiameseNet, embed, energy


@pytest.fixture
def gallery(tmp_path):
    return Gallery(str(tmp_path / "gallery"))


@pytest.fixture
def net():
    return SiameseNet.initialize((13, 8, 4), seed=0)


def models_for(identity_index, count, hidden_count=3):
    return [init_weights(hidden_count, seed=100 * identity_index + i) for i in range(count)]


class TestEnroll:

    def test_first_enrollment(self, gallery):
        entry = gallery.enroll("alice", init_weights(3, seed=0))
        assert entry.identity == "alice"
        assert entry.model_paths == ("alice/0000.nf3d",)
        assert len(gallery.entries()) == 1
        assert os.path.exists(os.path.join(gallery.gallery_dir, "alice", "0000.nf3d"))

    def test_second_model_same_identity(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0))
        entry = gallery.enroll("alice", init_weights(3, seed=1))
        assert len(gallery.entries()) == 1
        assert entry.model_paths == ("alice/0000.nf3d", "alice/0001.nf3d")

    def test_models_read_back(self, gallery):
        model = init_weights(3, seed=4)
        gallery.enroll("bob", model)
        stored = gallery.load_models()["bob"][0]
        np.testing.assert_array_equal(flatten(stored).values, flatten(quantize(model)).values)

    def test_hidden_count_mismatch(self, gallery):
        gallery.enroll("alice", init_weights(5, seed=0))
        with pytest.raises(GalleryError, match="M=3"):
            gallery.enroll("bob", init_weights(3, seed=0))
        assert gallery.hidden_count() == 5

    def test_same_source_twice(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0), EnrollmentMeta(source_hash="abc"))
        with pytest.raises(GalleryError, match="alice"):
            gallery.enroll("bob", init_weights(3, seed=1), EnrollmentMeta(source_hash="abc"))

    def test_metadata_kept(self, gallery):
        meta = EnrollmentMeta(point_count=5000, final_mse=1.5e-4, source_hash="ff", timestamp="2024-01-01T00:00:00")
        entry = gallery.enroll("carol", init_weights(3, seed=0), meta)
        assert entry.enrollment_metadata == (meta,)

    def test_timestamp_filled_in(self, gallery):
        entry = gallery.enroll("carol", init_weights(3, seed=0))
        assert entry.enrollment_metadata[0].timestamp

    def test_missing_metadata_reads_back(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0))
        gallery.enroll("alice", init_weights(3, seed=1), None)
        meta = Gallery(gallery.gallery_dir).entry("alice").enrollment_metadata
        assert [m.point_count for m in meta] == [0, 0]
        assert all(np.isnan(m.final_mse) for m in meta)
        assert "nan" in open(gallery.index_path).read()

    @pytest.mark.parametrize("label", ["", "../escape", "has space", "_leading", "index.tsv", "alice.tmp"])
    def test_invalid_identity(self, gallery, label):
        with pytest.raises(GalleryError):
            gallery.enroll(label, init_weights(3, seed=0))

    def test_held_lock(self, gallery):
        os.makedirs(gallery.gallery_dir)
        open(os.path.join(gallery.gallery_dir, LOCK_FILE), "w").close()
        with pytest.raises(GalleryError, match="locked"):
            gallery.enroll("alice", init_weights(3, seed=0))

    def test_lock_released(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0))
        assert not os.path.exists(os.path.join(gallery.gallery_dir, LOCK_FILE))

    def test_no_temporary_files_left(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0))
        leftovers = [name for _, _, files in os.walk(gallery.gallery_dir) for name in files if name.endswith(".tmp")]
        assert leftovers == []

    def test_unknown_identity(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0))
        with pytest.raises(GalleryError):
            gallery.entry("zed")

    def test_index_paths_resolve(self, gallery):
        for i in range(3):
            for model in models_for(i, 2):
                gallery.enroll(f"id{i}", model)
        for entry in gallery.entries():
            for path in entry.model_paths:
                deserialize(os.path.join(gallery.gallery_dir, path))


class TestMatchProbe:

    def test_empty_gallery(self, gallery, net):
        with pytest.raises(GalleryError):
            gallery.match_probe(init_weights(3, seed=0), net)

    def test_enrolled_model_ranks_first(self, gallery, net):
        for i in range(4):
            for model in models_for(i, 2):
                gallery.enroll(f"id{i}", model)
        probe = quantize(models_for(2, 2)[1])
        results = gallery.match_probe(probe, net, top_k=4)
        assert results[0].identity == "id2"
        assert results[0].score == pytest.approx(0.0, abs=1e-9)

    def test_top_k_larger_than_gallery(self, gallery, net):
        for i in range(3):
            gallery.enroll(f"id{i}", models_for(i, 1)[0])
        results = gallery.match_probe(init_weights(3, seed=99), net, top_k=10)
        assert sorted(r.identity for r in results) == ["id0", "id1", "id2"]
        assert gallery.match_probe(init_weights(3, seed=99), net, top_k=0) == []

    def test_matches_brute_force_ranking(self, gallery, net):
        stored = {}
        for i in range(10):
            label = f"id{i:02d}"
            stored[label] = models_for(i, 3)
            for model in stored[label]:
                gallery.enroll(label, model)
        probe = init_weights(3, seed=12345)

        probe_embedding = embed(net, flatten(probe))
        expected = sorted(
            (min(energy(embed(net, flatten(quantize(m))), probe_embedding) for m in models), label)
            for label, models in stored.items()
        )
        results = gallery.match_probe(probe, net, top_k=10)
        assert [r.identity for r in results] == [label for _, label in expected]
        np.testing.assert_allclose([r.score for r in results], [score for score, _ in expected], atol=1e-9)

    def test_ties_broken_by_identity(self, gallery):
        model = init_weights(3, seed=0)
        gallery.enroll("beta", model, EnrollmentMeta(source_hash="1"))
        gallery.enroll("alpha", model, EnrollmentMeta(source_hash="2"))
        results = gallery.match_probe(init_weights(3, seed=5), SiameseNet.zeros((13, 4, 2)))
        assert [r.identity for r in results] == ["alpha", "beta"]

    def test_network_size_mismatch(self, gallery):
        gallery.enroll("alice", init_weights(3, seed=0))
        with pytest.raises(DimensionMismatchError):
            gallery.match_probe(init_weights(3, seed=1), SiameseNet.initialize((9, 4), seed=0))

    def test_probe_size_mismatch(self, gallery, net):
        gallery.enroll("alice", init_weights(3, seed=0))
        with pytest.raises(DimensionMismatchError):
            gallery.match_probe(FaceModel.zeros(2), net)
