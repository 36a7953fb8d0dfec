import os

import numpy as np
import pytest

from Models.data_manager import DataManager, load_cloud, load_landmarks, save_cloud, save_landmarks
from Models.errors import CloudFormatError, LandmarkError
from Models.point_cloud import PointCloud


class TestLoadCloud:

    def test_two_points(self, tmp_path):
        path = tmp_path / "face.xyz"
        path.write_text("0 0 0\n1 1 1\n")
        cloud = load_cloud(str(path))
        assert cloud.count == 2
        np.testing.assert_array_equal(cloud.points, [[0, 0, 0], [1, 1, 1]])

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "face.xyz"
        path.write_text("# scan\n\n0.5 -0.5 2e-3\n")
        cloud = load_cloud(str(path))
        np.testing.assert_array_equal(cloud.points, [[0.5, -0.5, 0.002]])

    def test_nan_names_line(self, tmp_path):
        path = tmp_path / "face.xyz"
        path.write_text("0 0 nan\n")
        with pytest.raises(CloudFormatError, match="line 1"):
            load_cloud(str(path))

    def test_wrong_token_count_names_line(self, tmp_path):
        path = tmp_path / "face.xyz"
        path.write_text("0 0 0\n1 1\n")
        with pytest.raises(CloudFormatError, match="line 2"):
            load_cloud(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(CloudFormatError, match="not found"):
            load_cloud(str(tmp_path / "absent.xyz"))

    def test_landmarks_keep_file_order(self, tmp_path):
        cloud_path = tmp_path / "face.xyz"
        cloud_path.write_text("0 0 0\n1 0 0\n0 1 0\n")
        landmark_path = tmp_path / "face.lm"
        landmark_path.write_text("2\n0\n")
        cloud = load_cloud(str(cloud_path), str(landmark_path))
        assert cloud.landmark_indices == (2, 0)

    def test_landmark_out_of_range(self, tmp_path):
        cloud_path = tmp_path / "face.xyz"
        cloud_path.write_text("0 0 0\n1 0 0\n")
        landmark_path = tmp_path / "face.lm"
        landmark_path.write_text("5\n")
        with pytest.raises(LandmarkError):
            load_cloud(str(cloud_path), str(landmark_path))

    def test_missing_landmark_file_named(self, tmp_path):
        with pytest.raises(LandmarkError, match="nowhere.lm"):
            load_landmarks(str(tmp_path / "nowhere.lm"))


class TestSave:

    def test_save_then_load_is_exact(self, tmp_path, rng):
        cloud = PointCloud(rng.normal(size=(20, 3)))
        path = str(tmp_path / "out.xyz")
        save_cloud(cloud, path)
        np.testing.assert_array_equal(load_cloud(path).points, cloud.points)

    def test_landmark_file(self, tmp_path):
        path = str(tmp_path / "out.lm")
        save_landmarks((3, 1, 2), path)
        assert load_landmarks(path) == [3, 1, 2]


class TestDataManagerCache:

    def test_writes_and_reuses_feather(self, tmp_path, rng):
        cloud = PointCloud(rng.normal(size=(30, 3)))
        path = str(tmp_path / "scan.xyz")
        save_cloud(cloud, path)

        manager = DataManager(use_cache=True)
        first = manager.load(path)
        assert os.path.exists(str(tmp_path / "scan.xyz.feather"))
        assert manager.last_source == "XYZ file"

        second = manager.load(path)
        assert manager.last_source == "feather file (cached)"
        np.testing.assert_array_equal(first.points, second.points)

    def test_stale_cache_is_ignored(self, tmp_path):
        path = tmp_path / "scan.xyz"
        path.write_text("0 0 0\n")
        DataManager(use_cache=True).load(str(path))

        path.write_text("1 2 3\n")
        feather = str(tmp_path / "scan.xyz.feather")
        stale = os.path.getmtime(str(path)) - 10
        os.utime(feather, (stale, stale))

        manager = DataManager(use_cache=True)
        cloud = manager.load(str(path))
        assert manager.last_source == "XYZ file"
        np.testing.assert_array_equal(cloud.points, [[1, 2, 3]])

    def test_no_cache(self, tmp_path):
        path = tmp_path / "scan.xyz"
        path.write_text("0 0 0\n")
        DataManager(use_cache=False).load(str(path))
        assert not os.path.exists(str(tmp_path / "scan.xyz.feather"))

    def test_same_stem_different_extension(self, tmp_path):
        (tmp_path / "face.xyz").write_text("0 0 0\n")
        (tmp_path / "face.txt").write_text("4 5 6\n")
        manager = DataManager(use_cache=True)
        manager.load(str(tmp_path / "face.xyz"))
        cloud = manager.load(str(tmp_path / "face.txt"))
        assert manager.last_source == "XYZ file"
        np.testing.assert_array_equal(cloud.points, [[4, 5, 6]])
