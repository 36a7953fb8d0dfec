import numpy as np
import pytest

from Models.face_model import FaceModel
from Models.lm_trainer import init_weights
from Models.point_cloud import PointCloud
from Models.synthetic import gaussian_bump, sample_cloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_point_cloud():
    return PointCloud(np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]))


@pytest.fixture
def random_model():
    return init_weights(5, seed=7)


@pytest.fixture
def tiny_model():
    # M=1, Wi=[1, 0], Bi=[0], Wo=[1], Bo=0
    return FaceModel(np.array([[1.0, 0.0]]), np.array([0.0]), np.array([1.0]), 0.0)


@pytest.fixture
def bump_cloud():
    return sample_cloud(gaussian_bump(), 400, noise=0.0, seed=3)
