import hashlib
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import CloudFormatError, DataError, LandmarkError

logger = logging.getLogger(__name__)


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    Ordered 3D points with optional landmark indices.

    Points are stored as a read-only (N, 3) float64 array.
    """

    points: np.ndarray
    landmark_indices: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        points = _frozen_array(self.points)
        if points.ndim != 2 or points.shape[1] != 3:
            raise CloudFormatError(f"cloud: expected (N, 3) points, got shape {points.shape}")
        if points.shape[0] == 0:
            raise CloudFormatError("cloud: a point cloud needs at least one point")
        if not np.all(np.isfinite(points)):
            raise CloudFormatError("cloud: points must be finite")
        object.__setattr__(self, "points", points)

        if self.landmark_indices is not None:
            indices = tuple(int(i) for i in self.landmark_indices)
            for index in indices:
                if not 0 <= index < points.shape[0]:
                    raise LandmarkError(
                        f"cloud: landmark index {index} out of range for {points.shape[0]} points"
                    )
            object.__setattr__(self, "landmark_indices", indices)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def z(self) -> np.ndarray:
        return self.points[:, 2]

    @property
    def landmarks(self) -> Optional[np.ndarray]:
        if self.landmark_indices is None:
            return None
        return self.points[list(self.landmark_indices)]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same landmarks, new coordinates (one per existing point)."""
        return PointCloud(points, self.landmark_indices)


@dataclass(frozen=True, eq=False)
class NormalizationParams:
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        centroid = _frozen_array(self.centroid)
        if centroid.shape != (3,):
            raise DataError(f"cloud: centroid must be a 3-vector, got shape {centroid.shape}")
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "scale", float(self.scale))


def normalize(cloud: PointCloud) -> Tuple[PointCloud, NormalizationParams]:
    """
    Center the cloud on its mean and divide by the largest absolute centered
    coordinate, so every coordinate lies in [-1, 1].

    Scaling is isotropic. A cloud whose points all coincide keeps scale 1.
    """
    centroid = cloud.points.mean(axis=0)
    centered = cloud.points - centroid
    scale = float(np.max(np.abs(centered)))
    if scale == 0.0:
        scale = 1.0

    params = NormalizationParams(centroid, scale)
    return cloud.with_points(centered / scale), params


def denormalize(cloud: PointCloud, params: NormalizationParams) -> PointCloud:
    if not params.scale > 0:
        raise DataError(f"cloud: normalization scale must be positive, got {params.scale}")
    return cloud.with_points(cloud.points * params.scale + params.centroid)


def cloud_hash(cloud: PointCloud) -> str:
    """Content hash of the raw points, used to spot re-enrollment of one scan."""
    return hashlib.sha256(np.ascontiguousarray(cloud.points).tobytes()).hexdigest()
