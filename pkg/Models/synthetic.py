import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError
from .point_cloud import PointCloud, normalize

logger = logging.getLogger(__name__)

# nose tip, eye corners, mouth corners
LANDMARK_XY = np.array([
    [0.0, 0.0],
    [-0.4, 0.35],
    [0.4, 0.35],
    [-0.3, -0.45],
    [0.3, -0.45],
])


@dataclass(frozen=True)
class BumpSurface:
    """z = sum_k height[k] * exp(-width[k] * |xy - center[k]|^2)"""

    centers: np.ndarray
    widths: np.ndarray
    heights: np.ndarray

    def __call__(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        squared = ((xy[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return (self.heights * np.exp(-self.widths * squared)).sum(axis=1)


def gaussian_bump() -> BumpSurface:
    """The benchmark surface 0.5 * exp(-4 (x^2 + y^2))."""
    return BumpSurface(np.zeros((1, 2)), np.array([4.0]), np.array([0.5]))


def random_surface(seed, bumps: int = 3) -> BumpSurface:
    rng = np.random.default_rng(seed)
    return BumpSurface(
        centers=rng.uniform(-0.6, 0.6, size=(bumps, 2)),
        widths=rng.uniform(2.0, 8.0, size=bumps),
        heights=rng.uniform(0.15, 0.45, size=bumps),
    )


def sample_cloud(surface: BumpSurface, count: int, noise: float = 0.0, seed=0,
                 pose_degrees: float = 0.0, pose_shift: float = 0.0) -> PointCloud:
    """
    `count` points of the surface with Gaussian height noise, optionally moved
    by a random rigid pose (rotation up to `pose_degrees`, translation up to
    `pose_shift` per axis).
    """
    if count < len(LANDMARK_XY):
        raise DataError(f"cloud: synthetic clouds need at least {len(LANDMARK_XY)} points")
    if noise < 0:
        raise DataError("cloud: noise must be non-negative")

    rng = np.random.default_rng(seed)
    xy = np.vstack([LANDMARK_XY, rng.uniform(-1.0, 1.0, size=(count - len(LANDMARK_XY), 2))])
    z = surface(xy)
    if noise > 0:
        z = z + rng.normal(0.0, noise, size=z.shape)
    points = np.column_stack([xy, z])

    if pose_degrees > 0 or pose_shift > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.uniform(0.0, pose_degrees))
        rotation = Rotation.from_rotvec(axis * angle)
        shift = rng.uniform(-pose_shift, pose_shift, size=3)
        points = rotation.apply(points) + shift

    return PointCloud(points, tuple(range(len(LANDMARK_XY))))


def reference_landmarks(surface: Optional[BumpSurface] = None, count: int = 2000) -> np.ndarray:
    """Landmark coordinates of the noiseless surface, in normalized coordinates."""
    cloud, _ = normalize(sample_cloud(surface or gaussian_bump(), count, seed=0))
    return np.array(cloud.landmarks)


def toy_identities(identities: int, samples: int, count: int, noise: float,
                   pose_degrees: float = 0.0,
                   seed=0) -> List[Tuple[str, List[PointCloud]]]:
    """`samples` noisy clouds for each of `identities` random surfaces."""
    gallery = []
    for identity in range(identities):
        surface = random_surface((seed, identity))
        clouds = [sample_cloud(surface, count, noise, seed=(seed, identity, sample),
                               pose_degrees=pose_degrees)
                  for sample in range(samples)]
        gallery.append((f"id{identity:02d}", clouds))
    logger.info("Generated %d toy identities with %d clouds each", identities, samples)
    return gallery
