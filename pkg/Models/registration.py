import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DataError,
    DegenerateConfigurationError,
    DegenerateCorrespondenceError,
    LandmarkError,
)
from .point_cloud import PointCloud

logger = logging.getLogger(__name__)

_ORTHONORMAL_TOL = 1e-9
# Relative singular-value floor under which a centered point set is treated as collinear.
_COLLINEAR_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """T = [R|t]: maps p to R p + t. R is a proper rotation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise DataError("registration: rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=_ORTHONORMAL_TOL, rtol=0):
            raise DataError("registration: rotation matrix is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHONORMAL_TOL:
            raise DataError("registration: rotation matrix must have determinant +1")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """The transform that applies `first`, then self."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    @property
    def angle_degrees(self) -> float:
        cos_angle = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return math.degrees(math.acos(cos_angle))


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    residual_tolerance: float = 1e-6
    sample_fraction: float = 1.0
    rejection_distance: Optional[float] = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DataError("registration: max_iterations must be >= 1")
        if not self.residual_tolerance > 0:
            raise DataError("registration: residual_tolerance must be positive")
        if not 0 < self.sample_fraction <= 1:
            raise DataError("registration: sample_fraction must be in (0, 1]")
        if self.rejection_distance is not None and not self.rejection_distance > 0:
            raise DataError("registration: rejection_distance must be positive")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations_used: int
    final_residual: float
    residual_history: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class Correspondences:
    """Parallel arrays of (moving index, static index, distance)."""

    moving_indices: np.ndarray
    static_indices: np.ndarray
    distances: np.ndarray

    def __len__(self) -> int:
        return len(self.moving_indices)

    def __iter__(self) -> Iterator[Tuple[int, int, float]]:
        for m, s, d in zip(self.moving_indices, self.static_indices, self.distances):
            yield int(m), int(s), float(d)


def _as_points(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.points
    array = np.asarray(points, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != 3:
        raise DataError(f"registration: expected (N, 3) points, got shape {array.shape}")
    return array


def _is_collinear(centered: np.ndarray) -> bool:
    singular = np.linalg.svd(centered, compute_uv=False)
    return singular[0] == 0.0 or singular[1] <= _COLLINEAR_RTOL * singular[0]


def solve_rigid(moving: Sequence, static: Sequence) -> RigidTransform:
    """
    Least-squares rigid transform taking `moving` onto `static` (points in
    corresponding order), by centroid subtraction, cross-covariance SVD and
    a determinant correction that rules out reflections.
    """
    moving = _as_points(moving)
    static = _as_points(static)
    if moving.shape != static.shape:
        raise DataError(
            f"registration: point sets differ in length ({len(moving)} vs {len(static)})"
        )
    if len(moving) < 3:
        raise DataError(f"registration: need at least 3 point pairs, got {len(moving)}")

    moving_mean = moving.mean(axis=0)
    static_mean = static.mean(axis=0)
    moving_centered = moving - moving_mean
    static_centered = static - static_mean
    if _is_collinear(moving_centered) or _is_collinear(static_centered):
        raise DegenerateConfigurationError(
            "registration: point pairs are collinear, rotation is not determined"
        )

    covariance = moving_centered.T @ static_centered
    u, _, vt = np.linalg.svd(covariance)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    correction = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    rotation = vt.T @ correction @ u.T
    translation = static_mean - rotation @ moving_mean
    return RigidTransform(rotation, translation)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    return cloud.with_points(transform.apply(cloud.points))


def _sample_indices(count: int, config: IcpConfig) -> np.ndarray:
    if config.sample_fraction >= 1.0:
        return np.arange(count)
    rng = np.random.default_rng(config.seed)
    size = max(1, int(math.ceil(config.sample_fraction * count)))
    return np.sort(rng.choice(count, size=size, replace=False))


def _nearest(tree: cKDTree, static_count: int, queries: np.ndarray, workers: int):
    k = min(4, static_count)
    distances, indices = tree.query(queries, k=k, workers=workers)
    if k == 1:
        return distances, indices

    # Exact ties go to the lowest static index.
    tied = distances == distances[:, :1]
    best = np.where(tied, indices, static_count).min(axis=1)
    return distances[:, 0], best


def nearest_correspondences(
    moving: PointCloud,
    static: PointCloud,
    config: IcpConfig,
    tree: Optional[cKDTree] = None,
) -> Correspondences:
    """Exact nearest static point for each sampled moving point, minus rejected pairs."""
    sampled = _sample_indices(moving.count, config)
    if tree is None:
        tree = cKDTree(static.points)
    distances, static_indices = _nearest(tree, static.count, moving.points[sampled], config.workers)

    if config.rejection_distance is not None:
        keep = distances <= config.rejection_distance
        sampled, static_indices, distances = sampled[keep], static_indices[keep], distances[keep]

    return Correspondences(
        moving_indices=np.asarray(sampled, dtype=np.int64),
        static_indices=np.asarray(static_indices, dtype=np.int64),
        distances=np.asarray(distances, dtype=np.float64),
    )


def _pair_residual(moving_points: np.ndarray, static_points: np.ndarray) -> float:
    return float(np.mean(np.sum((static_points - moving_points) ** 2, axis=1)))


def icp(
    moving: PointCloud,
    static: PointCloud,
    initial: Optional[RigidTransform] = None,
    config: Optional[IcpConfig] = None,
) -> IcpResult:
    """
    Iterative closest point: find correspondences, solve the rigid step,
    apply it, repeat until the mean squared residual changes by less than
    the tolerance or the iteration budget runs out.
    """
    config = config or IcpConfig()
    initial = initial or RigidTransform.identity()
    if moving.count < 3 or static.count < 3:
        raise DataError("registration: ICP needs at least 3 points in each cloud")

    tree = cKDTree(static.points)
    current = apply_transform(moving, initial)
    total = initial
    previous: Optional[float] = None
    history: List[float] = []
    iteration = 0

    for iteration in range(1, config.max_iterations + 1):
        pairs = nearest_correspondences(current, static, config, tree=tree)
        if len(pairs) < 3:
            raise DegenerateCorrespondenceError(
                f"registration: only {len(pairs)} correspondences survived rejection"
            )

        matched_static = static.points[pairs.static_indices]
        if previous is None:
            previous = _pair_residual(current.points[pairs.moving_indices], matched_static)

        step = solve_rigid(current.points[pairs.moving_indices], matched_static)
        current = apply_transform(current, step)
        total = step.compose(total)

        residual = _pair_residual(current.points[pairs.moving_indices], matched_static)
        history.append(residual)
        logger.debug("ICP iteration %d: residual %.3e", iteration, residual)

        if abs(previous - residual) < config.residual_tolerance:
            break
        previous = residual

    logger.info(
        "ICP finished after %d iterations, residual %.3e", iteration, history[-1]
    )
    return IcpResult(
        transform=total,
        iterations_used=iteration,
        final_residual=history[-1],
        residual_history=history,
    )


def register_landmarks(
    probe: PointCloud, reference_landmarks: Sequence
) -> Tuple[PointCloud, RigidTransform]:
    """Align the probe so its landmarks land on the reference landmarks."""
    reference = _as_points(reference_landmarks)
    if probe.landmark_indices is None:
        raise LandmarkError("registration: probe cloud has no landmarks")
    if len(probe.landmark_indices) != len(reference):
        raise LandmarkError(
            f"registration: probe has {len(probe.landmark_indices)} landmarks, "
            f"reference has {len(reference)}"
        )
    if len(reference) < 3:
        raise LandmarkError(
            f"registration: landmark registration needs at least 3 landmarks, got {len(reference)}"
        )

    transform = solve_rigid(probe.landmarks, reference)
    return apply_transform(probe, transform), transform


class Registrar:
    """Landmark registration, optionally refined by ICP. Keeps the last result."""

    def __init__(self, icp_config: Optional[IcpConfig] = None):
        self.icp_config = icp_config or IcpConfig()
        self.transform = RigidTransform.identity()
        self.icp_result: Optional[IcpResult] = None

    def register(
        self,
        cloud: PointCloud,
        reference_landmarks: Optional[Sequence] = None,
        icp_reference: Optional[PointCloud] = None,
    ) -> PointCloud:
        self.transform = RigidTransform.identity()
        self.icp_result = None
        registered = cloud

        if reference_landmarks is not None:
            registered, self.transform = register_landmarks(cloud, reference_landmarks)

        if icp_reference is not None:
            self.icp_result = icp(registered, icp_reference, RigidTransform.identity(), self.icp_config)
            registered = apply_transform(registered, self.icp_result.transform)
            self.transform = self.icp_result.transform.compose(self.transform)

        logger.debug("registration: rotation %.4f deg", self.transform.angle_degrees)
        return registered

    def get_transform(self) -> RigidTransform:
        return self.transform

    def get_icp_result(self) -> Optional[IcpResult]:
        return self.icp_result
