import logging
import math
import os
from typing import List, Optional

import numpy as np
import pandas as pd

from .errors import CloudFormatError, LandmarkError
from .point_cloud import PointCloud

logger = logging.getLogger(__name__)


def _parse_xyz(file_path: str) -> np.ndarray:
    rows: List[List[float]] = []
    with open(file_path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue

            tokens = stripped.split()
            if len(tokens) != 3:
                raise CloudFormatError(
                    f"cloud: {file_path}, line {line_number}: expected 3 values, got {len(tokens)}"
                )
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise CloudFormatError(
                    f"cloud: {file_path}, line {line_number}: not a number in {stripped!r}"
                ) from None
            if not all(math.isfinite(v) for v in values):
                raise CloudFormatError(
                    f"cloud: {file_path}, line {line_number}: non-finite value in {stripped!r}"
                )
            rows.append(values)

    if not rows:
        raise CloudFormatError(f"cloud: {file_path} contains no points")
    return np.array(rows, dtype=np.float64)


def load_landmarks(landmark_path: str) -> List[int]:
    if not os.path.exists(landmark_path):
        raise LandmarkError(f"cloud: landmark file not found: {landmark_path}")

    indices: List[int] = []
    with open(landmark_path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                indices.append(int(stripped))
            except ValueError:
                raise LandmarkError(
                    f"cloud: {landmark_path}, line {line_number}: not an integer index: {stripped!r}"
                ) from None
    return indices


def load_cloud(file_path: str, landmark_path: Optional[str] = None) -> PointCloud:
    """
    Read an ASCII XYZ cloud: one point per line, whitespace separated,
    '#' lines ignored. Landmarks come from a separate file of integer
    indices, kept in file order.
    """
    if not os.path.exists(file_path):
        raise CloudFormatError(f"cloud: file not found: {file_path}")

    points = _parse_xyz(file_path)
    landmarks = load_landmarks(landmark_path) if landmark_path else None
    return PointCloud(points, landmarks)


def load_reference_points(file_path: str) -> np.ndarray:
    """Reference landmark coordinates, in XYZ format."""
    return load_cloud(file_path).points


def save_cloud(cloud: PointCloud, file_path: str) -> None:
    np.savetxt(file_path, cloud.points, fmt="%.17g")


def save_landmarks(indices, file_path: str) -> None:
    with open(file_path, "w") as f:
        f.write("".join(f"{int(i)}\n" for i in indices))


class DataManager:
    # Loads clouds, caching parsed XYZ files as feather next to the source.

    def __init__(self, use_cache: bool = True):
        self.use_cache: bool = use_cache
        self.last_source: str = ""

    def load(self, file_path: str, landmark_path: Optional[str] = None) -> PointCloud:
        if not os.path.exists(file_path):
            raise CloudFormatError(f"cloud: file not found: {file_path}")

        feather_path = file_path + ".feather"

        if (
            self.use_cache
            and os.path.exists(feather_path)
            and os.path.getmtime(feather_path) >= os.path.getmtime(file_path)
        ):
            frame = pd.read_feather(feather_path)
            points = frame[["x", "y", "z"]].to_numpy(dtype=np.float64)
            self.last_source = "feather file (cached)"
        else:
            points = _parse_xyz(file_path)
            if self.use_cache:
                pd.DataFrame(points, columns=["x", "y", "z"]).to_feather(feather_path)
            self.last_source = "XYZ file"

        landmarks = load_landmarks(landmark_path) if landmark_path else None
        cloud = PointCloud(points, landmarks)
        logger.info("Loaded %d points from %s (%s)", cloud.count, file_path, self.last_source)
        return cloud
