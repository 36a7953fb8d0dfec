"""
FaceModel: the 2 -> M -> 1 tanh height-field network that stands in for a
face point cloud.

    z = tanh( sum_j wo[j] * tanh(wi[j, 0] * x + wi[j, 1] * y + bi[j]) + bo )

The flat layout is M rows of (wi[j, 0], wi[j, 1], bi[j], wo[j]) followed by
bo, so swapping hidden units is a swap of contiguous 4-value blocks.
"""

import itertools
import logging
import math
import struct
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import (
    DataError,
    DimensionMismatchError,
    InvalidGridError,
    InvalidPermutationError,
    ModelFormatError,
)
from .point_cloud import PointCloud

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"NF3D"
MODEL_FORMAT_VERSION = 1
# magic, version (u16), hidden count (u32), 6 reserved bytes
_HEADER = struct.Struct("<4sHI6s")
HEADER_SIZE = _HEADER.size

# Enumerate all permutations up to this many hidden units; sample with rejection above it.
_ENUMERATION_LIMIT = 7


def parameter_count(hidden_count: int) -> int:
    return 4 * hidden_count + 1


@dataclass(frozen=True, eq=False)
class FaceModel:
    wi: np.ndarray   # (M, 2)
    bi: np.ndarray   # (M,)
    wo: np.ndarray   # (M,)
    bo: float

    def __post_init__(self):
        wi = np.array(self.wi, dtype=np.float64)
        bi = np.array(self.bi, dtype=np.float64).reshape(-1)
        wo = np.array(self.wo, dtype=np.float64).reshape(-1)
        bo = float(self.bo)
        hidden = bi.shape[0]
        if hidden < 1:
            raise DataError("facemodel: a face model needs at least one hidden unit")
        if wi.shape != (hidden, 2) or wo.shape != (hidden,):
            raise DataError(
                f"facemodel: inconsistent shapes wi={wi.shape}, bi={bi.shape}, wo={wo.shape}"
            )
        if not (np.all(np.isfinite(wi)) and np.all(np.isfinite(bi))
                and np.all(np.isfinite(wo)) and math.isfinite(bo)):
            raise DataError("facemodel: weights must be finite")
        for array in (wi, bi, wo):
            array.flags.writeable = False
        object.__setattr__(self, "wi", wi)
        object.__setattr__(self, "bi", bi)
        object.__setattr__(self, "wo", wo)
        object.__setattr__(self, "bo", bo)

    @property
    def hidden_count(self) -> int:
        return self.bi.shape[0]

    @property
    def parameter_count(self) -> int:
        return parameter_count(self.hidden_count)

    @classmethod
    def zeros(cls, hidden_count: int) -> "FaceModel":
        return cls(np.zeros((hidden_count, 2)), np.zeros(hidden_count), np.zeros(hidden_count), 0.0)


@dataclass(frozen=True, eq=False)
class FlatWeights:
    values: np.ndarray
    hidden_count: int

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != parameter_count(self.hidden_count):
            raise DimensionMismatchError(
                f"facemodel: {values.shape[0]} values do not fit M={self.hidden_count} "
                f"(expected {parameter_count(self.hidden_count)})"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "hidden_count", int(self.hidden_count))

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Permutation:
    """Hidden unit j moves to position mapping[j]."""

    mapping: Tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(i) for i in self.mapping)
        if sorted(mapping) != list(range(len(mapping))):
            raise InvalidPermutationError(f"facemodel: {mapping} is not a permutation")
        object.__setattr__(self, "mapping", mapping)

    @classmethod
    def identity(cls, size: int) -> "Permutation":
        return cls(tuple(range(size)))

    @classmethod
    def swap(cls, size: int, a: int, b: int) -> "Permutation":
        mapping = list(range(size))
        mapping[a], mapping[b] = mapping[b], mapping[a]
        return cls(tuple(mapping))

    def __len__(self) -> int:
        return len(self.mapping)

    @property
    def is_identity(self) -> bool:
        return all(i == j for i, j in enumerate(self.mapping))


def predict(model: FaceModel, xy: np.ndarray) -> np.ndarray:
    """Vectorized forward pass over (N, 2) inputs."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    hidden = np.tanh(xy @ model.wi.T + model.bi)
    return np.tanh(hidden @ model.wo + model.bo)


def forward(model: FaceModel, x: float, y: float) -> float:
    return float(predict(model, np.array([[x, y]]))[0])


def mse(model: FaceModel, cloud: PointCloud) -> float:
    residual = predict(model, cloud.xy) - cloud.z
    return float(np.mean(residual ** 2))


def flatten(model: FaceModel) -> FlatWeights:
    rows = np.column_stack([model.wi[:, 0], model.wi[:, 1], model.bi, model.wo])
    return FlatWeights(np.append(rows.ravel(), model.bo), model.hidden_count)


def unflatten(flat: FlatWeights) -> FaceModel:
    rows = flat.values[:-1].reshape(flat.hidden_count, 4)
    return FaceModel(rows[:, 0:2], rows[:, 2], rows[:, 3], flat.values[-1])


def permute_augment(model: FaceModel, perm: Permutation) -> FaceModel:
    """Reorder hidden units; the output bias is shared by every augmentation."""
    if len(perm) != model.hidden_count:
        raise InvalidPermutationError(
            f"facemodel: permutation of size {len(perm)} for a model with M={model.hidden_count}"
        )
    order = np.empty(model.hidden_count, dtype=np.int64)
    order[list(perm.mapping)] = np.arange(model.hidden_count)
    return FaceModel(model.wi[order], model.bi[order], model.wo[order], model.bo)


def _distinct_permutations(size: int, count: int, rng: np.random.Generator,
                           exclude_identity: bool) -> List[Permutation]:
    # 21! already exceeds any count that fits in memory.
    if size < 21:
        available = math.factorial(size) - (1 if exclude_identity else 0)
        if count > available:
            raise InvalidPermutationError(
                f"facemodel: only {available} distinct permutations of {size} hidden units, "
                f"{count} requested"
            )

    if size <= _ENUMERATION_LIMIT:
        candidates = [p for p in itertools.permutations(range(size))
                      if not (exclude_identity and p == tuple(range(size)))]
        chosen = rng.choice(len(candidates), size=count, replace=False)
        return [Permutation(candidates[i]) for i in chosen]

    seen = set()
    result: List[Permutation] = []
    identity = tuple(range(size))
    while len(result) < count:
        mapping = tuple(int(i) for i in rng.permutation(size))
        if mapping in seen or (exclude_identity and mapping == identity):
            continue
        seen.add(mapping)
        result.append(Permutation(mapping))
    return result


def random_permutations(size: int, count: int, seed,
                        exclude_identity: bool = False) -> List[Permutation]:
    if count < 1:
        raise InvalidPermutationError("facemodel: augmentation count must be >= 1")
    return _distinct_permutations(size, count, np.random.default_rng(seed), exclude_identity)


def random_augmentations(model: FaceModel, count: int, seed: int,
                         exclude_identity: bool = False) -> List[FlatWeights]:
    """`count` flattened models from distinct hidden-unit permutations."""
    perms = random_permutations(model.hidden_count, count, seed, exclude_identity)
    return [flatten(permute_augment(model, p)) for p in perms]


def to_bytes(model: FaceModel) -> bytes:
    header = _HEADER.pack(MODEL_MAGIC, MODEL_FORMAT_VERSION, model.hidden_count, b"\x00" * 6)
    payload = flatten(model).values.astype("<f4").tobytes()
    return header + payload


def from_bytes(data: bytes, source: str = "<bytes>") -> FaceModel:
    if len(data) < HEADER_SIZE:
        raise ModelFormatError(f"facemodel: {source} is truncated (no complete header)")
    magic, version, hidden_count, _ = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"facemodel: {source} has bad magic {magic!r}")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"facemodel: {source} has format version {version}, expected {MODEL_FORMAT_VERSION}"
        )
    if hidden_count < 1:
        raise ModelFormatError(f"facemodel: {source} declares M={hidden_count}")

    expected = parameter_count(hidden_count) * 4
    payload = data[HEADER_SIZE:]
    if len(payload) < expected:
        raise ModelFormatError(
            f"facemodel: {source} is truncated ({len(payload)} of {expected} payload bytes)"
        )
    if len(payload) > expected:
        raise ModelFormatError(
            f"facemodel: {source} payload of {len(payload)} bytes is inconsistent with M={hidden_count}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return unflatten(FlatWeights(values, hidden_count))


def serialize(model: FaceModel, path: str) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(model))


def deserialize(path: str) -> FaceModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise ModelFormatError(f"facemodel: model file not found: {path}") from None
    return from_bytes(data, source=path)


def quantize(model: FaceModel) -> FaceModel:
    """The model as it reads back from a model file (float32 weights)."""
    return from_bytes(to_bytes(model))


def compression_factor(point_count: int, hidden_count: int) -> float:
    """Raw float64 XYZ bytes over the float32 model payload."""
    return (point_count * 3 * 8) / (parameter_count(hidden_count) * 4)


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidGridError(f"facemodel: grid needs nx, ny >= 1, got {self.nx}x{self.ny}")
        for name, low, high in (("x", self.x_min, self.x_max), ("y", self.y_min, self.y_max)):
            if not (-1.0 <= low <= 1.0 and -1.0 <= high <= 1.0):
                raise InvalidGridError(f"facemodel: {name} bounds [{low}, {high}] leave [-1, 1]")
            if low > high:
                raise InvalidGridError(f"facemodel: {name} bounds are reversed ({low} > {high})")

    def nodes(self) -> np.ndarray:
        xs = np.linspace(self.x_min, self.x_max, self.nx)
        ys = np.linspace(self.y_min, self.y_max, self.ny)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


def grid_for_cloud(cloud: PointCloud, factor: float = 4.0) -> GridSpec:
    """A grid over the cloud's xy extent with about factor * N nodes."""
    x_min, y_min = np.clip(cloud.xy.min(axis=0), -1.0, 1.0)
    x_max, y_max = np.clip(cloud.xy.max(axis=0), -1.0, 1.0)
    width, height = x_max - x_min, y_max - y_min
    target = max(1.0, factor * cloud.count)
    if width > 0 and height > 0:
        nx = max(1, int(round(math.sqrt(target * width / height))))
        ny = max(1, int(round(target / nx)))
    elif width > 0:
        nx, ny = max(1, int(round(target))), 1
    elif height > 0:
        nx, ny = 1, max(1, int(round(target)))
    else:
        nx = ny = 1
    return GridSpec(float(x_min), float(x_max), float(y_min), float(y_max), nx, ny)


def resample(model: FaceModel, grid: GridSpec) -> PointCloud:
    nodes = grid.nodes()
    return PointCloud(np.column_stack([nodes, predict(model, nodes)]))
