import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatchError, InfeasiblePairsError, ModelFormatError
from .face_model import FlatWeights, permute_augment, random_permutations, flatten, unflatten
from .siamese import LabeledPair

logger = logging.getLogger(__name__)

PAIRS_MAGIC = b"NPRS"
PAIRS_FORMAT_VERSION = 1
# magic, version (u16), hidden count (u32), pair count (u32), 2 reserved bytes
_HEADER = struct.Struct("<4sHII2s")

GalleryVectors = Sequence[Tuple[str, Sequence[FlatWeights]]]


@dataclass(frozen=True)
class _Variants:
    identity: str
    vectors: List[FlatWeights]


def _variants(gallery: GalleryVectors, augment_per_model: int, seed: int) -> List[_Variants]:
    """Each model plus `augment_per_model` non-identity permutations, bit-identical copies dropped."""
    result = []
    for position, (identity, models) in enumerate(gallery):
        seen = set()
        vectors: List[FlatWeights] = []
        for index, flat in enumerate(models):
            candidates = [flat]
            if augment_per_model > 0:
                model = unflatten(flat)
                perms = random_permutations(
                    flat.hidden_count, augment_per_model,
                    seed=(seed, position, index),
                    exclude_identity=True,
                )
                candidates += [flatten(permute_augment(model, p)) for p in perms]
            for vector in candidates:
                key = vector.values.tobytes()
                if key not in seen:
                    seen.add(key)
                    vectors.append(vector)
        result.append(_Variants(identity, vectors))
    return result


def _decode_within(k: int, n: int) -> Tuple[int, int]:
    """k-th (i, j) with i < j < n, in row-major order."""
    i = 0
    row = n - 1
    while k >= row:
        k -= row
        i += 1
        row -= 1
    return i, i + 1 + k


class PairGenerator:
    """
    Positives come from one identity's variants, negatives from two identities.
    Both are sampled without replacement, so requested counts are exact.
    """

    def __init__(self, gallery: GalleryVectors, augment_per_model: int = 0, seed: int = 0):
        identities = [identity for identity, _ in gallery]
        if len(set(identities)) != len(identities):
            raise InfeasiblePairsError("siamese: identities in the gallery must be unique")
        lengths = {len(flat) for _, models in gallery for flat in models}
        if len(lengths) > 1:
            raise DimensionMismatchError(f"siamese: gallery mixes model sizes {sorted(lengths)}")

        self.seed = seed
        self.variants = _variants(gallery, augment_per_model, seed)
        sizes = np.array([len(v.vectors) for v in self.variants], dtype=np.int64)
        self._positive_counts = sizes * (sizes - 1) // 2
        pairs = [(a, b) for a in range(len(sizes)) for b in range(a + 1, len(sizes))]
        self._negative_identities = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        self._negative_counts = (
            sizes[self._negative_identities[:, 0]] * sizes[self._negative_identities[:, 1]]
            if pairs else np.zeros(0, dtype=np.int64)
        )

    @property
    def available_positives(self) -> int:
        return int(self._positive_counts.sum())

    @property
    def available_negatives(self) -> int:
        return int(self._negative_counts.sum())

    def _positive(self, k: int) -> LabeledPair:
        offsets = np.cumsum(self._positive_counts)
        identity = int(np.searchsorted(offsets, k, side="right"))
        k -= int(offsets[identity - 1]) if identity else 0
        vectors = self.variants[identity].vectors
        i, j = _decode_within(k, len(vectors))
        return LabeledPair(vectors[i], vectors[j], 1)

    def _negative(self, k: int) -> LabeledPair:
        offsets = np.cumsum(self._negative_counts)
        slot = int(np.searchsorted(offsets, k, side="right"))
        k -= int(offsets[slot - 1]) if slot else 0
        a, b = self._negative_identities[slot]
        second = self.variants[b].vectors
        i, j = divmod(k, len(second))
        return LabeledPair(self.variants[a].vectors[i], second[j], 0)

    def generate(self, positives: int, negatives: int) -> List[LabeledPair]:
        if len(self.variants) < 2 and negatives > 0:
            raise InfeasiblePairsError("siamese: negative pairs need at least 2 identities")
        if positives > self.available_positives:
            raise InfeasiblePairsError(
                f"siamese: {positives} positive pairs requested, {self.available_positives} available"
            )
        if negatives > self.available_negatives:
            raise InfeasiblePairsError(
                f"siamese: {negatives} negative pairs requested, {self.available_negatives} available"
            )

        rng = np.random.default_rng(self.seed)
        pairs = []
        if positives:
            pairs += [self._positive(int(k)) for k in
                      np.sort(rng.choice(self.available_positives, size=positives, replace=False))]
        if negatives:
            for k in np.sort(rng.choice(self.available_negatives, size=negatives, replace=False)):
                pair = self._negative(int(k))
                if np.array_equal(pair.a.values, pair.b.values):
                    raise InfeasiblePairsError(
                        "siamese: two identities share a bit-identical model"
                    )
                pairs.append(pair)

        order = rng.permutation(len(pairs))
        logger.info("Generated %d positive and %d negative pairs", positives, negatives)
        return [pairs[i] for i in order]


def generate_pairs(gallery: GalleryVectors, positives: int, negatives: int,
                   augment_per_model: int = 0, seed: int = 0) -> List[LabeledPair]:
    if len(gallery) < 2:
        raise InfeasiblePairsError("siamese: pair generation needs at least 2 identities")
    return PairGenerator(gallery, augment_per_model, seed).generate(positives, negatives)


def split_pairs(pairs: Sequence[LabeledPair], train_fraction: float = 0.5,
                seed: int = 0) -> Tuple[List[LabeledPair], List[LabeledPair]]:
    """Per-label split, so both halves keep the positive/negative ratio."""
    rng = np.random.default_rng(seed)
    train: List[LabeledPair] = []
    test: List[LabeledPair] = []
    for label in (1, 0):
        members = [p for p in pairs if p.label == label]
        order = rng.permutation(len(members))
        cut = int(round(train_fraction * len(members)))
        train += [members[i] for i in order[:cut]]
        test += [members[i] for i in order[cut:]]
    return train, test


def split_identities(gallery: GalleryVectors, train_fraction: float = 0.5,
                     seed: int = 0) -> Tuple[list, list]:
    """Disjoint-identity split of the gallery itself."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(gallery))
    cut = int(round(train_fraction * len(gallery)))
    return [gallery[i] for i in sorted(order[:cut])], [gallery[i] for i in sorted(order[cut:])]


def group_by_identity(labeled: Sequence[Tuple[str, FlatWeights]]) -> List[Tuple[str, List[FlatWeights]]]:
    grouped: Dict[str, List[FlatWeights]] = {}
    for identity, flat in labeled:
        grouped.setdefault(identity, []).append(flat)
    return sorted(grouped.items())


_RECORD_LABEL = "label"


def _record_dtype(hidden_count: int) -> np.dtype:
    size = 4 * hidden_count + 1
    return np.dtype([("a", "<f4", (size,)), ("b", "<f4", (size,)), (_RECORD_LABEL, "u1")])


def save_pairs(pairs: Sequence[LabeledPair], path: str) -> None:
    if not pairs:
        raise InfeasiblePairsError("siamese: refusing to write an empty pair file")
    hidden_count = pairs[0].a.hidden_count
    records = np.zeros(len(pairs), dtype=_record_dtype(hidden_count))
    for row, pair in enumerate(pairs):
        records[row] = (pair.a.values, pair.b.values, pair.label)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(PAIRS_MAGIC, PAIRS_FORMAT_VERSION, hidden_count, len(pairs), b"\x00\x00"))
        f.write(records.tobytes())


def load_pairs(path: str) -> List[LabeledPair]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise ModelFormatError(f"siamese: pair file not found: {path}") from None
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"siamese: {path} is truncated")
    magic, version, hidden_count, count, _ = _HEADER.unpack_from(data)
    if magic != PAIRS_MAGIC or version != PAIRS_FORMAT_VERSION:
        raise ModelFormatError(f"siamese: {path} is not a pair file of version {PAIRS_FORMAT_VERSION}")

    dtype = _record_dtype(hidden_count)
    payload = data[_HEADER.size:]
    if len(payload) != count * dtype.itemsize:
        raise ModelFormatError(f"siamese: {path} holds {len(payload)} bytes for {count} pairs")
    records = np.frombuffer(payload, dtype=dtype)
    return [
        LabeledPair(
            FlatWeights(r["a"].astype(np.float64), hidden_count),
            FlatWeights(r["b"].astype(np.float64), hidden_count),
            int(r[_RECORD_LABEL]),
        )
        for r in records
    ]
