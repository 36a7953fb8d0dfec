"""
Gallery: enrolled identities and their face models on disk.

    <gallery>/index.tsv            one record per model
    <gallery>/<identity>/NNNN.nf3d model files

Model files and the index are written to a temporary name and renamed into
place, so a crash leaves either the old or the new gallery, never a torn one.
Enrollment holds an exclusive lock file; matching only reads.
"""

import logging
import os
import re
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import DimensionMismatchError, GalleryError
from .face_model import FaceModel, deserialize, flatten, to_bytes
from .siamese import SiameseNet, embed, embed_batch

logger = logging.getLogger(__name__)

INDEX_FILE = "index.tsv"
LOCK_FILE = ".lock"
MODEL_SUFFIX = ".nf3d"
INDEX_COLUMNS = ["identity", "path", "timestamp", "point_count", "final_mse", "hidden_count", "source_hash"]
NUMERIC_COLUMNS = ["point_count", "final_mse", "hidden_count"]
RESERVED_NAMES = {INDEX_FILE, LOCK_FILE}

_IDENTITY_PATTERN = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.\-]*$")


@dataclass(frozen=True)
class EnrollmentMeta:
    point_count: int = 0
    final_mse: float = float("nan")
    source_hash: str = ""
    timestamp: str = ""


@dataclass(frozen=True)
class GalleryEntry:
    identity: str
    model_paths: Tuple[str, ...]
    enrollment_metadata: Tuple[EnrollmentMeta, ...]


@dataclass(frozen=True)
class MatchResult:
    identity: str
    score: float


def is_valid_identity(identity: str) -> bool:
    # Labels become directory names beside the index and temporary files.
    if not _IDENTITY_PATTERN.match(identity or ""):
        return False
    return identity not in RESERVED_NAMES and not identity.endswith(".tmp")


def _atomic_write(path: str, data: bytes) -> None:
    temporary = path + ".tmp"
    with open(temporary, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(temporary, path)


class Gallery:
    def __init__(self, gallery_dir: str):
        self.gallery_dir = gallery_dir

    @property
    def index_path(self) -> str:
        return os.path.join(self.gallery_dir, INDEX_FILE)

    def read_index(self) -> pd.DataFrame:
        if not os.path.exists(self.index_path):
            return pd.DataFrame(columns=INDEX_COLUMNS)
        index = pd.read_csv(
            self.index_path,
            sep="\t",
            dtype={"identity": str, "path": str, "timestamp": str, "source_hash": str},
            keep_default_na=False,
        )
        for column in NUMERIC_COLUMNS:
            index[column] = pd.to_numeric(index[column].replace("", "nan"), errors="coerce")
        return index

    def _write_index(self, index: pd.DataFrame) -> None:
        _atomic_write(self.index_path, index.to_csv(sep="\t", index=False, na_rep="nan").encode("utf-8"))

    @contextmanager
    def _lock(self):
        lock_path = os.path.join(self.gallery_dir, LOCK_FILE)
        try:
            descriptor = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise GalleryError(
                f"gallery: {self.gallery_dir} is locked by another writer ({lock_path})"
            ) from None
        try:
            yield
        finally:
            os.close(descriptor)
            os.remove(lock_path)

    def hidden_count(self) -> Optional[int]:
        index = self.read_index()
        if index.empty:
            return None
        return int(index["hidden_count"].iloc[0])

    def enroll(self, identity: str, model: FaceModel,
               meta: Optional[EnrollmentMeta] = None) -> GalleryEntry:
        if not is_valid_identity(identity):
            raise GalleryError(f"gallery: invalid identity label {identity!r}")
        meta = meta or EnrollmentMeta()
        os.makedirs(self.gallery_dir, exist_ok=True)

        with self._lock():
            index = self.read_index()
            if not index.empty:
                gallery_m = int(index["hidden_count"].iloc[0])
                if model.hidden_count != gallery_m:
                    raise GalleryError(
                        f"gallery: model has M={model.hidden_count}, gallery holds M={gallery_m}"
                    )
                if meta.source_hash:
                    clash = index[index["source_hash"] == meta.source_hash]
                    if not clash.empty:
                        raise GalleryError(
                            f"gallery: source already enrolled as {clash['identity'].iloc[0]!r}"
                        )

            identity_dir = os.path.join(self.gallery_dir, identity)
            os.makedirs(identity_dir, exist_ok=True)
            existing = index[index["identity"] == identity]
            relative = f"{identity}/{len(existing):04d}{MODEL_SUFFIX}"
            _atomic_write(os.path.join(self.gallery_dir, relative), to_bytes(model))

            record = {
                "identity": identity,
                "path": relative,
                "timestamp": meta.timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "point_count": int(meta.point_count),
                "final_mse": float(meta.final_mse),
                "hidden_count": model.hidden_count,
                "source_hash": meta.source_hash,
            }
            index = pd.concat([index, pd.DataFrame([record])], ignore_index=True)
            self._write_index(index[INDEX_COLUMNS])

        logger.info("Enrolled %s as %s", relative, identity)
        return self.entry(identity)

    def _meta(self, row) -> EnrollmentMeta:
        return EnrollmentMeta(
            point_count=int(row["point_count"]),
            final_mse=float(row["final_mse"]),
            source_hash=str(row["source_hash"]),
            timestamp=str(row["timestamp"]),
        )

    def entry(self, identity: str) -> GalleryEntry:
        rows = self.read_index()
        rows = rows[rows["identity"] == identity]
        if rows.empty:
            raise GalleryError(f"gallery: no identity {identity!r}")
        return GalleryEntry(
            identity,
            tuple(rows["path"]),
            tuple(self._meta(row) for _, row in rows.iterrows()),
        )

    def entries(self) -> List[GalleryEntry]:
        index = self.read_index()
        return [self.entry(identity) for identity in sorted(index["identity"].unique())]

    def load_models(self) -> Dict[str, List[FaceModel]]:
        models: Dict[str, List[FaceModel]] = {}
        for _, row in self.read_index().iterrows():
            path = os.path.join(self.gallery_dir, row["path"])
            models.setdefault(row["identity"], []).append(deserialize(path))
        return models

    def match_probe(self, probe: FaceModel, net: SiameseNet, top_k: int = 5) -> List[MatchResult]:
        """
        Identities ranked by their best (lowest) energy against the probe;
        ties are broken by identity label.
        """
        models = self.load_models()
        if not models:
            raise GalleryError(f"gallery: {self.gallery_dir} has no enrolled models")
        if net.input_size != probe.parameter_count:
            raise DimensionMismatchError(
                f"gallery: probe has {probe.parameter_count} weights, network expects {net.input_size}"
            )

        probe_embedding = embed(net, flatten(probe))
        results = []
        for identity, identity_models in models.items():
            stacked = np.stack([flatten(m).values for m in identity_models])
            if stacked.shape[1] != net.input_size:
                raise DimensionMismatchError(
                    f"gallery: {identity} models have {stacked.shape[1]} weights, "
                    f"network expects {net.input_size}"
                )
            energies = np.linalg.norm(embed_batch(net, stacked) - probe_embedding, axis=1)
            results.append(MatchResult(identity, float(energies.min())))

        results.sort(key=lambda r: (r.score, r.identity))
        return results[:max(top_k, 0)]
