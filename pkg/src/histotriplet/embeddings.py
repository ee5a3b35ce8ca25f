"""Embedding matrix container and its on-disk format.

Binary layout: 16-byte header (magic "EMBM", u32 version, u32 n_rows,
u32 dim, little-endian) followed by row-major float32 values. Item ids
and class labels travel in a line-delimited sidecar next to the binary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RecordValidationError
from .manifests import read_jsonl

MAGIC = b"EMBM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class EmbeddingMatrix:
    """N embedding rows with aligned item ids and labels."""

    vectors: np.ndarray  # (N, D) float32
    item_ids: list
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise RecordValidationError("vectors must be a 2-D array")
        n = self.vectors.shape[0]
        if len(self.item_ids) != n:
            raise RecordValidationError("item_ids must align with vector rows")
        if self.labels and len(self.labels) != n:
            raise RecordValidationError("labels must align with vector rows")
        if n and not np.isfinite(self.vectors).all():
            raise RecordValidationError("vectors must be finite")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def labels_sidecar_path(path) -> Path:
    return Path(str(path) + ".labels")


def save_embeddings(path, matrix: EmbeddingMatrix) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, dim = matrix.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, dim))
        fh.write(np.ascontiguousarray(matrix.vectors, dtype="<f4").tobytes())
    labels = matrix.labels if matrix.labels else [""] * n
    with open(labels_sidecar_path(path), "w", encoding="utf-8") as fh:
        for item_id, label in zip(matrix.item_ids, labels):
            fh.write(json.dumps({"item_id": item_id, "label": label}, sort_keys=True))
            fh.write("\n")
    return path


def load_embeddings(path) -> EmbeddingMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise RecordValidationError(f"{path}: truncated header")
        magic, version, n, dim = _HEADER.unpack(header)
        if magic != MAGIC:
            raise RecordValidationError(f"{path}: not an embedding file")
        if version != FORMAT_VERSION:
            raise RecordValidationError(
                f"{path}: unsupported format version {version}"
            )
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * dim:
        raise RecordValidationError(
            f"{path}: expected {n * dim} values, found {data.size}"
        )
    vectors = data.reshape(n, dim).copy()

    item_ids, labels = [], []
    sidecar = labels_sidecar_path(path)
    if sidecar.exists():
        for _, obj in read_jsonl(sidecar):
            item_ids.append(obj["item_id"])
            labels.append(obj.get("label", ""))
        if len(item_ids) != n:
            raise RecordValidationError(
                f"{sidecar}: {len(item_ids)} label rows for {n} vectors"
            )
    else:
        item_ids = [str(i) for i in range(n)]
        labels = [""] * n
    return EmbeddingMatrix(vectors=vectors, item_ids=item_ids, labels=labels)
