"""Dataset shards and synthetic data.

Shard file format (little-endian)::

    b"SMLD" | shard_id:u32 | n:u32 | d:u32 | inputs f32[n*d] | labels u32[n]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import ModelFormatError, ShapeMismatch

DATA_MAGIC = b"SMLD"
_HEAD = struct.Struct("<4sIII")


@dataclass
class DatasetShard:
    inputs: np.ndarray
    labels: np.ndarray
    shard_id: int = 0

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) < 1 or self.labels.shape != (len(self.inputs),):
            raise ShapeMismatch("shard needs N>=1 rows and one label per row")

    def __len__(self) -> int:
        return len(self.inputs)

    def batch(self, index: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Batch ``index`` of an endless cyclic pass over the shard."""
        n = len(self)
        rows = (index * batch_size + np.arange(min(batch_size, n))) % n
        return self.inputs[rows], self.labels[rows]

    def split(self, parts: int) -> list["DatasetShard"]:
        idx = np.array_split(np.arange(len(self)), parts)
        return [DatasetShard(self.inputs[i], self.labels[i], k) for k, i in enumerate(idx)]

    def encode(self) -> bytes:
        n, d = self.inputs.shape
        return (_HEAD.pack(DATA_MAGIC, self.shard_id, n, d)
                + self.inputs.astype("<f4").tobytes() + self.labels.astype("<u4").tobytes())

    @classmethod
    def decode(cls, data: bytes) -> "DatasetShard":
        if len(data) < _HEAD.size:
            raise ModelFormatError("short shard header")
        magic, sid, n, d = _HEAD.unpack_from(data)
        if magic != DATA_MAGIC or n < 1 or d < 1:
            raise ModelFormatError("not a dataset shard")
        if len(data) != _HEAD.size + 4 * n * d + 4 * n:
            raise ModelFormatError("shard payload size mismatch")
        x = np.frombuffer(data, "<f4", n * d, _HEAD.size).reshape(n, d)
        y = np.frombuffer(data, "<u4", n, _HEAD.size + 4 * n * d)
        return cls(x.astype(np.float32), y.astype(np.int64), sid)


def separable(n: int = 200, d: int = 2, seed: int = 0, margin: float = 1.0) -> DatasetShard:
    """Two classes on either side of a random hyperplane, at least ``margin`` away."""
    rng = np.random.default_rng(seed)
    normal = rng.standard_normal(d)
    normal /= np.linalg.norm(normal)
    x = rng.standard_normal((n, d)) * 2.0
    side = x @ normal
    labels = (side > 0).astype(np.int64)
    x += np.outer(np.where(labels == 1, margin, -margin), normal)
    return DatasetShard(x.astype(np.float32), labels)


def blobs(n: int, d: int, classes: int, seed: int = 0, spread: float = 1.0) -> DatasetShard:
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, d)) * 3.0
    labels = rng.integers(0, classes, n)
    x = centers[labels] + rng.standard_normal((n, d)) * spread
    return DatasetShard(x.astype(np.float32), labels)
