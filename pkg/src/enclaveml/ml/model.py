"""Deterministic MLP: inference, backprop, SGD and federated averaging.

Every float reduction runs in a fixed sequential order (no BLAS, no
pairwise summation), so identical inputs give bit-identical outputs on any
path. Softmax goes through ``math.exp`` for the same reason.

Model file format (little-endian)::

    b"SMLM" | format:u32=1 | version:u64 | n_dims:u32 | dims:u32*n_dims |
    per layer: weights f32[in*out] (row-major, in x out) | bias f32[out]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyInput, ModelFormatError, ShapeMismatch

MODEL_MAGIC = b"SMLM"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sIQI")


@dataclass
class ModelArtifact:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.validate()

    def validate(self) -> None:
        dims = self.layer_dims
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ShapeMismatch(f"bad layer dims {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatch("layer count does not match dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ShapeMismatch(f"layer {i} shapes {w.shape}, {b.shape}")
            if w.dtype != np.float32 or b.dtype != np.float32:
                raise ShapeMismatch(f"layer {i} is not float32")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ShapeMismatch(f"layer {i} has non-finite values")

    @classmethod
    def init(cls, layer_dims, seed: int = 0) -> "ModelArtifact":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            ws.append((rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)).astype(np.float32))
            bs.append(np.zeros(fan_out, np.float32))
        return cls(tuple(layer_dims), ws, bs)

    @classmethod
    def zeros(cls, layer_dims) -> "ModelArtifact":
        return cls(tuple(layer_dims),
                   [np.zeros((a, b), np.float32) for a, b in zip(layer_dims[:-1], layer_dims[1:])],
                   [np.zeros(b, np.float32) for b in layer_dims[1:]])

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_params(cls, layer_dims, params, version: int = 0) -> "ModelArtifact":
        return cls(tuple(layer_dims), list(params[0::2]), list(params[1::2]), version)

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "ModelArtifact":
        return ModelArtifact.from_params(self.layer_dims, [p.copy() for p in self.params()], self.version)

    def same_as(self, other: "ModelArtifact") -> bool:
        """Bitwise equality of structure and parameters (version ignored)."""
        return self.layer_dims == other.layer_dims and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.params(), other.params()))

    def encode(self) -> bytes:
        parts = [_HEAD.pack(MODEL_MAGIC, FORMAT_VERSION, self.version, len(self.layer_dims)),
                 struct.pack(f"<{len(self.layer_dims)}I", *self.layer_dims)]
        parts += [p.astype("<f4", copy=False).tobytes() for p in self.params()]
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "ModelArtifact":
        if len(data) < _HEAD.size:
            raise ModelFormatError("short model header")
        magic, fmt, version, n = _HEAD.unpack_from(data)
        if magic != MODEL_MAGIC or fmt != FORMAT_VERSION:
            raise ModelFormatError("not a model file")
        if not 2 <= n <= 64 or len(data) < _HEAD.size + 4 * n:
            raise ModelFormatError("bad dims count")
        dims = struct.unpack_from(f"<{n}I", data, _HEAD.size)
        if any(d == 0 for d in dims):
            raise ModelFormatError("zero-width layer")
        expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        pos = _HEAD.size + 4 * n
        if len(data) - pos != 4 * expected:
            raise ModelFormatError(f"payload holds {len(data) - pos} bytes, expected {4 * expected}")
        flat = np.frombuffer(data, dtype="<f4", offset=pos).astype(np.float32)
        params, off = [], 0
        for a, b in zip(dims[:-1], dims[1:]):
            params.append(flat[off:off + a * b].reshape(a, b))
            off += a * b
            params.append(flat[off:off + b].copy())
            off += b
        try:
            return cls.from_params(dims, params, version)
        except ShapeMismatch as exc:
            raise ModelFormatError(str(exc)) from None


def seq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` in float32, accumulating over the inner index left to right."""
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"{a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), np.float32)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k]
    return out


def seq_sum_rows(a: np.ndarray) -> np.ndarray:
    """Column sums accumulated row by row."""
    out = np.zeros(a.shape[1], a.dtype)
    for row in a:
        out += row
    return out


def _forward(model: ModelArtifact, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = seq_matmul(h, w) + b
        pre.append(z)
        h = np.maximum(z, np.float32(0)) if i < last else z
        acts.append(h)
    return pre, acts


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64 with scalar libm exp and sequential sums."""
    z = logits.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.array([math.exp(v) for v in shifted.ravel()]).reshape(shifted.shape)
    total = e[:, 0].copy()
    for c in range(1, e.shape[1]):
        total += e[:, c]
    return e / total[:, None]


def _as_batch(model: ModelArtifact, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise ShapeMismatch(f"input shape {x.shape} for input width {model.layer_dims[0]}")
    return x


def infer_batch(model: ModelArtifact, x) -> tuple[np.ndarray, np.ndarray]:
    x = _as_batch(model, x)
    _, acts = _forward(model, x)
    probs = softmax(acts[-1])
    return probs, probs.argmax(axis=1)


def infer(model: ModelArtifact, x) -> tuple[np.ndarray, int]:
    """Class probabilities and argmax label for one input vector."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 1:
        raise ShapeMismatch("infer takes a single vector; use infer_batch")
    probs, labels = infer_batch(model, x)
    return probs[0], int(labels[0])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    learning_rate: float = 0.0005
    steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.steps < 1:
            raise ValueError("invalid training config")


@dataclass
class GradientUpdate:
    grads: list[np.ndarray]
    sample_count: int
    loss: float
    worker_id: int = 0
    step: int = 0

    def encode(self) -> bytes:
        head = struct.pack("<QQQd", self.worker_id, self.step, self.sample_count, self.loss)
        return head + b"".join(g.astype("<f4", copy=False).tobytes() for g in self.grads)

    @classmethod
    def decode(cls, data: bytes, layer_dims) -> "GradientUpdate":
        shapes = []
        for a, b in zip(layer_dims[:-1], layer_dims[1:]):
            shapes += [(a, b), (b,)]
        need = 32 + 4 * sum(math.prod(s) for s in shapes)
        if len(data) != need:
            raise ShapeMismatch(f"gradient payload {len(data)} bytes, expected {need}")
        wid, step, count, loss = struct.unpack_from("<QQQd", data)
        flat = np.frombuffer(data, dtype="<f4", offset=32).astype(np.float32)
        grads, off = [], 0
        for s in shapes:
            n = math.prod(s)
            grads.append(flat[off:off + n].reshape(s))
            off += n
        if not all(np.isfinite(g).all() for g in grads):
            raise ShapeMismatch("non-finite gradient")
        return cls(grads, count, loss, wid, step)


def loss_and_grads(model: ModelArtifact, x, labels) -> tuple[float, list[np.ndarray]]:
    x = _as_batch(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    classes = model.layer_dims[-1]
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= classes:
        raise ShapeMismatch("labels do not match batch")
    pre, acts = _forward(model, x)
    logits = acts[-1].astype(np.float64)
    # log-sum-exp form: exact ln(classes) for all-equal logits
    m = logits.max(axis=1)
    shifted = logits - m[:, None]
    e = np.array([math.exp(v) for v in shifted.ravel()]).reshape(shifted.shape)
    total = e[:, 0].copy()
    for c in range(1, classes):
        total += e[:, c]
    per_sample = [math.log(total[i]) - shifted[i, labels[i]] for i in range(n)]
    # mean taken relative to the first sample so equal losses come back exactly
    base = per_sample[0]
    loss = base + math.fsum(v - base for v in per_sample) / n
    probs = e / total[:, None]
    probs[np.arange(n), labels] -= 1.0
    dz = (probs / n).astype(np.float32)

    grads: list[np.ndarray] = [None] * (2 * len(model.weights))
    for i in range(len(model.weights) - 1, -1, -1):
        grads[2 * i] = seq_matmul(acts[i].T.copy(), dz)
        grads[2 * i + 1] = seq_sum_rows(dz)
        if i:
            da = seq_matmul(dz, model.weights[i].T.copy())
            dz = da * (pre[i - 1] > 0).astype(np.float32)
    return loss, grads


def train_step(model: ModelArtifact, x, labels, cfg: TrainConfig | None = None,
               worker_id: int = 0, step: int = 0) -> GradientUpdate:
    if cfg is not None and len(x) > cfg.batch_size:
        raise ShapeMismatch(f"batch of {len(x)} exceeds batch size {cfg.batch_size}")
    loss, grads = loss_and_grads(model, x, labels)
    return GradientUpdate(grads, len(x), loss, worker_id, step)


def average_gradients(updates: list[GradientUpdate]) -> list[np.ndarray]:
    """Sample-weighted mean; float64 accumulation in list order."""
    if not updates:
        raise EmptyInput("no gradient updates")
    total = sum(u.sample_count for u in updates)
    out = []
    for j in range(len(updates[0].grads)):
        acc = np.zeros(updates[0].grads[j].shape, np.float64)
        for u in updates:
            acc += u.grads[j].astype(np.float64) * u.sample_count
        out.append((acc / total).astype(np.float32))
    return out


def apply_gradients(model: ModelArtifact, grads: list[np.ndarray], lr: float) -> ModelArtifact:
    step = np.float32(lr)
    params = [p - step * g for p, g in zip(model.params(), grads)]
    return ModelArtifact.from_params(model.layer_dims, params, model.version + 1)


def sgd_step(model: ModelArtifact, x, labels, cfg: TrainConfig) -> tuple[ModelArtifact, float]:
    upd = train_step(model, x, labels, cfg)
    return apply_gradients(model, average_gradients([upd]), cfg.learning_rate), upd.loss


def federated_average(models: list[ModelArtifact], weights: list[float] | None = None) -> ModelArtifact:
    if not models:
        raise EmptyInput("no models to average")
    dims = models[0].layer_dims
    if any(m.layer_dims != dims for m in models):
        raise ShapeMismatch("models have different layer dims")
    if weights is None:
        weights = [1] * len(models)
    if len(weights) != len(models) or any(w <= 0 for w in weights):
        raise ValueError("weights must be positive, one per model")
    total = float(sum(weights))
    params = []
    for j in range(len(models[0].params())):
        acc = np.zeros(models[0].params()[j].shape, np.float64)
        for m, w in zip(models, weights):
            acc += m.params()[j].astype(np.float64) * w
        params.append((acc / total).astype(np.float32))
    return ModelArtifact.from_params(dims, params, max(m.version for m in models) + 1)
