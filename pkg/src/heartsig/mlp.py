"""Multi-layer perceptron trained with back-propagation.

Sigmoid hidden layers, softmax output, mean cross-entropy loss, mini-batch
gradient descent with momentum. Signatures have at most 64 nonzeros out of
6724 inputs, so the first-layer product is computed from the nonzeros only.

Parameters produced by :func:`init`, :func:`train` and :func:`load` are
always representable in float32, which keeps save/load bit-exact.
"""

from __future__ import annotations

import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from heartsig.errors import ConfigError, DataError, FormatError, ShapeError
from heartsig.signature import SparseSignature

log = logging.getLogger(__name__)


@dataclass
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    hidden_dims: tuple[int, ...] = (256,)

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def init(layer_dims: Sequence[int], seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid layer dims {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(_f32(rng.uniform(-limit, limit, size=(fan_out, fan_in))))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases)


# -- inputs -----------------------------------------------------------------------

def as_batch(x, n_inputs: int):
    """Normalise inputs to a dense 2-D array or a CSR matrix with ``n_inputs`` columns."""
    if isinstance(x, SparseSignature):
        x = [x]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], SparseSignature):
        return signatures_to_csr(x, n_inputs)
    if sp.issparse(x):
        x = sp.csr_matrix(x)
        if x.shape[1] != n_inputs:
            raise ShapeError(f"expected {n_inputs} inputs, got {x.shape[1]}")
        return x
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != n_inputs:
        raise ShapeError(f"expected {n_inputs} inputs, got shape {np.shape(x)}")
    return a


def signatures_to_csr(sigs: Sequence[SparseSignature], n_inputs: int | None = None) -> sp.csr_matrix:
    n_inputs = n_inputs or sigs[0].grid ** 2
    indptr = np.zeros(len(sigs) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([s.nnz for s in sigs])
    idx = np.concatenate([s.flat_index for s in sigs]) if sigs else np.zeros(0, np.int64)
    val = np.concatenate([s.values.astype(np.float64) for s in sigs]) if sigs else np.zeros(0)
    if idx.size and idx.max() >= n_inputs:
        raise ShapeError(f"signature index {idx.max()} exceeds input size {n_inputs}")
    return sp.csr_matrix((val, idx, indptr), shape=(len(sigs), n_inputs))


def _first_layer(w: np.ndarray, b: np.ndarray, x) -> np.ndarray:
    if sp.issparse(x):
        # gather only the columns hit by nonzeros, then sum per row
        cols = w[:, x.indices] * x.data
        rows = sp.csr_matrix((np.ones(x.indices.size), np.arange(x.indices.size), x.indptr),
                             shape=(x.shape[0], x.indices.size))
        return np.asarray(rows @ cols.T) + b
    return x @ w.T + b


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_all(model: MlpModel, x) -> list[np.ndarray]:
    acts = [x]
    n = len(model.weights)
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = _first_layer(w, b, x) if k == 0 else acts[-1] @ w.T + b
        acts.append(_softmax(z) if k == n - 1 else expit(z))
    return acts


def _is_single(x) -> bool:
    if isinstance(x, SparseSignature):
        return True
    if sp.issparse(x) or (isinstance(x, (list, tuple)) and x and isinstance(x[0], SparseSignature)):
        return False
    return np.ndim(x) == 1


def forward(model: MlpModel, x) -> np.ndarray:
    """Class probabilities; a single input gives a 1-D vector."""
    probs = _forward_all(model, as_batch(x, model.n_inputs))[-1]
    return probs[0] if _is_single(x) else probs


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.zeros((labels.size, n_classes))
    y[np.arange(labels.size), labels] = 1.0
    return y


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    return labels


def loss(model: MlpModel, x, labels) -> float:
    """Mean cross-entropy."""
    labels = _check_labels(labels, model.n_classes)
    p = _forward_all(model, as_batch(x, model.n_inputs))[-1]
    return float(-np.mean(np.log(np.maximum(p[np.arange(labels.size), labels], 1e-300))))


def gradients(model: MlpModel, x, targets) -> tuple[list[np.ndarray], list[np.ndarray], float]:
    """Gradients of the mean cross-entropy over a batch.

    ``targets`` is either an integer label vector or a one-hot matrix.
    Returns (weight gradients, bias gradients, loss).
    """
    if isinstance(x, (list, tuple)) and not x:
        raise ConfigError("empty batch")
    x = as_batch(x, model.n_inputs)
    batch = x.shape[0]
    if batch == 0:
        raise ConfigError("empty batch")
    targets = np.asarray(targets)
    if targets.ndim == 1:
        y = _one_hot(_check_labels(targets, model.n_classes), model.n_classes)
    else:
        y = targets.astype(np.float64)
        if y.shape != (batch, model.n_classes):
            raise ShapeError(f"targets must have shape {(batch, model.n_classes)}")
    acts = _forward_all(model, x)
    p = acts[-1]
    ce = float(-np.mean(np.sum(y * np.log(np.maximum(p, 1e-300)), axis=1)))

    gw: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * len(model.weights)  # type: ignore[list-item]
    delta = (p - y) / batch
    for k in range(len(model.weights) - 1, -1, -1):
        a_in = acts[k]
        if sp.issparse(a_in):
            gw[k] = np.asarray((a_in.T @ delta).T)
        else:
            gw[k] = delta.T @ a_in
        gb[k] = delta.sum(axis=0)
        if k:
            h = acts[k]
            delta = (delta @ model.weights[k]) * h * (1.0 - h)
    return gw, gb, ce


def train(model: MlpModel, signatures, labels, config: TrainConfig,
          progress=None) -> tuple[MlpModel, TrainReport]:
    """Mini-batch SGD with momentum; returns a new model and per-epoch stats."""
    labels = _check_labels(labels, model.n_classes)
    if not (sp.issparse(signatures) or isinstance(signatures, np.ndarray)):
        signatures = list(signatures)
    x = as_batch(signatures, model.n_inputs)
    if x.shape[0] != labels.size:
        raise DataError("signature and label counts differ")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    report = TrainReport()
    n = labels.size
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        order = rng.permutation(n)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            xb = x[idx]
            gw, gb, ce = gradients(model, xb, labels[idx])
            total_loss += ce * idx.size
            for k in range(len(model.weights)):
                vel_w[k] *= config.momentum
                vel_w[k] -= config.learning_rate * gw[k]
                model.weights[k] += vel_w[k]
                vel_b[k] *= config.momentum
                vel_b[k] -= config.learning_rate * gb[k]
                model.biases[k] += vel_b[k]
        probs = _forward_all(model, x)[-1]
        correct = int(np.sum(np.argmax(probs, axis=1) == labels))
        report.loss.append(total_loss / max(n, 1))
        report.accuracy.append(correct / max(n, 1))
        report.seconds.append(time.monotonic() - t0)
        if progress is not None:
            progress(epoch, report)
        log.debug("epoch %d loss %.4f acc %.4f", epoch, report.loss[-1], report.accuracy[-1])
    model.weights = [_f32(w) for w in model.weights]
    model.biases = [_f32(b) for b in model.biases]
    return model, report


def _forward_signature(model: MlpModel, sig: SparseSignature) -> np.ndarray:
    # single-beat path for online use: touches only the columns of the nonzeros
    h = model.weights[0][:, sig.flat_index] @ sig.values.astype(np.float64) + model.biases[0]
    n = len(model.weights)
    if n == 1:
        return _softmax(h[None, :])[0]
    h = expit(h)
    for k in range(1, n):
        z = model.weights[k] @ h + model.biases[k]
        h = _softmax(z[None, :])[0] if k == n - 1 else expit(z)
    return h


def predict(model: MlpModel, signature) -> tuple[int, float]:
    """Most probable class (lowest id on ties) and its probability."""
    if isinstance(signature, SparseSignature):
        if signature.grid ** 2 != model.n_inputs:
            raise ShapeError(f"expected {model.n_inputs} inputs, got {signature.grid ** 2}")
        p = _forward_signature(model, signature)
    else:
        p = forward(model, signature)
    if p.ndim != 1:
        raise ShapeError("predict takes a single input; use predict_batch")
    k = int(np.argmax(p))
    return k, float(p[k])


def predict_batch(model: MlpModel, x) -> tuple[np.ndarray, np.ndarray]:
    p = _forward_all(model, as_batch(x, model.n_inputs))[-1]
    k = np.argmax(p, axis=1)
    return k, p[np.arange(k.size), k]


# -- persistence ------------------------------------------------------------------

MAGIC = b"ECGM"
VERSION = 1


def dumps(model: MlpModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", VERSION, len(model.layer_dims)))
    buf.write(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
    for w, b in zip(model.weights, model.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> MlpModel:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    version, n_dims = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    off = 8
    if len(data) < off + 4 * n_dims or n_dims < 2:
        raise FormatError("model file truncated in layer table")
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid layer dims {dims}")
    expected = off + 4 * sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
    if len(data) != expected:
        raise FormatError(f"model file has {len(data)} bytes, expected {expected}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=off)
        off += 4 * w.size
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
        off += 4 * b.size
        weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    return MlpModel(tuple(dims), weights, biases)


def save(model: MlpModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> MlpModel:
    return loads(Path(path).read_bytes())
