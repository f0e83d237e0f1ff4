"""
Small dense networks with hand-written forward/backward passes.

Inputs are single vectors of shape ``(in,)`` or row batches ``(N, in)``.
Parameter gradients from :func:`backward` are summed over the batch.

Checkpoint format (all integers little-endian uint32, floats little-endian
float64)::

    b"CSNN" | version=1 | n_layers
    n_layers x (out_dim, in_dim, activation_code)      activation: 0=tanh, 1=identity
    n_layers x (weight[out_dim, in_dim] row-major, bias[out_dim])
    n_extra | n_extra x (rows, cols, data[rows, cols] row-major)

The trailing ``extra`` arrays hold auxiliary tables (e.g. token embeddings).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, TrainingDivergence

MAGIC = b"CSNN"
VERSION = 1
_ACT_CODES = {"tanh": 0, "identity": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "tanh"


@dataclass
class ModelParams:
    layers: list[Layer]

    @classmethod
    def init(cls, dims, rng: np.random.Generator, activations=None) -> "ModelParams":
        """Xavier-uniform weights, zero biases; tanh everywhere except an identity output layer."""
        dims = list(dims)
        n = len(dims) - 1
        if activations is None:
            activations = ["tanh"] * (n - 1) + ["identity"]
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class GradientBundle:
    param_grads: list[np.ndarray]
    input_grad: np.ndarray
    extra: dict = field(default_factory=dict)


def _activate(z, act):
    if act == "tanh":
        return np.tanh(z)
    if act == "identity":
        return z
    raise ValueError(f"unknown activation {act!r}")


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.in_dim:
        raise ValueError(f"input of shape {x.shape} does not match first layer width {params.in_dim}")
    return x2, single


def _forward_cache(params: ModelParams, x2: np.ndarray):
    acts = [x2]
    h = x2
    for layer in params.layers:
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        acts.append(h)
    return acts


def forward(params: ModelParams, x) -> np.ndarray:
    x2, single = _as_batch(params, x)
    out = _forward_cache(params, x2)[-1]
    return out[0] if single else out


def backward(params: ModelParams, x, upstream) -> GradientBundle:
    """Reverse-mode gradients of ``<upstream, forward(x)>`` w.r.t. parameters and input."""
    x2, single = _as_batch(params, x)
    g = np.asarray(upstream, dtype=np.float64)
    g = g[None, :] if g.ndim == 1 else g
    if g.shape != (x2.shape[0], params.out_dim):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output")
    acts = _forward_cache(params, x2)
    grads = []
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        if layer.activation == "tanh":
            g = g * (1.0 - acts[i + 1] ** 2)
        grads.append(g.sum(axis=0))
        grads.append(g.T @ acts[i])
        g = g @ layer.weight
    grads.reverse()
    return GradientBundle(grads, g[0] if single else g)


def cross_entropy(logits, label):
    """
    Softmax cross-entropy and its gradient w.r.t. the logits.

    For a batch of logits, ``label`` is an integer array and the returned loss
    is the per-row vector.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(label))
    if np.any(y < 0) or np.any(y >= z2.shape[1]):
        raise ValueError(f"label out of range for {z2.shape[1]} classes")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    loss = log_norm - shifted[rows, y]
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float,
             momentum: float = 0.0, velocity: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """In-place momentum SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``. Returns the velocity."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr!r}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum!r}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence("non-finite gradient")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v
    return velocity


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def numeric_gradient(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_check(params: ModelParams, x, label, h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients of CE(forward(x), label)."""
    if not h > 0:
        raise ValueError("step must be positive")
    params = params.copy()
    x = np.array(x, dtype=np.float64)

    def loss():
        l, _ = cross_entropy(forward(params, x), label)
        return float(np.sum(l))

    _, g = cross_entropy(forward(params, x), label)
    bundle = backward(params, x, g)
    worst = 0.0
    for arr, analytic in zip(params.arrays(), bundle.param_grads):
        worst = max(worst, _rel_err(analytic, numeric_gradient(loss, arr, h)))
    worst = max(worst, _rel_err(bundle.input_grad, numeric_gradient(loss, x, h)))
    return worst


def save_params(params: ModelParams, path, extra=()) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params.layers))]
    for layer in params.layers:
        out_dim, in_dim = layer.weight.shape
        parts.append(struct.pack("<III", out_dim, in_dim, _ACT_CODES[layer.activation]))
    for layer in params.layers:
        parts.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(extra)))
    for arr in extra:
        arr = np.atleast_2d(arr)
        parts.append(struct.pack("<II", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> tuple[ModelParams, list[np.ndarray]]:
    """Read a checkpoint; returns the network and its extra arrays."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a network checkpoint")
    version, n_layers = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    shapes = []
    for _ in range(n_layers):
        shapes.append(struct.unpack_from("<III", buf, off))
        off += 12

    def take(count):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    layers = []
    for out_dim, in_dim, code in shapes:
        w = take(out_dim * in_dim).reshape(out_dim, in_dim)
        layers.append(Layer(w, take(out_dim), _ACT_NAMES[code]))
    (n_extra,) = struct.unpack_from("<I", buf, off)
    off += 4
    extra = []
    for _ in range(n_extra):
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        extra.append(take(rows * cols).reshape(rows, cols))
    return ModelParams(layers), extra
