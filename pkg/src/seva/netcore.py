"""Small dense-network kernel: explicit forward/backward, losses, SGD and a
finite-difference gradient checker.

Arrays are batch-first (``N x D``); weights are stored ``out x in``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "linear", "sigmoid")
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}

CHECKPOINT_MAGIC = b"SEVA"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Input or parameter shapes do not chain."""


class NumericError(ArithmeticError):
    """A loss or activation became non-finite."""


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACT_CODES:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class NetParams:
    """Ordered dense layers plus same-shaped gradient accumulators."""

    layers: list[Layer]
    grads: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        for k in range(1, len(self.layers)):
            if self.layers[k - 1].out_dim != self.layers[k].in_dim:
                raise DimensionError(
                    f"layer {k - 1} outputs {self.layers[k - 1].out_dim} dims "
                    f"but layer {k} expects {self.layers[k].in_dim}")
        if not self.grads:
            self.zero_grad()

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def zero_grad(self) -> None:
        self.grads = [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out

    def grad_arrays(self) -> list[np.ndarray]:
        out = []
        for gw, gb in self.grads:
            out += [gw, gb]
        return out

    def copy(self) -> "NetParams":
        return NetParams([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                          for l in self.layers])

    def __len__(self) -> int:
        return len(self.layers)


def init_params(dims: Sequence[int], activations: Sequence[str] | str,
                rng: np.random.Generator, dtype=np.float64) -> NetParams:
    """Glorot-uniform weights, zero biases. ``dims`` = [in, h1, ..., out]."""
    if isinstance(activations, str):
        activations = [activations] * (len(dims) - 1)
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)
        layers.append(Layer(w, np.zeros(fan_out, dtype=dtype), act))
    return NetParams(layers)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return sigmoid(z)
    return z


def sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


@dataclass
class Activations:
    """Per-layer inputs and outputs of a forward pass over ``layers[start:stop]``."""

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]
    start: int
    squeeze: bool = False
    source: np.ndarray | None = None  # the input, returned when no layer ran

    @property
    def output(self) -> np.ndarray:
        out = self.outputs[-1] if self.outputs else self.source
        return out[0] if self.squeeze else out


def forward(params: NetParams, x: np.ndarray, start: int = 0,
            stop: int | None = None) -> Activations:
    """Run layers ``start..stop-1``; keeps every intermediate activation."""
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    stop = len(params.layers) if stop is None else stop
    inputs, outputs = [], []
    h = x
    for k in range(start, stop):
        layer = params.layers[k]
        if h.shape[1] != layer.in_dim:
            raise DimensionError(
                f"layer {k} expects {layer.in_dim} input dims, got {h.shape[1]}")
        inputs.append(h)
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        outputs.append(h)
    return Activations(inputs, outputs, start, squeeze, x)


def backward(params: NetParams, acts: Activations, grad_out: np.ndarray,
             need_input_grad: bool = True) -> np.ndarray | None:
    """Accumulate parameter gradients into ``params.grads``; return d/d(input)."""
    g = np.asarray(grad_out)
    if g.ndim == 1:
        g = g[None, :]
    for i in range(len(acts.outputs) - 1, -1, -1):
        k = acts.start + i
        layer = params.layers[k]
        out = acts.outputs[i]
        if layer.activation == "relu":
            g = g * (out > 0)
        elif layer.activation == "sigmoid":
            g = g * out * (1.0 - out)
        gw, gb = params.grads[k]
        gw += g.T @ acts.inputs[i]
        gb += g.sum(axis=0)
        if i > 0 or need_input_grad:
            g = g @ layer.weight
    if not need_input_grad:
        return None
    return g[0] if acts.squeeze else g


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_ce(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Cross entropy of softmax(logits) against a class index or distribution.

    For a batch (``N x C`` logits) the loss is the mean over rows and the
    gradient is scaled by ``1/N`` accordingly. ``target`` may be an int, an
    int array of length N, or probability rows.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    n, c = z.shape
    target = np.asarray(target)
    if target.dtype.kind in "iu":
        t = np.zeros_like(z)
        t[np.arange(n), target.reshape(n)] = 1.0
    else:
        t = target.reshape(n, c).astype(z.dtype, copy=False)
        if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("probability targets must sum to 1")
    logp = log_softmax(z)
    loss = float(-(t * logp).sum() / n)
    grad = (np.exp(logp) - t) / n
    return loss, (grad[0] if single else grad)


@dataclass
class LossValue:
    scalar: float
    per_head: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)


def interpolate_losses(weights: Mapping[str, float],
                       components: Mapping[str, float]) -> LossValue:
    """Weighted sum of named loss components, no renormalisation."""
    total = 0.0
    used = {}
    for name, w in weights.items():
        if name not in components:
            if w != 0:
                raise KeyError(f"loss head {name!r} has weight {w} but no value")
            continue
        total += w * components[name]
        used[name] = w
    return LossValue(float(total), dict(components), used)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    loss_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.loss_weights:
            if any(w < 0 for w in self.loss_weights.values()):
                raise ValueError("loss weights must be >= 0")
            if sum(self.loss_weights.values()) <= 0:
                raise ValueError("loss weights must not all be zero")


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
    """In-place ``p -= lr * g``."""
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} != grad shape {g.shape}")
        p -= lr * g


def sgd_update(net: NetParams, lr: float) -> None:
    sgd_step(net.arrays(), net.grad_arrays(), lr)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tolerance: float
    worst: tuple[int, tuple] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(loss_fn: Callable[[], tuple[float, Sequence[np.ndarray]]],
                    params: Sequence[np.ndarray], tolerance: float = 1e-4,
                    n_coords: int = 100, h: float = 1e-5, seed: int = 0,
                    floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` reads ``params`` (perturbed in place here) and returns
    ``(loss, grads)`` with ``grads`` aligned to ``params``. Coordinates are a
    seeded uniform sample over all parameter entries (all of them if fewer
    than ``n_coords``).
    """
    _, grads = loss_fn()
    grads = [np.array(g, dtype=float, copy=True) for g in grads]
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = (np.arange(total) if total <= n_coords
            else rng.choice(total, size=n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst_err, worst = 0.0, None
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = np.unravel_index(int(f - offsets[i]), params[i].shape)
        p = params[i]
        orig = p[idx]
        p[idx] = orig + h
        lp = loss_fn()[0]
        p[idx] = orig - h
        lm = loss_fn()[0]
        p[idx] = orig
        num = (lp - lm) / (2 * h)
        ana = grads[i][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        if err > worst_err or worst is None:
            worst_err, worst = err, (i, idx)
    return GradCheckReport(float(worst_err), len(flat), tolerance, worst)


# -- checkpoint I/O ----------------------------------------------------------

def write_params(fh: BinaryIO, params: NetParams) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.layers)))
    for layer in params.layers:
        fh.write(struct.pack("<III", layer.out_dim, layer.in_dim, _ACT_CODES[layer.activation]))
        fh.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError("truncated checkpoint")
    return buf


def read_params(fh: BinaryIO) -> NetParams:
    if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise ValueError("not a SEVA checkpoint")
    version, n_layers = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    layers = []
    for _ in range(n_layers):
        out_dim, in_dim, code = struct.unpack("<III", _read_exact(fh, 12))
        w = np.frombuffer(_read_exact(fh, 8 * out_dim * in_dim), dtype="<f8")
        b = np.frombuffer(_read_exact(fh, 8 * out_dim), dtype="<f8")
        layers.append(Layer(w.reshape(out_dim, in_dim).astype(np.float64),
                            b.astype(np.float64), ACTIVATIONS[code]))
    return NetParams(layers)


def save_params(path, params: NetParams) -> None:
    with open(path, "wb") as fh:
        write_params(fh, params)


def load_params(path) -> NetParams:
    with open(path, "rb") as fh:
        return read_params(fh)
