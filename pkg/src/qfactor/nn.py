"""Dense feed-forward networks on numpy with explicit gradient tapes.

Everything is float64. Forward passes return a tape object holding the
intermediate activations of that specific call, so one network can be run
several times per update and each run backpropagated independently.
Backward passes accumulate into ``Param.grad``; callers zero grads, run as
many backward passes as the loss needs, then apply one Adam step.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input or gradient shape does not match the network architecture."""


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or inf; training should abort."""


class Param:
    """A weight array plus its gradient accumulator and Adam moments."""

    __slots__ = ("value", "grad", "m", "v", "step_count")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step_count = 0


class Dense:
    """One affine layer with an optional ReLU.

    Weights are initialised uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)]
    and biases at zero, keeping initial outputs small.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = "relu",
                 rng: np.random.Generator | None = None):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng()
        limit = 1.0 / np.sqrt(in_dim)
        self.w = Param(rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        self.b = Param(np.zeros(out_dim))
        self.activation = activation
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, x: np.ndarray):
        """Returns (y, cache) for a batch x of shape (rows, in_dim)."""
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"expected input (*, {self.in_dim}), got {x.shape}")
        z = x @ self.w.value + self.b.value
        if self.activation == "relu":
            y = np.maximum(z, 0.0)
        else:
            y = z
        return y, (x, z)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        """Accumulates w/b grads for one forward cache, returns dL/dx."""
        x, z = cache
        if dy.shape != (x.shape[0], self.out_dim):
            raise ShapeError(
                f"expected upstream grad {(x.shape[0], self.out_dim)}, "
                f"got {dy.shape}")
        if self.activation == "relu":
            dz = dy * (z > 0.0)
        else:
            dz = dy
        self.w.grad += x.T @ dz
        self.b.grad += dz.sum(axis=0)
        return dz @ self.w.value.T

    def params(self) -> list[Param]:
        return [self.w, self.b]


class MLP:
    """A stack of Dense layers: ReLU on hidden layers, identity output."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator,
                 out_activation: str = "identity"):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        self.layers = []
        for i in range(len(dims) - 1):
            act = "relu" if i < len(dims) - 2 else out_activation
            self.layers.append(Dense(dims[i], dims[i + 1], act, rng))
        self.in_dim = dims[0]
        self.out_dim = dims[-1]

    def forward(self, x: np.ndarray):
        """Returns (y, tape); tape is the list of per-layer caches."""
        tape = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            tape.append(cache)
        return x, tape

    def backward(self, tape, dy: np.ndarray) -> np.ndarray:
        if len(tape) != len(self.layers):
            raise ShapeError("tape does not match network depth")
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            dy = layer.backward(cache, dy)
        return dy

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


class Adam:
    """Standard Adam over a fixed parameter list."""

    def __init__(self, params: Iterable[Param], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        for p in self.params:
            g = p.grad
            if not np.isfinite(g.sum()):
                raise NonFiniteGradient("non-finite gradient encountered")
            p.step_count += 1
            t = p.step_count
            p.m *= self.beta1
            p.m += (1.0 - self.beta1) * g
            p.v *= self.beta2
            p.v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(p.v / (1.0 - self.beta2 ** t))
            denom += self.eps
            p.value -= (self.lr / (1.0 - self.beta1 ** t)) * p.m / denom

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0


def snapshot_into(src_params: Iterable[Param], dst_params: Iterable[Param]):
    """Copies parameter values (not moments) from src into dst, bitwise."""
    src, dst = list(src_params), list(dst_params)
    if len(src) != len(dst):
        raise ShapeError("parameter lists differ in length")
    for s, d in zip(src, dst):
        if s.value.shape != d.value.shape:
            raise ShapeError(
                f"shape mismatch {s.value.shape} vs {d.value.shape}")
        d.value[...] = s.value


def finite_difference_grads(loss_fn, params: Iterable[Param],
                            h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of loss_fn() w.r.t. every Param entry.

    loss_fn takes no arguments and must be a deterministic function of the
    current parameter values. Used as the independent oracle for backward().
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = loss_fn()
            flat[k] = orig - h
            f_minus = loss_fn()
            flat[k] = orig
            gflat[k] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def gradient_mismatch(analytic: Sequence[np.ndarray],
                      numeric: Sequence[np.ndarray],
                      rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Worst |a-n| / (atol + rtol*max(|a|,|n|)); at most 1.0 is a match."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        worst = max(worst, float(np.max(np.abs(a - n) / scale)))
    return worst


def _fd_entry(loss_fn, p: Param, k: int, h: float) -> float:
    flat = p.value.reshape(-1)
    orig = flat[k]
    flat[k] = orig + h
    f_plus = loss_fn()
    flat[k] = orig - h
    f_minus = loss_fn()
    flat[k] = orig
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(loss_fn, params: Sequence[Param],
                    analytic: Sequence[np.ndarray], h: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Worst mismatch of analytic grads against central differences.

    Returns the gradient_mismatch measure (at most 1.0 passes). Losses
    built from ReLU / max / min are piecewise smooth; a difference step
    that straddles a corner produces a bogus estimate that moves as the
    step shrinks, while a genuinely wrong analytic gradient stays wrong
    at every step. Disagreeing entries are therefore re-probed at h/8
    and h/64 and judged by their best probe.
    """
    worst = 0.0
    for p, a in zip(params, analytic):
        aflat = a.reshape(-1)
        for k in range(aflat.size):
            n = _fd_entry(loss_fn, p, k, h)
            miss = abs(aflat[k] - n) / (atol + rtol * max(abs(aflat[k]), abs(n)))
            if miss > 1.0:
                for smaller in (h / 8.0, h / 64.0):
                    n2 = _fd_entry(loss_fn, p, k, smaller)
                    miss = min(miss, abs(aflat[k] - n2)
                               / (atol + rtol * max(abs(aflat[k]), abs(n2))))
            worst = max(worst, miss)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format
#
# A checkpoint is a single file:
#   line 1:  b"QFNET 1\n"
#   line 2:  one JSON object: {"meta": {...}, "arrays": [[name, shape], ...]}
#   body:    the listed arrays as raw little-endian float64, row-major,
#            concatenated in manifest order.
# ---------------------------------------------------------------------------

_MAGIC = b"QFNET 1\n"


def save_arrays(path, named_arrays: dict[str, np.ndarray], meta: dict):
    header = {
        "meta": meta,
        "arrays": [[name, list(arr.shape)] for name, arr in named_arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(header).encode() + b"\n")
        for arr in named_arrays.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path):
    """Returns (named_arrays, meta) written by save_arrays."""
    with open(path, "rb") as f:
        magic = f.readline()
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a QFNET checkpoint")
        header = json.loads(f.readline().decode())
        out = {}
        for name, shape in header["arrays"]:
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated checkpoint at {name}")
            out[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out, header["meta"]
