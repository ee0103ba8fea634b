"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Only the operations the forecaster needs are provided. Ops executed while a
:class:`Tape` is active, on inputs that require gradients, are appended to the
tape; :meth:`Tape.backward` replays the tape in reverse. Outside a tape the
same functions are plain numpy computations (used for inference).

Everything is float64.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels

CHECKPOINT_VERSION = 1


class TrainingDivergence(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


_state = threading.local()


def _current_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable ops executed inside ``with Tape():``."""

    def __init__(self):
        self.records = []
        self._outer = None

    def __enter__(self):
        self._outer = _current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._outer
        return False

    def record(self, out, inputs, backward):
        self.records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g
            # intermediate buffers are no longer needed
            out.grad = None if out is not loss else out.grad


def _make(data, inputs, backward):
    out = Tensor(data)
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b):
    """``a @ b`` where ``b`` is a 2-D weight matrix and ``a`` has any leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight + bias`` over the last axis of ``x``."""
    y = matmul(x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        y = add(y, bias)
    return y


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softplus(x):
    x = as_tensor(x)
    data = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - data)
    return _make(data, (x,), lambda g: (g * sig,))


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x):
    x = as_tensor(x)
    return _make(x.data**2, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)
    return _make(data, (x,), lambda g: (g * (1.0 - data**2),))


ACTIVATIONS: dict[str, Callable] = {
    "relu": relu,
    "tanh": tanh,
    "softplus": softplus,
    "identity": lambda x: as_tensor(x),
}


def tsum(x, axis=None):
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(data, (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, index):
    x = as_tensor(x)

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def cumsum(x, axis=-1):
    x = as_tensor(x)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _make(np.cumsum(x.data, axis=axis), (x,), backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward)


def causal_conv(x, weight, bias, dilation=1):
    """Dilated causal convolution over time.

    ``x`` is (batch, time, in_channels), ``weight`` is (width, in, out) with
    tap ``k`` reading ``x[t - k*dilation]``; taps before the start read zero.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ValueError(f"conv shape mismatch: x {x.shape}, weight {weight.shape}")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    data = kernels.causal_conv_forward(x.data, weight.data, bias.data, dilation)

    def backward(g):
        return kernels.causal_conv_backward(x.data, weight.data, g, dilation)

    return _make(data, (x, weight, bias), backward)


def dilated_causal_conv(x, kernels_, dilations, biases=None, activation="identity"):
    """Stack of causal convolutions, one kernel per dilation.

    Accepts (time, channels) or (batch, time, channels). Returns the output
    and a boolean (time,) mask that flags steps whose receptive field reaches
    before the series start, i.e. steps that saw zero padding.
    """
    if len(dilations) == 0 or len(kernels_) != len(dilations):
        raise ValueError("need one kernel per dilation and at least one layer")
    x = as_tensor(x)
    squeeze = x.ndim == 2
    h = reshape(x, (1,) + x.shape) if squeeze else x
    act = ACTIVATIONS[activation]
    for i, (w, d) in enumerate(zip(kernels_, dilations)):
        w = as_tensor(w)
        if w.ndim != 3 or w.shape[0] < 1:
            raise ValueError("kernels must be (width, in, out) with width >= 1")
        b = np.zeros(w.shape[2]) if biases is None else biases[i]
        h = act(causal_conv(h, w, b, int(d)))
    field = 1 + sum((as_tensor(w).shape[0] - 1) * int(d) for w, d in zip(kernels_, dilations))
    padded = np.arange(x.shape[-2]) < field - 1
    return (reshape(h, h.shape[1:]) if squeeze else h), padded


def pinball(yhat, y, q):
    """Elementwise quantile loss ``q (y-yhat)_+ + (1-q) (yhat-y)_+``.

    At ``yhat == y`` the gradient takes the ``yhat >= y`` branch.
    """
    yhat = as_tensor(yhat)
    y = np.asarray(y, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    diff = y - yhat.data
    data = np.maximum(q * diff, (q - 1.0) * diff)
    slope = np.where(yhat.data >= y, 1.0 - q, -q)
    return _make(data, (yhat,), lambda g: (_unbroadcast(g * slope, yhat.shape),))


# ---------------------------------------------------------------------------
# small networks
# ---------------------------------------------------------------------------


def mlp(x, layers, activation="relu", final_activation="identity"):
    """Feed-forward stack. ``layers`` is a list of ``(weight, bias)`` pairs."""
    act = ACTIVATIONS[activation]
    h = as_tensor(x)
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i < len(layers) - 1:
            h = act(h)
    return ACTIVATIONS[final_activation](h)


def init_dense(rng, n_in, n_out, scale=None):
    scale = np.sqrt(2.0 / n_in) if scale is None else scale
    return rng.normal(0.0, scale, size=(n_in, n_out)), np.zeros(n_out)


def init_mlp(rng, sizes, zero_last=False):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w, bias = init_dense(rng, a, b)
        if zero_last and i == len(sizes) - 2:
            w = np.zeros_like(w)
        layers.append((w, bias))
    return layers


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    Parameters missing from ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient for {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def value_and_grad(fn, params: dict):
    """Evaluate scalar ``fn`` on tensor-wrapped ``params`` and backprop once."""
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    with Tape() as tape:
        out = fn(tensors)
        tape.backward(out)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    return float(out.data), grads


def grad_check(fn, params: dict, epsilon=1e-4, floor=1e-7):
    """Largest relative error between reverse-mode and a five-point central difference.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``. The
    fourth-order stencil keeps the numeric side accurate to roughly
    ``1e-16 * |fn| / epsilon``. Results are meaningless where ``fn`` has a kink
    within ``2 * epsilon`` of ``params``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = value_and_grad(fn, params)

    def at(name, i, value, flat):
        flat[i] = value
        return float(fn({k: Tensor(v) for k, v in params.items()}).data)

    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            f2, f1 = at(name, i, orig + 2 * epsilon, flat), at(name, i, orig + epsilon, flat)
            b1, b2 = at(name, i, orig - epsilon, flat), at(name, i, orig - 2 * epsilon, flat)
            flat[i] = orig
            numeric = (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * epsilon)
            denom = max(abs(ga[i]), abs(numeric), floor)
            worst = max(worst, abs(ga[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write named float64 arrays as JSON; ``repr`` floats round-trip exactly."""
    payload = {
        "format": "sparsecast-checkpoint",
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "sparsecast-checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    params = {
        name: np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return params, payload["meta"]
