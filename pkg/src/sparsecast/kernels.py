"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``SPARSECAST_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when it imports cleanly).
``set_backend`` switches it at runtime, which the benchmark and the
cross-backend tests rely on.

Both paths compute the same quantities; they differ only in summation
order, so results agree to rounding, not bit-for-bit.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip probing for TBB, which warns loudly when an old version is installed
        numba.config.THREADING_LAYER = "workqueue"

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def decorator(func):
            return func

        return decorator

    prange = range


_BACKENDS = ("numba", "numpy")


def _initial_backend() -> str:
    requested = os.environ.get("SPARSECAST_BACKEND", "numba").strip().lower()
    if requested not in _BACKENDS:
        raise ValueError(f"SPARSECAST_BACKEND must be one of {_BACKENDS}, got {requested!r}")
    if requested == "numba" and not HAS_NUMBA:
        return "numpy"
    return requested


_backend = _initial_backend()


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Switch the active backend and return the previous one."""
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"backend must be one of {_BACKENDS}, got {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    previous, _backend = _backend, name
    return previous


# ---------------------------------------------------------------------------
# dilated causal convolution
#
# x: (B, T, Cin); w: (K, Cin, Cout); bias: (Cout,)
# out[b, t] = bias + sum_k x[b, t - k*d] @ w[k], taps before t=0 read zero.
# ---------------------------------------------------------------------------


def _conv_forward_numpy(x, w, bias, dilation):
    B, T, _ = x.shape
    K = w.shape[0]
    out = np.empty((B, T, w.shape[2]))
    out[:] = bias
    for k in range(K):
        shift = k * dilation
        if shift >= T:
            break
        out[:, shift:, :] += x[:, : T - shift, :] @ w[k]
    return out


def _conv_backward_numpy(x, w, grad_out, dilation):
    B, T, _ = x.shape
    K = w.shape[0]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for k in range(K):
        shift = k * dilation
        if shift >= T:
            break
        g = grad_out[:, shift:, :]
        xs = x[:, : T - shift, :]
        gx[:, : T - shift, :] += g @ w[k].T
        gw[k] = xs.reshape(-1, xs.shape[2]).T @ g.reshape(-1, g.shape[2])
    gb = grad_out.reshape(-1, grad_out.shape[2]).sum(axis=0)
    return gx, gw, gb


@njit(parallel=True, cache=True)
def _conv_forward_numba(x, w, bias, dilation):
    B, T, Cin = x.shape
    K, _, Cout = w.shape
    out = np.empty((B, T, Cout))
    for b in prange(B):
        for t in range(T):
            for o in range(Cout):
                out[b, t, o] = bias[o]
            for k in range(K):
                src = t - k * dilation
                if src < 0:
                    break
                for c in range(Cin):
                    xv = x[b, src, c]
                    if xv != 0.0:
                        for o in range(Cout):
                            out[b, t, o] += xv * w[k, c, o]
    return out


@njit(parallel=True, cache=True)
def _conv_backward_numba(x, w, grad_out, dilation):
    B, T, Cin = x.shape
    K, _, Cout = w.shape
    gx = np.zeros((B, T, Cin))
    for b in prange(B):
        for t in range(T):
            for k in range(K):
                src = t - k * dilation
                if src < 0:
                    break
                for c in range(Cin):
                    acc = 0.0
                    for o in range(Cout):
                        acc += grad_out[b, t, o] * w[k, c, o]
                    gx[b, src, c] += acc
    # each (k, c) row of the weight gradient is owned by one iteration, so the
    # reduction order over (b, t) is fixed regardless of thread count
    gw = np.zeros((K, Cin, Cout))
    for kc in prange(K * Cin):
        k = kc // Cin
        c = kc % Cin
        shift = k * dilation
        for b in range(B):
            for t in range(shift, T):
                xv = x[b, t - shift, c]
                for o in range(Cout):
                    gw[k, c, o] += xv * grad_out[b, t, o]
    gb = np.zeros(Cout)
    for b in range(B):
        for t in range(T):
            for o in range(Cout):
                gb[o] += grad_out[b, t, o]
    return gx, gw, gb


def causal_conv_forward(x, w, bias, dilation):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    if _backend == "numba":
        return _conv_forward_numba(x, w, bias, int(dilation))
    return _conv_forward_numpy(x, w, bias, int(dilation))


def causal_conv_backward(x, w, grad_out, dilation):
    """Return ``(grad_x, grad_w, grad_bias)`` for :func:`causal_conv_forward`."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if _backend == "numba":
        return _conv_backward_numba(x, w, grad_out, int(dilation))
    return _conv_backward_numpy(x, w, grad_out, int(dilation))


# ---------------------------------------------------------------------------
# trailing window sums: out[i, t] = sum(y[i, max(0, t-window+1) : t+1])
# ---------------------------------------------------------------------------


def _trailing_sum_numpy(y, window):
    c = np.cumsum(y, axis=1)
    out = c.copy()
    out[:, window:] = c[:, window:] - c[:, :-window]
    return out


@njit(parallel=True, cache=True)
def _trailing_sum_numba(y, window):
    N, T = y.shape
    out = np.empty((N, T))
    for i in prange(N):
        acc = 0.0
        for t in range(T):
            acc += y[i, t]
            if t >= window:
                acc -= y[i, t - window]
            out[i, t] = acc
    return out


def trailing_sum(y, window):
    y = np.ascontiguousarray(np.atleast_2d(y), dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    if _backend == "numba":
        return _trailing_sum_numba(y, int(window))
    return _trailing_sum_numpy(y, int(window))


# ---------------------------------------------------------------------------
# span targets: out[i, t, h] = sum(y[i, t+lead_h : t+lead_h+span_h]) for fcd t
# ---------------------------------------------------------------------------


def _span_targets_numpy(y, fcds, series_idx, leads, spans):
    c = np.concatenate([np.zeros((y.shape[0], 1)), np.cumsum(y, axis=1)], axis=1)
    start = fcds[:, None] + leads[None, :]
    stop = start + spans[None, :]
    rows = series_idx[:, None]
    return c[rows, stop] - c[rows, start]


@njit(parallel=True, cache=True)
def _span_targets_numba(y, fcds, series_idx, leads, spans):
    n = fcds.shape[0]
    H = leads.shape[0]
    out = np.empty((n, H))
    for j in prange(n):
        i = series_idx[j]
        t = fcds[j]
        for h in range(H):
            acc = 0.0
            start = t + leads[h]
            for u in range(start, start + spans[h]):
                acc += y[i, u]
            out[j, h] = acc
    return out


def span_targets(y, fcds, series_idx, leads, spans):
    """Sum of span-1 targets for every (sample, horizon) pair.

    ``fcds`` and ``series_idx`` are parallel integer arrays naming the sampled
    (series, forecast creation date) pairs; the caller guarantees every window
    lies inside ``y``.
    """
    y = np.ascontiguousarray(y, dtype=np.float64)
    fcds = np.ascontiguousarray(fcds, dtype=np.int64)
    series_idx = np.ascontiguousarray(series_idx, dtype=np.int64)
    leads = np.ascontiguousarray(leads, dtype=np.int64)
    spans = np.ascontiguousarray(spans, dtype=np.int64)
    if _backend == "numba":
        return _span_targets_numba(y, fcds, series_idx, leads, spans)
    return _span_targets_numpy(y, fcds, series_idx, leads, spans)


# ---------------------------------------------------------------------------
# single-series causal FIR filter (collapse simulation)
# ---------------------------------------------------------------------------


def _causal_filter_numpy(y, taps):
    return np.convolve(y, taps)[: y.shape[0]]


@njit(cache=True)
def _causal_filter_numba(y, taps):
    T = y.shape[0]
    K = taps.shape[0]
    out = np.zeros(T)
    for t in range(T):
        acc = 0.0
        for k in range(min(K, t + 1)):
            acc += taps[k] * y[t - k]
        out[t] = acc
    return out


def causal_filter(y, taps):
    """``out[t] = sum_k taps[k] * y[t-k]`` with zeros before the series start."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if _backend == "numba":
        return _causal_filter_numba(y, taps)
    return _causal_filter_numpy(y, taps)


def warmup() -> None:
    """Trigger JIT compilation so later timings exclude it."""
    if not HAS_NUMBA:
        return
    x = np.zeros((1, 4, 2))
    w = np.zeros((2, 2, 3))
    _conv_forward_numba(x, w, np.zeros(3), 1)
    _conv_backward_numba(x, w, np.zeros((1, 4, 3)), 1)
    _trailing_sum_numba(np.zeros((1, 4)), 2)
    idx = np.zeros(1, dtype=np.int64)
    _span_targets_numba(np.zeros((1, 4)), idx, idx, np.ones(1, dtype=np.int64), np.ones(1, dtype=np.int64))
    _causal_filter_numba(np.zeros(4), np.ones(2))


__all__ = [
    "HAS_NUMBA",
    "causal_conv_backward",
    "causal_conv_forward",
    "causal_filter",
    "get_backend",
    "set_backend",
    "span_targets",
    "trailing_sum",
    "warmup",
]
