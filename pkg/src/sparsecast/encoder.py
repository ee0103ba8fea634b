"""Peak filtering and the multi-head dilated causal convolutional encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import diff_core as ad


@dataclass
class EncoderConfig:
    heads: int = 6
    channels: int = 8
    kernel_width: int = 2
    dilations: tuple = (1, 2, 4, 8, 16, 32)
    combine_width: int = 32
    gating: str = "uniform"  # "uniform" (concat + linear) or "moment"
    gate_hidden: int = 8
    peak_filter: str = "winsorize"  # or "identity"
    peak_multiple: float = 4.0
    peak_window: int = 13
    peak_min_level: float = 1.0

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.heads < 1:
            raise ValueError("need at least one head")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilation schedule must be non-empty and positive")
        if self.kernel_width < 1:
            raise ValueError("kernel width must be >= 1")
        if self.gating not in ("uniform", "moment"):
            raise ValueError(f"unknown gating mode {self.gating!r}")
        if self.peak_filter not in ("winsorize", "identity"):
            raise ValueError(f"unknown peak filter {self.peak_filter!r}")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_width - 1) * sum(self.dilations)

    def to_dict(self):
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


def peak_filter(x, mode="winsorize", multiple=4.0, window=13, min_level=1.0):
    """Clip each value at ``multiple * max(trailing mean, min_level)``.

    The trailing mean covers the ``window`` periods strictly before ``t`` (fewer
    at the start of the series); the first value is never clipped. Works on
    the last axis, so (T,) and (B, T) inputs are both fine.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "identity":
        return x.copy()
    if mode != "winsorize":
        raise ValueError(f"unknown peak filter mode {mode!r}")
    T = x.shape[-1]
    c = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)
    t = np.arange(T)
    lo = np.maximum(t - window, 0)
    count = t - lo
    prior_sum = c[..., t] - c[..., lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, prior_sum / np.maximum(count, 1), np.inf)
    cap = multiple * np.maximum(mean, min_level)
    return np.minimum(x, cap)


def init_encoder(rng, cfg: EncoderConfig, n_features: int, prefix="enc") -> dict:
    """Parameters for ``cfg.heads`` identically shaped conv stacks plus the combine."""
    params = {}
    for g in range(cfg.heads):
        # every head draws from its own stream so heads start different
        head_rng = np.random.default_rng(rng.integers(2**63))
        c_in = n_features
        for i, _ in enumerate(cfg.dilations):
            fan_in = c_in * cfg.kernel_width
            params[f"{prefix}.head{g}.conv{i}.w"] = head_rng.normal(0.0, np.sqrt(2.0 / fan_in), (cfg.kernel_width, c_in, cfg.channels))
            params[f"{prefix}.head{g}.conv{i}.b"] = np.zeros(cfg.channels)
            c_in = cfg.channels
    w, b = ad.init_dense(rng, cfg.heads * cfg.channels, cfg.combine_width)
    params[f"{prefix}.combine.w"], params[f"{prefix}.combine.b"] = w, b
    if cfg.gating == "moment":
        (w1, b1), (w2, b2) = ad.init_mlp(rng, [2, cfg.gate_hidden, cfg.heads], zero_last=True)
        params[f"{prefix}.gate.l0.w"], params[f"{prefix}.gate.l0.b"] = w1, b1
        params[f"{prefix}.gate.l1.w"], params[f"{prefix}.gate.l1.b"] = w2, b2
    return params


def conv_stack(x, params, prefix, dilations):
    """Causal conv layers with ReLU; layers after the first are residual."""
    h = x
    for i, d in enumerate(dilations):
        z = ad.relu(ad.causal_conv(h, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], d))
        h = z if i == 0 else ad.add(z, h)
    return h


def pyramid_ready(cfg: EncoderConfig, length: int) -> bool:
    """Whether the last-step shortcut applies: dilations ``1, K, K**2, ...`` and a full window."""
    K = cfg.kernel_width
    return K > 1 and cfg.dilations == tuple(K**i for i in range(len(cfg.dilations))) and length >= cfg.receptive_field


def conv_stack_last(x, params, prefix, cfg: EncoderConfig):
    """Final-step output of :func:`conv_stack`, computing only the positions it depends on.

    With dilations ``K**i`` the last output reads a K-ary tree of earlier
    positions, so each layer reduces to a stride-K convolution: group K
    neighbours and apply one matmul. Exactly equal to ``conv_stack(x)[:, -1]``.
    """
    K = cfg.kernel_width
    h = x[:, x.shape[1] - cfg.receptive_field:, :]
    B = h.shape[0]
    for i in range(len(cfg.dilations)):
        w = params[f"{prefix}.conv{i}.w"]
        n, c = h.shape[1], h.shape[2]
        grouped = ad.reshape(h, (B, n // K, K * c))
        # the newest member of a group meets tap 0, the oldest tap K-1
        w_flat = ad.reshape(ad.as_tensor(w)[::-1], (K * c, w.shape[2]))
        z = ad.relu(ad.linear(grouped, w_flat, params[f"{prefix}.conv{i}.b"]))
        h = z if i == 0 else ad.add(z, h[:, K - 1::K, :])
    return h[:, 0, :]


def moment_features(history):
    """``[log1p(mean), log1p(var)]`` of each row of a (B, T) target history."""
    history = np.asarray(history, dtype=np.float64)
    return np.stack([np.log1p(history.mean(axis=-1)), np.log1p(history.var(axis=-1))], axis=-1)


def moment_gate(history, params, prefix="enc"):
    """Softmax head weights (B, G) from the mean and variance of the history."""
    feats = moment_features(history)
    layers = [
        (params[f"{prefix}.gate.l0.w"], params[f"{prefix}.gate.l0.b"]),
        (params[f"{prefix}.gate.l1.w"], params[f"{prefix}.gate.l1.b"]),
    ]
    return ad.softmax(ad.mlp(feats, layers, activation="tanh"), axis=-1)


def multi_head_encode(x, params, cfg: EncoderConfig, history=None, prefix="enc", last_only=False):
    """(B, T, F) features -> (B, T, combine_width) encoding.

    Heads run the same dilated causal stack with their own weights; their
    outputs are concatenated per time step and mixed by one linear layer. In
    ``moment`` gating each head's output is first scaled by its gate weight,
    which needs the raw target ``history`` (B, T'). ``last_only`` returns just
    the final time step, shape (B, combine_width).
    """
    x = ad.as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"encoder input must be (batch, time, features), got {x.shape}")
    expected = params[f"{prefix}.head0.conv0.w"].shape[1]
    if x.shape[2] != expected:
        raise ValueError(f"encoder expects {expected} features, got {x.shape[2]}")
    if last_only and pyramid_ready(cfg, x.shape[1]):
        outs = [conv_stack_last(x, params, f"{prefix}.head{g}", cfg) for g in range(cfg.heads)]
    else:
        outs = [conv_stack(x, params, f"{prefix}.head{g}", cfg.dilations) for g in range(cfg.heads)]
        if last_only:
            outs = [o[:, -1, :] for o in outs]
    if cfg.gating == "moment":
        if history is None:
            raise ValueError("moment gating needs the target history")
        gate = moment_gate(history, params, prefix)
        shape = (-1, 1) if last_only else (-1, 1, 1)
        outs = [ad.mul(o, ad.reshape(gate[:, g], shape)) for g, o in enumerate(outs)]
    stacked = outs[0] if len(outs) == 1 else ad.concat(outs, axis=-1)
    return ad.linear(stacked, params[f"{prefix}.combine.w"], params[f"{prefix}.combine.b"])
