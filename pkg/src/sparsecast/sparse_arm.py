"""Sparse quantile network: patching, scale estimation and closed-form ICDFs.

Quantiles at or below the median are always zero. Above it the network
predicts distribution parameters at the maximal span and disaggregates them
to each horizon's span before applying the inverse CDF.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erfinv

from . import diff_core as ad

FAMILIES = ("exponential", "truncnorm", "zero", "gamma")
SCALE_FLOOR = 1e-9  # keeps softplus outputs strictly positive after underflow


class UnsupportedFamily(ValueError):
    pass


def _check_q(q):
    q = np.asarray(q, dtype=np.float64)
    if np.any(~((q > 0.0) & (q < 1.0))):
        raise ValueError("quantile level must lie in (0, 1)")
    return q


# ---------------------------------------------------------------------------
# patching
# ---------------------------------------------------------------------------


@dataclass
class PatchEmbedding:
    values: np.ndarray  # (..., n_patches, patch_len * n_features)
    mask: np.ndarray  # (..., n_patches, patch_len); True where padded
    patch_len: int

    @property
    def n_patches(self):
        return self.values.shape[-2]


def patch(x_past, patch_len: int) -> PatchEmbedding:
    """Split time into contiguous patches, oldest first; pad the last one with zeros.

    ``x_past`` is (T,), (T, F) or (B, T, F).
    """
    if patch_len < 1:
        raise ValueError("patch_len must be >= 1")
    x = np.asarray(x_past, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    B, T, F = x.shape
    if T == 0:
        raise ValueError("empty history")
    n = -(-T // patch_len)
    pad = n * patch_len - T
    padded = np.concatenate([x, np.zeros((B, pad, F))], axis=1)
    mask = np.zeros((B, n * patch_len), dtype=bool)
    mask[:, T:] = True
    values = padded.reshape(B, n, patch_len * F)
    mask = mask.reshape(B, n, patch_len)
    if squeeze:
        values, mask = values[0], mask[0]
    return PatchEmbedding(values, mask, patch_len)


# ---------------------------------------------------------------------------
# closed-form quantile functions
# ---------------------------------------------------------------------------


def exp_scale(span, max_span, theta):
    """Exponential scale for a span, linear in span: ``(span / max_span) * theta``."""
    return np.asarray(span, dtype=np.float64) / max_span * np.asarray(theta, dtype=np.float64)


def exp_icdf(q, span, max_span, theta):
    """``-(span / max_span) * theta * ln(1 - q)``."""
    q = _check_q(q)
    span = np.asarray(span, dtype=np.float64)
    if np.any(span <= 0) or np.any(span > max_span):
        raise ValueError("span must lie in (0, max_span]")
    if np.any(np.asarray(theta) <= 0):
        raise ValueError("theta must be positive")
    out = -exp_scale(span, max_span, theta) * np.log1p(-q)
    return float(out) if out.ndim == 0 else out


def std_normal_icdf(p):
    return math.sqrt(2.0) * erfinv(2.0 * np.asarray(p, dtype=np.float64) - 1.0)


def truncnorm_disaggregate(mu_s, sigma_s, n):
    """Per-part ``(mu, sigma)`` when an aggregate of ``n`` iid normals has ``(mu_s, sigma_s)``."""
    return np.asarray(mu_s) / n, np.asarray(sigma_s) / np.sqrt(n)


def truncnorm_aggregate(mu, sigma, n):
    return np.asarray(mu) * n, np.asarray(sigma) * np.sqrt(n)


def truncnorm_icdf(q, n_spans, mu_s, sigma_s):
    """ReLU of the normal quantile after splitting the aggregate into ``n_spans`` parts."""
    q = _check_q(q)
    if np.any(np.asarray(n_spans) < 1):
        raise ValueError("n_spans must be >= 1")
    if np.any(np.asarray(sigma_s) <= 0):
        raise ValueError("sigma_s must be positive")
    mu, sigma = truncnorm_disaggregate(mu_s, sigma_s, np.asarray(n_spans, dtype=np.float64))
    out = np.maximum(0.0, mu + sigma * std_normal_icdf(q))
    return float(out) if out.ndim == 0 else out


def gamma_aggregate(shapes, theta):
    """Sum of independent ``Gamma(k_i, theta)`` is ``Gamma(sum k_i, theta)``."""
    k = np.asarray(shapes, dtype=np.float64).reshape(-1)
    if k.size == 0 or np.any(k <= 0) or theta <= 0:
        raise ValueError("gamma shapes and scale must be positive")
    return float(k.sum()), float(theta)


def gamma_disaggregate(k_total, theta, span, max_span):
    """Shape proportional to span; the scale is shared."""
    if k_total <= 0 or theta <= 0 or not 0 < span <= max_span:
        raise ValueError("invalid gamma disaggregation arguments")
    return k_total * span / max_span, float(theta)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


@dataclass
class SparseArmConfig:
    family: str = "exponential"
    patch_len: int = 13
    context: int = 52
    embed: int = 8
    hidden: tuple = (16,)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.patch_len < 1 or self.context < 1:
            raise ValueError("patch_len and context must be positive")

    @property
    def n_patches(self):
        return -(-self.context // self.patch_len)

    @property
    def n_params(self):
        return {"exponential": 1, "truncnorm": 2}.get(self.family, 0)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def init_sparse_arm(rng, cfg: SparseArmConfig, n_features: int, prefix="sparse") -> dict:
    if cfg.family == "gamma":
        raise UnsupportedFamily("gamma quantiles need sample paths; only its parameter algebra is provided")
    if cfg.family == "zero":
        return {}
    params = {}
    w, b = ad.init_dense(rng, cfg.patch_len * n_features, cfg.embed)
    params[f"{prefix}.embed.w"], params[f"{prefix}.embed.b"] = w, b
    sizes = [cfg.n_patches * cfg.embed, *cfg.hidden, cfg.n_params]
    for i, (w, b) in enumerate(ad.init_mlp(rng, sizes)):
        params[f"{prefix}.mlp{i}.w"], params[f"{prefix}.mlp{i}.b"] = w, b
    n_layers = len(sizes) - 1
    # start at a small positive scale; softplus(-3) ~ 0.05
    params[f"{prefix}.mlp{n_layers - 1}.w"] *= 0.1
    params[f"{prefix}.mlp{n_layers - 1}.b"][:] = -3.0
    return params


def sparse_params(x_past, params, cfg: SparseArmConfig, prefix="sparse"):
    """Distribution parameters at the maximal span, shape (B, n_params).

    Exponential: column 0 is the scale (softplus). Truncated normal: column 0
    is the unconstrained aggregate mean, column 1 the aggregate std (softplus).
    """
    x = np.asarray(x_past, dtype=np.float64) if not isinstance(x_past, ad.Tensor) else x_past.data
    emb = patch(x, cfg.patch_len).values
    if emb.ndim == 2:
        emb = emb[None]
    B = emb.shape[0]
    h = ad.relu(ad.linear(emb, params[f"{prefix}.embed.w"], params[f"{prefix}.embed.b"]))
    h = ad.reshape(h, (B, -1))
    n_layers = len(cfg.hidden) + 1
    layers = [(params[f"{prefix}.mlp{i}.w"], params[f"{prefix}.mlp{i}.b"]) for i in range(n_layers)]
    raw = ad.mlp(h, layers, activation="relu")
    if cfg.family == "exponential":
        return ad.add(ad.softplus(raw), SCALE_FLOOR)
    mu = raw[:, 0:1]
    sigma = ad.add(ad.softplus(raw[:, 1:2]), SCALE_FLOOR)
    return ad.concat([mu, sigma], axis=-1)


def quantile_coefficients(horizon, quantiles, family):
    """Constant tables used to turn parameters into per-horizon quantiles.

    Returns ``(coef, active)`` of shape (H, Q): ``active`` is False for q <= 0.5.
    For the exponential family ``coef`` multiplies the scale; for the
    truncated normal it holds ``Phi^-1(q)`` per cell.
    """
    q = _check_q(np.asarray(quantiles, dtype=np.float64))
    spans = horizon.spans.astype(np.float64)
    active = np.broadcast_to(q[None, :] > 0.5, (len(spans), len(q)))
    if family == "exponential":
        coef = -(spans[:, None] / horizon.max_span) * np.log1p(-q)[None, :]
    elif family == "truncnorm":
        coef = np.broadcast_to(std_normal_icdf(q)[None, :], (len(spans), len(q))).copy()
    else:
        coef = np.zeros((len(spans), len(q)))
    return np.where(active, coef, 0.0), active


def sparse_quantiles(theta, horizon, quantiles, family):
    """(B, n_params) parameters -> (B, H, Q) quantile forecasts in raw units."""
    coef, active = quantile_coefficients(horizon, quantiles, family)
    theta = ad.as_tensor(theta)
    B = theta.shape[0]
    if family == "exponential":
        return ad.mul(ad.reshape(theta, (B, 1, 1)), coef[None])
    if family == "truncnorm":
        n = (horizon.max_span / horizon.spans.astype(np.float64))[None, :, None]
        mu = ad.mul(ad.reshape(theta[:, 0], (B, 1, 1)), 1.0 / n)
        sigma = ad.mul(ad.reshape(theta[:, 1], (B, 1, 1)), 1.0 / np.sqrt(n))
        q_val = ad.relu(ad.add(mu, ad.mul(sigma, coef[None])))
        return ad.mul(q_val, active[None].astype(np.float64))
    if family == "zero":
        return ad.Tensor(np.zeros((B, len(horizon), len(quantiles))))
    raise UnsupportedFamily(f"family {family!r} has no closed-form quantiles")


def sparse_forecast(x_past, horizon, quantiles, cfg: SparseArmConfig, params, prefix="sparse"):
    """Quantile forecasts (B, H, Q) for series routed to the sparse arm."""
    if cfg.family == "gamma":
        raise UnsupportedFamily("gamma quantiles need sample paths; only its parameter algebra is provided")
    x = np.asarray(x_past.data if isinstance(x_past, ad.Tensor) else x_past, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if cfg.family == "zero":
        return ad.Tensor(np.zeros((x.shape[0], len(horizon), len(quantiles))))
    theta = sparse_params(x, params, cfg, prefix)
    return sparse_quantiles(theta, horizon, quantiles, cfg.family)
