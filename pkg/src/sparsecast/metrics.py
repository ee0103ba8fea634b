"""Quantile loss, WQL, one-sided bias masses and per-category reports.

All reductions flatten to a contiguous float64 array and call ``np.sum``,
which uses numpy's pairwise summation; for a given input layout the result
is reproducible run to run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .series_data import CATEGORY_ORDER, MagnitudeCategory


def _check_q(q):
    q_arr = np.asarray(q, dtype=np.float64)
    if np.any(~((q_arr > 0.0) & (q_arr < 1.0))):
        raise ValueError(f"quantile level must lie in (0, 1), got {q!r}")
    return q_arr


def _total(x) -> float:
    return float(np.sum(np.ascontiguousarray(x, dtype=np.float64).ravel()))


def quantile_loss(y, yhat, q):
    """``q (y - yhat)_+ + (1 - q) (yhat - y)_+``, elementwise."""
    q = _check_q(q)
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    out = q * np.maximum(y - yhat, 0.0) + (1.0 - q) * np.maximum(yhat - y, 0.0)
    return float(out) if out.ndim == 0 else out


def _select(actuals, forecasts, selection):
    y = np.asarray(actuals, dtype=np.float64)
    f = np.asarray(forecasts, dtype=np.float64)
    if y.shape != f.shape:
        raise ValueError(f"actuals {y.shape} and forecasts {f.shape} differ in shape")
    if selection is not None:
        sel = np.asarray(selection, dtype=bool)
        y, f = y[sel], f[sel]
    return y, f


def wql(actuals, forecasts, q, selection=None):
    """Summed quantile loss over summed actuals; ``None`` when the sum is zero."""
    y, f = _select(actuals, forecasts, selection)
    denom = _total(y)
    if denom <= 0.0:
        return None
    return _total(quantile_loss(y, f, q)) / denom


def bias_decomposition(actuals, forecasts, q=None, selection=None):
    """Over-bias mass ``sum (yhat - y)_+`` and under-bias mass ``sum (y - yhat)_+``.

    For any ``q`` the summed quantile loss equals ``q * ub + (1 - q) * ob``.
    ``q`` is accepted for symmetry with :func:`wql` and only validated.
    """
    if q is not None:
        _check_q(q)
    y, f = _select(actuals, forecasts, selection)
    return _total(np.maximum(f - y, 0.0)), _total(np.maximum(y - f, 0.0))


# ---------------------------------------------------------------------------
# magnitude-bias audit
# ---------------------------------------------------------------------------


def crps_normal(y, mu, sigma):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``y``."""
    y, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (y, mu, sigma))
    z = (y - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - 1.0 / math.sqrt(math.pi))


@dataclass
class FactorizedLoss:
    loss: str
    g: str
    series_loss: np.ndarray
    weights: np.ndarray
    max_rel_deviation: float

    @property
    def loss_share(self):
        return self.series_loss / self.series_loss.sum()

    @property
    def weight_share(self):
        return self.weights / self.weights.sum()


_SCALE = {"pinball": ("identity", lambda y: y), "mse": ("square", lambda y: y * y), "crps": ("identity", lambda y: y)}


def loss_weight_audit(series, r=0.1, loss="pinball", q=0.9, kappa=0.1) -> FactorizedLoss:
    """Per-series loss under a common relative error versus the predicted weight.

    Every point gets ``yhat = (1 + r) y``. The predicted weight of series i is
    ``sum_t g(y_it)`` with ``g(y) = y`` for pinball and normal CRPS (spread
    ``kappa * y``) and ``g(y) = y**2`` for squared error. The returned
    deviation is the largest relative gap between realized loss shares and
    weight shares.
    """
    if loss not in _SCALE:
        raise ValueError(f"loss must be one of {sorted(_SCALE)}, got {loss!r}")
    if r == 0:
        raise ValueError("relative error r must be non-zero")
    g_name, g = _SCALE[loss]
    arrays = [np.asarray(s, dtype=np.float64).reshape(-1) for s in series]
    if not arrays:
        raise ValueError("no series")
    totals, weights = [], []
    for y in arrays:
        if y.size == 0 or np.any(y <= 0):
            raise ValueError("relative error needs strictly positive targets")
        yhat = (1.0 + r) * y
        if loss == "pinball":
            per_point = quantile_loss(y, yhat, q)
        elif loss == "mse":
            per_point = (yhat - y) ** 2
        else:
            per_point = crps_normal(y, yhat, kappa * y)
        totals.append(_total(per_point))
        weights.append(_total(g(y)))
    totals = np.array(totals)
    weights = np.array(weights)
    share_l = totals / totals.sum()
    share_w = weights / weights.sum()
    dev = float(np.max(np.abs(share_l - share_w) / share_w))
    return FactorizedLoss(loss, g_name, totals, weights, dev)


# ---------------------------------------------------------------------------
# category reports
# ---------------------------------------------------------------------------

ALL = "All"


@dataclass
class BiasReportRow:
    category: str
    quantile: float
    ql: float
    ob: float
    ub: float
    sum_y: float
    wql: float | None
    delta_vs_baseline_pct: float | None = None

    def key(self):
        return (self.category, self.quantile)


def _category_label(c):
    return c.value if isinstance(c, MagnitudeCategory) else str(c)


def report_by_category(actuals, forecasts: dict, categories, baseline=None) -> list:
    """One row per (category present, quantile) plus an ``All`` row per quantile.

    ``actuals`` is (n_points, n_horizons) with one row per evaluated
    (series, fcd); ``forecasts`` maps quantile level to an array of the same
    shape; ``categories`` gives each row's magnitude bucket at its fcd.
    Deltas are percent change of summed quantile loss against ``baseline``
    rows with the same key.
    """
    y = np.asarray(actuals, dtype=np.float64)
    labels = np.array([_category_label(c) for c in categories], dtype=object)
    if labels.shape[0] != y.shape[0]:
        raise ValueError("one category per evaluated row is required")
    present = [c.value for c in CATEGORY_ORDER if np.any(labels == c.value)]
    groups = [(name, labels == name) for name in present] + [(ALL, np.ones(y.shape[0], dtype=bool))]
    base = {row.key(): row for row in baseline} if baseline else {}
    rows = []
    for name, mask in groups:
        for q in sorted(forecasts):
            f = np.asarray(forecasts[q], dtype=np.float64)
            yy, ff = y[mask], f[mask]
            ob, ub = bias_decomposition(yy, ff)
            ql = _total(quantile_loss(yy, ff, q))
            sum_y = _total(yy)
            row = BiasReportRow(name, float(q), ql, ob, ub, sum_y, ql / sum_y if sum_y > 0 else None)
            ref = base.get(row.key())
            if ref is not None and ref.ql > 0:
                row.delta_vs_baseline_pct = 100.0 * (ql - ref.ql) / ref.ql
            rows.append(row)
    return rows


def relative_delta_pct(value, reference):
    if value is None or reference is None or reference == 0:
        return None
    return 100.0 * (value - reference) / reference


REPORT_COLUMNS = ["category", "quantile", "ql", "ob", "ub", "sum_y", "wql", "delta_vs_baseline_pct"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(rows, csv_path, json_path=None) -> None:
    """CSV plus optional JSON mirror. Undefined values are empty / null."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            d = asdict(row)
            w.writerow([_cell(d[c]) for c in REPORT_COLUMNS])
    if json_path is not None:
        Path(json_path).write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n", encoding="utf-8")


def read_report(path) -> list:
    path = Path(path)
    if path.suffix == ".json":
        return [BiasReportRow(**d) for d in json.loads(path.read_text(encoding="utf-8"))]
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for d in csv.DictReader(fh):
            rows.append(
                BiasReportRow(
                    d["category"],
                    float(d["quantile"]),
                    float(d["ql"]),
                    float(d["ob"]),
                    float(d["ub"]),
                    float(d["sum_y"]),
                    float(d["wql"]) if d["wql"] else None,
                    float(d["delta_vs_baseline_pct"]) if d["delta_vs_baseline_pct"] else None,
                )
            )
    return rows
