"""Experiment runners: collapse simulation, sampling-bias study, ablations, head sweep.

Every runner returns plain row dicts plus a summary dict, and ``write_outputs``
turns them into a CSV and a JSON file. Floats are written with ``repr`` so the
files are byte-identical for identical inputs.
"""

from __future__ import annotations

import copy
import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .encoder import EncoderConfig
from .metrics import relative_delta_pct
from .model import ModelConfig, evaluate, read_config_dict, train
from .series_data import CATEGORY_ORDER, DatasetConfig, Panel, gen_mixed_magnitude_dataset, gen_poisson_sparse
from .sparse_arm import SparseArmConfig

LOW_CUTOFF = 0.1
QUANTILES = (0.5, 0.9)


class UnknownVariant(ValueError):
    pass


@dataclass
class ExperimentSpec:
    experiment: str
    config_path: str | None
    seeds: list
    out_dir: str

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValueError("at least one seed is required")
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")


def load_experiment_config(path):
    """``(DatasetConfig, ModelConfig)`` from a file with ``dataset`` and ``model`` tables.

    Both tables are optional. The model's ``train.seed`` is a placeholder;
    runners overwrite it with each run's seed.
    """
    d = read_config_dict(path) if path is not None else {}
    dataset = DatasetConfig.from_dict(d.get("dataset", {}))
    model = dict(d.get("model", {}))
    model["train"] = {**model.get("train", {}), "seed": 0}
    return dataset, ModelConfig.from_dict(model)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_outputs(rows, summary, out_dir, stem):
    """Write ``<stem>.csv`` from ``rows`` and ``<stem>.json`` from ``summary``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0]) if rows else []
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


# ---------------------------------------------------------------------------
# collapse simulation
# ---------------------------------------------------------------------------


@dataclass
class CollapseResult:
    sparsity: list
    p10: np.ndarray  # (n_levels, horizon)
    p50: np.ndarray
    p90: np.ndarray
    future: np.ndarray  # same-sparsity trajectory overlaid on the forecast
    history: np.ndarray  # (n_levels, history)
    mu: np.ndarray
    sigma: np.ndarray

    @property
    def widths(self):
        """Per-step width of the 80% band, (n_levels, horizon)."""
        return self.p90 - self.p10

    @property
    def median_widths(self):
        return np.median(self.widths, axis=1)

    def rows(self):
        out = []
        for i, s in enumerate(self.sparsity):
            for h in range(self.p10.shape[1]):
                out.append(
                    {
                        "sparsity": float(s),
                        "step": h + 1,
                        "p10": float(self.p10[i, h]),
                        "p50": float(self.p50[i, h]),
                        "p90": float(self.p90[i, h]),
                        "width": float(self.widths[i, h]),
                        "future": float(self.future[i, h]),
                    }
                )
        return out

    def summary(self):
        return {
            "sparsity": [float(s) for s in self.sparsity],
            "mu": self.mu,
            "sigma": self.sigma,
            "median_width": self.median_widths,
        }


def exp_kernel(lags=24, decay=0.85):
    w = decay ** np.arange(lags, dtype=np.float64)
    return w / w.sum()


def collapse_forecast(history, rng, lags=24, decay=0.85, sigma_window=30, n_paths=500, horizon=20):
    """Sample paths ``mu + sigma z`` from the single-layer two-channel causal filter.

    Both channels share the normalised exponential kernel; the second one
    sees the history shifted back one period. ``mu`` is the average of the
    two channels' last values plus a least-squares scalar bias that matches
    the filtered series to the history mean over the warmed-up steps. ``sigma`` is the standard
    deviation of the last ``sigma_window`` non-zero observations.
    """
    y = np.asarray(history, dtype=np.float64)
    w = exp_kernel(lags, decay)
    ch0 = kernels.causal_filter(y, w)
    ch1 = kernels.causal_filter(np.concatenate([[0.0], y[:-1]]), w)
    conv = 0.5 * (ch0 + ch1)
    # fit the bias only where both channels see a full kernel
    warm = slice(lags, None) if y.size > lags else slice(None)
    bias = float(y[warm].mean() - conv[warm].mean())
    mu = float(conv[-1] + bias)
    nonzero = y[y != 0.0][-sigma_window:]
    if nonzero.size < 2:
        warnings.warn("fewer than two non-zero observations; using sigma = 0", RuntimeWarning, stacklevel=2)
        sigma = 0.0
    else:
        sigma = float(nonzero.std(ddof=1))
    z = rng.standard_normal((n_paths, horizon))
    return mu, sigma, mu + sigma * z


def run_collapse_sim(s_levels=(0.0, 0.5, 0.9), seed=0, length=100, rate=5.0, n_paths=500, horizon=20, lags=24, decay=0.85, sigma_window=30) -> CollapseResult:
    s_levels = [float(s) for s in s_levels]
    if not s_levels or any(not 0.0 <= s < 1.0 for s in s_levels):
        raise ValueError("sparsity levels must lie in [0, 1)")
    p10, p50, p90, fut, hist, mus, sigmas = [], [], [], [], [], [], []
    for i, s in enumerate(s_levels):
        ss = np.random.SeedSequence([int(seed), i])
        h_seed, f_seed, z_seed = ss.spawn(3)
        y = gen_poisson_sparse(rate, length, s, h_seed)
        future = gen_poisson_sparse(rate, horizon, s, f_seed)
        mu, sigma, paths = collapse_forecast(y, np.random.default_rng(z_seed), lags, decay, sigma_window, n_paths, horizon)
        q = np.percentile(paths, [10, 50, 90], axis=0)
        p10.append(q[0])
        p50.append(q[1])
        p90.append(q[2])
        fut.append(future)
        hist.append(y)
        mus.append(mu)
        sigmas.append(sigma)
    return CollapseResult(s_levels, np.array(p10), np.array(p50), np.array(p90), np.array(fut), np.array(hist), np.array(mus), np.array(sigmas))


def collapse_width_ratio(seeds, low=0.0, high=0.9):
    """Median over seeds of median band width at ``high`` over that at ``low``."""
    ratios = []
    for seed in seeds:
        res = run_collapse_sim((low, high), seed)
        w = res.median_widths
        ratios.append(w[1] / w[0] if w[0] > 0 else np.inf)
    return float(np.median(ratios)), ratios


# ---------------------------------------------------------------------------
# model variants
# ---------------------------------------------------------------------------


def _variant_delta(vid):
    moe = {"heads": 6, "gating": "moment"}
    single = {"heads": 1, "gating": "uniform"}
    table = {
        "v9": (single, None, None),
        "v10": (single, None, LOW_CUTOFF),
        "v11": (single, "zero", None),
        "v12": (single, "zero", LOW_CUTOFF),
        "v13": (moe, None, None),
        "v15": (single, "truncnorm", None),
        "v16": (moe, "truncnorm", None),
        "v17": (single, "exponential", None),
        "v18": (moe, "exponential", None),
        "v19": ({"heads": 6, "gating": "uniform"}, "exponential", None),
    }
    if vid not in table:
        raise UnknownVariant(f"unknown variant {vid!r}; expected one of {', '.join(table)}")
    return table[vid]


VARIANTS = ("v9", "v10", "v11", "v12", "v13", "v15", "v16", "v17", "v18", "v19")
BASELINE = "v9"


def variant_config(vid: str, base: ModelConfig, seed=None) -> ModelConfig:
    """Apply a variant's architecture delta to ``base``; everything else is kept."""
    enc_delta, family, cutoff = _variant_delta(vid.lower())
    cfg = copy.deepcopy(base)
    enc = cfg.encoder.to_dict()
    enc.update(enc_delta)
    cfg.encoder = EncoderConfig(**enc)
    if family is None:
        cfg.use_sparse_arm = False
    else:
        cfg.use_sparse_arm = True
        sp = cfg.sparse.to_dict()
        sp["family"] = family
        cfg.sparse = SparseArmConfig(**sp)
    if cutoff is not None:
        cfg.train.cutoff_quantile = cutoff
    if seed is not None:
        cfg.train.seed = int(seed)
    return cfg


def _with_seed(base: ModelConfig, seed) -> ModelConfig:
    cfg = copy.deepcopy(base)
    cfg.train.seed = int(seed)
    return cfg


def _as_dataset_config(d):
    return d if isinstance(d, DatasetConfig) else DatasetConfig(**d)


def _dataset_panel(dataset_config, seed):
    cfg = _as_dataset_config(dataset_config)
    return Panel.from_records(gen_mixed_magnitude_dataset(cfg, seed))


def _fit_and_evaluate(args):
    cfg, dataset_config, data_seed = args
    panel = _dataset_panel(dataset_config, data_seed)
    # train strictly before the dataset's backtest window
    cfg = copy.deepcopy(cfg)
    cfg.train.backtest_periods = _as_dataset_config(dataset_config).backtest_periods
    model = train(panel, cfg)
    return evaluate(model, panel)


def _run_all(jobs, tasks):
    if jobs <= 1 or len(tasks) <= 1:
        return [_fit_and_evaluate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fit_and_evaluate, tasks))


def _rows_by_key(evaluation):
    return {(r.category, r.quantile): r for r in evaluation.rows}


def _category_keys(evaluations, quantiles):
    present = set()
    for ev in evaluations:
        present.update(r.category for r in ev.rows)
    order = [c.value for c in CATEGORY_ORDER] + ["All"]
    return [(c, q) for c in order if c in present for q in quantiles]


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: list
    summary: dict
    evaluations: dict = field(default_factory=dict)  # (variant, seed) -> Evaluation


def run_ablation(variants, dataset_config, seeds, base: ModelConfig, jobs=1) -> AblationResult:
    """Train each variant per seed on the same data and compare with the baseline.

    Each seed fixes both the synthetic dataset and the model initialisation,
    so every variant of a seed sees identical data. Deltas are the percent
    change of summed quantile loss (equivalently WQL, as the actuals are
    shared) against the baseline of the same seed; the table reports the
    median over seeds.
    """
    variants = [v.lower() for v in variants]
    for v in variants:
        _variant_delta(v)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    order = [BASELINE] + [v for v in variants if v != BASELINE]
    tasks, keys = [], []
    for v in order:
        for s in seeds:
            tasks.append((variant_config(v, base, s), dataset_config, s))
            keys.append((v, s))
    evals = dict(zip(keys, _run_all(jobs, tasks)))
    cells = _category_keys(evals.values(), base.quantiles)
    rows = []
    for v in order:
        for cat, q in cells:
            wqls, deltas = [], []
            for s in seeds:
                mine = _rows_by_key(evals[(v, s)]).get((cat, q))
                ref = _rows_by_key(evals[(BASELINE, s)]).get((cat, q))
                wqls.append(mine.wql if mine else None)
                deltas.append(relative_delta_pct(mine.ql, ref.ql) if mine and ref else None)
            rows.append(
                {
                    "variant": v,
                    "category": cat,
                    "quantile": float(q),
                    "wql": _median(wqls),
                    "delta_vs_baseline_pct": _median(deltas),
                    "n_seeds": len(seeds),
                }
            )
    summary = {
        "experiment": "ablation",
        "baseline": BASELINE,
        "variants": order,
        "seeds": seeds,
        "per_seed_wql": {
            f"{v}/{s}": {f"{r.category}@{r.quantile}": r.wql for r in evals[(v, s)].rows} for v, s in keys
        },
        "table": rows,
    }
    return AblationResult(rows, summary, evals)


# ---------------------------------------------------------------------------
# head-count sweep
# ---------------------------------------------------------------------------


def head_count_sweep(g_values, dataset_config, seeds, base: ModelConfig, jobs=1):
    """Per-category P50/P90 WQL of the full model for each head count."""
    g_values = [int(g) for g in g_values]
    if not g_values or min(g_values) < 1:
        raise ValueError("head counts must be >= 1")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    full = variant_config("v19", base)
    tasks, keys = [], []
    for g in g_values:
        for s in seeds:
            cfg = _with_seed(full, s)
            cfg.encoder = EncoderConfig(**{**cfg.encoder.to_dict(), "heads": g})
            tasks.append((cfg, dataset_config, s))
            keys.append((g, s))
    evals = dict(zip(keys, _run_all(jobs, tasks)))
    cells = _category_keys(evals.values(), base.quantiles)
    rows = []
    for g in g_values:
        for cat, q in cells:
            vals = [(_rows_by_key(evals[(g, s)]).get((cat, q))) for s in seeds]
            rows.append({"heads": g, "category": cat, "quantile": float(q), "wql": _median([r.wql if r else None for r in vals])})
    summary = {"experiment": "sweep-heads", "heads": g_values, "seeds": seeds, "table": rows}
    return rows, summary


# ---------------------------------------------------------------------------
# sampling-bias study
# ---------------------------------------------------------------------------


def run_bias_sampling_experiment(dataset_config, seeds, base: ModelConfig, cutoffs=(0.8, LOW_CUTOFF), jobs=1):
    """Two trainings per seed that differ only in the sampling cutoff.

    Rows give the over/under-bias masses of both runs (medians over seeds)
    and the median relative change of the second cutoff against the first.
    """
    if len(cutoffs) != 2:
        raise ValueError("exactly two cutoff settings are compared")
    ref_cut, alt_cut = (float(c) for c in cutoffs)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("at least one seed is required")
    tasks, keys = [], []
    for label, cut in (("ref", ref_cut), ("alt", alt_cut)):
        for s in seeds:
            cfg = _with_seed(base, s)
            cfg.train.cutoff_quantile = cut
            tasks.append((cfg, dataset_config, s))
            keys.append((label, s))
    evals = dict(zip(keys, _run_all(jobs, tasks)))
    cells = _category_keys(evals.values(), base.quantiles)
    rows = []
    for cat, q in cells:
        for metric in ("ob", "ub"):
            ref_vals, alt_vals, deltas = [], [], []
            for s in seeds:
                r = _rows_by_key(evals[("ref", s)]).get((cat, q))
                a = _rows_by_key(evals[("alt", s)]).get((cat, q))
                rv = getattr(r, metric) if r else None
                av = getattr(a, metric) if a else None
                ref_vals.append(rv)
                alt_vals.append(av)
                deltas.append(relative_delta_pct(av, rv) if rv is not None and av is not None else None)
            rows.append(
                {
                    "category": cat,
                    "quantile": float(q),
                    "metric": metric,
                    "ref_cutoff": ref_cut,
                    "alt_cutoff": alt_cut,
                    "ref_value": _median(ref_vals),
                    "alt_value": _median(alt_vals),
                    "delta_pct": _median(deltas),
                }
            )
    summary = {"experiment": "bias-sampling", "cutoffs": [ref_cut, alt_cut], "seeds": seeds, "table": rows}
    return rows, summary
