"""Series records, magnitude buckets, sparsity, synthetic generators and CSV I/O."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

DEFAULT_WINDOW = 52


class MagnitudeCategory(enum.Enum):
    SUPER_FAST = "Super Fast"
    FAST = "Fast"
    MEDIUM = "Medium"
    SLOW = "Slow"
    SUPER_SLOW = "Super Slow"
    ZERO = "Zero"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", " ").replace("-", " ")
        for member in cls:
            if member.value.lower() == key or member.name.lower().replace("_", " ") == key:
                return member
        raise ValueError(f"unknown magnitude category {value!r}")


# upper bounds of the half-open buckets (lo, hi], fastest bucket last
CATEGORY_BOUNDS = {
    MagnitudeCategory.ZERO: (0.0, 0.0),
    MagnitudeCategory.SUPER_SLOW: (0.0, 2.0),
    MagnitudeCategory.SLOW: (2.0, 52.0),
    MagnitudeCategory.MEDIUM: (52.0, 365.0),
    MagnitudeCategory.FAST: (365.0, 10000.0),
    MagnitudeCategory.SUPER_FAST: (10000.0, math.inf),
}

CATEGORY_ORDER = list(MagnitudeCategory)


def categorize_magnitude(trailing_agg: float) -> MagnitudeCategory:
    """Velocity bucket of a trailing-window demand aggregate."""
    agg = float(trailing_agg)
    if not agg >= 0.0:
        raise ValueError(f"trailing aggregate must be non-negative, got {trailing_agg!r}")
    if agg == 0.0:
        return MagnitudeCategory.ZERO
    if agg <= 2.0:
        return MagnitudeCategory.SUPER_SLOW
    if agg <= 52.0:
        return MagnitudeCategory.SLOW
    if agg <= 365.0:
        return MagnitudeCategory.MEDIUM
    if agg <= 10000.0:
        return MagnitudeCategory.FAST
    return MagnitudeCategory.SUPER_FAST


def categorize_array(aggs) -> np.ndarray:
    """Vectorised :func:`categorize_magnitude`; returns an object array of categories."""
    aggs = np.asarray(aggs, dtype=np.float64)
    if np.any(~(aggs >= 0.0)):
        raise ValueError("trailing aggregates must be non-negative")
    edges = np.array([0.0, 2.0, 52.0, 365.0, 10000.0])
    ladder = np.array(
        [
            MagnitudeCategory.ZERO,
            MagnitudeCategory.SUPER_SLOW,
            MagnitudeCategory.SLOW,
            MagnitudeCategory.MEDIUM,
            MagnitudeCategory.FAST,
            MagnitudeCategory.SUPER_FAST,
        ],
        dtype=object,
    )
    # side="left" puts boundary values in the lower bucket, matching (lo, hi]
    return ladder[np.searchsorted(edges, aggs, side="left")]


@dataclass
class TimeSeriesRecord:
    id: str
    target: np.ndarray
    past_cov: np.ndarray
    future_cov: np.ndarray
    static_cov: np.ndarray
    first_listing: int = 0

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        T = self.target.shape[0]
        self.past_cov = np.asarray(self.past_cov, dtype=np.float64).reshape(T, -1)
        self.future_cov = np.asarray(self.future_cov, dtype=np.float64)
        if self.future_cov.ndim == 2:
            self.future_cov = self.future_cov[:, None, :]
        self.static_cov = np.asarray(self.static_cov, dtype=np.float64).reshape(-1)
        self.first_listing = int(self.first_listing)
        if self.target.ndim != 1:
            raise ValueError("target must be one-dimensional")
        if self.future_cov.shape[0] != T:
            raise ValueError("future_cov time length differs from target")
        if np.any(self.target < 0) or not np.all(np.isfinite(self.target)):
            raise ValueError(f"series {self.id}: target must be finite and non-negative")
        nz = np.flatnonzero(self.target)
        if nz.size and self.first_listing > nz[0]:
            raise ValueError(f"series {self.id}: first_listing after first sale")

    def __len__(self):
        return self.target.shape[0]


def is_sparse(record: TimeSeriesRecord, fcd: int, window: int = DEFAULT_WINDOW) -> bool:
    """Zero demand over ``(fcd-window, fcd]`` and listed at least ``window`` periods ago."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 0 <= fcd < len(record):
        raise ValueError(f"fcd {fcd} outside history of length {len(record)}")
    lo = max(0, fcd - window + 1)
    if record.target[lo : fcd + 1].sum() != 0.0:
        return False
    return record.first_listing <= fcd - window


@dataclass(frozen=True)
class HorizonSpec:
    pairs: tuple

    def __post_init__(self):
        pairs = tuple((int(lead), int(span)) for lead, span in self.pairs)
        if not pairs:
            raise ValueError("horizon set is empty")
        if len(set(pairs)) != len(pairs):
            raise ValueError("horizon pairs must be unique")
        if any(lead < 1 or span < 1 for lead, span in pairs):
            raise ValueError("lead time and span must be >= 1")
        if not any(span == 1 for _, span in pairs):
            raise ValueError("horizon set needs at least one span-1 pair")
        object.__setattr__(self, "pairs", pairs)

    @property
    def max_span(self) -> int:
        return max(span for _, span in self.pairs)

    @property
    def max_lead(self) -> int:
        """Last period covered by any pair, counted from the forecast date."""
        return max(lead + span - 1 for lead, span in self.pairs)

    @property
    def leads(self) -> np.ndarray:
        return np.array([lead for lead, _ in self.pairs], dtype=np.int64)

    @property
    def spans(self) -> np.ndarray:
        return np.array([span for _, span in self.pairs], dtype=np.int64)

    @property
    def span1_leads(self) -> list:
        return sorted(lead for lead, span in self.pairs if span == 1)

    def __len__(self):
        return len(self.pairs)

    def to_dict(self):
        return {"pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(p) for p in d["pairs"]))


def build_horizon_grid(max_lead: int, spans) -> HorizonSpec:
    """Every ``(lead, span)`` whose window ends within ``max_lead`` periods."""
    spans = sorted(set(int(s) for s in spans))
    if max_lead < 1 or not spans:
        raise ValueError("need max_lead >= 1 and at least one span")
    pairs = [(lead, span) for span in spans for lead in range(1, max_lead + 1) if lead + span - 1 <= max_lead]
    if not pairs:
        raise ValueError(f"no span in {spans} fits within max_lead={max_lead}")
    return HorizonSpec(tuple(pairs))


def gen_poisson_sparse(rate: float, length: int, sparsity: float, seed) -> np.ndarray:
    """Poisson draws with ``floor(sparsity*length)`` positions forced to zero."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    if length < 1 or rate <= 0:
        raise ValueError("need length >= 1 and rate > 0")
    rng = np.random.default_rng(seed)
    y = rng.poisson(rate, size=length).astype(np.float64)
    n_zero = int(math.floor(sparsity * length))
    if n_zero:
        y[rng.choice(length, size=n_zero, replace=False)] = 0.0
    return y


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------


@dataclass
class SamplingWeights:
    weights: np.ndarray
    cutoff_quantile: float
    cutoff_magnitude: float

    def probabilities(self) -> np.ndarray:
        return self.weights / self.weights.sum()


def importance_weights(magnitudes, cutoff_quantile: float) -> SamplingWeights:
    """Magnitude-proportional weights floored at the cutoff-quantile magnitude.

    When the cutoff magnitude is zero but some magnitudes are positive, the
    floor becomes the smallest positive magnitude so every weight stays
    positive. All-zero magnitudes give uniform weights.
    """
    m = np.asarray(magnitudes, dtype=np.float64).reshape(-1)
    if m.size == 0:
        raise ValueError("need at least one magnitude")
    if np.any(m < 0):
        raise ValueError("magnitudes must be non-negative")
    if not 0.0 < cutoff_quantile < 1.0:
        raise ValueError(f"cutoff_quantile must be in (0, 1), got {cutoff_quantile}")
    m_star = float(np.quantile(m, cutoff_quantile))
    if m_star <= 0.0:
        positive = m[m > 0]
        m_star = float(positive.min()) if positive.size else 1.0
    return SamplingWeights(np.maximum(m, m_star), cutoff_quantile, m_star)


# ---------------------------------------------------------------------------
# panels: stacked arrays used by training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class Panel:
    ids: list
    target: np.ndarray  # (N, T)
    past_cov: np.ndarray  # (N, T, d_p)
    future_cov: np.ndarray  # (N, T, d_f, n_leads)
    static_cov: np.ndarray  # (N, d_s)
    first_listing: np.ndarray  # (N,)

    @classmethod
    def from_records(cls, records):
        if not records:
            raise ValueError("no records")
        lengths = {len(r) for r in records}
        if len(lengths) != 1:
            raise ValueError("all series must share one time axis")
        return cls(
            ids=[r.id for r in records],
            target=np.stack([r.target for r in records]),
            past_cov=np.stack([r.past_cov for r in records]),
            future_cov=np.stack([r.future_cov for r in records]),
            static_cov=np.stack([r.static_cov for r in records]),
            first_listing=np.array([r.first_listing for r in records], dtype=np.int64),
        )

    def records(self):
        return [
            TimeSeriesRecord(
                self.ids[i],
                self.target[i],
                self.past_cov[i],
                self.future_cov[i],
                self.static_cov[i],
                int(self.first_listing[i]),
            )
            for i in range(len(self.ids))
        ]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Panel(
            [self.ids[i] for i in idx],
            self.target[idx],
            self.past_cov[idx],
            self.future_cov[idx],
            self.static_cov[idx],
            self.first_listing[idx],
        )

    @property
    def n_series(self):
        return self.target.shape[0]

    @property
    def n_periods(self):
        return self.target.shape[1]

    def trailing_agg(self, window=DEFAULT_WINDOW) -> np.ndarray:
        """(N, T) trailing-window sums of the target."""
        return kernels.trailing_sum(self.target, window)

    def sparse_mask(self, series_idx, fcds, window=DEFAULT_WINDOW) -> np.ndarray:
        """Vectorised :func:`is_sparse` over parallel ``(series, fcd)`` arrays."""
        series_idx = np.asarray(series_idx, dtype=np.int64)
        fcds = np.asarray(fcds, dtype=np.int64)
        agg = self.trailing_agg(window)[series_idx, fcds]
        return (agg == 0.0) & (self.first_listing[series_idx] <= fcds - window)


# ---------------------------------------------------------------------------
# synthetic mixed-magnitude data
# ---------------------------------------------------------------------------

# agg ranges sampled (log-uniform) for each category's trailing 52-period sum
_CATEGORY_AGG_RANGE = {
    MagnitudeCategory.SUPER_FAST: (12000.0, 30000.0),
    MagnitudeCategory.FAST: (450.0, 8000.0),
    MagnitudeCategory.MEDIUM: (65.0, 300.0),
    MagnitudeCategory.SLOW: (4.0, 44.0),
    MagnitudeCategory.SUPER_SLOW: (1.0, 1.6),
}


@dataclass
class DatasetConfig:
    """Counts per category plus the shape of the synthetic panel.

    ``counts`` maps category names to how many series should sit in that
    bucket at the reference date (the last training period). ``new_products``
    adds listings launched inside the trailing window that have not sold yet.
    """

    counts: dict = field(default_factory=lambda: {"Zero": 60, "Super Slow": 10, "Slow": 15, "Medium": 10, "Fast": 4, "Super Fast": 1})
    new_products: int = 0
    n_periods: int = 156
    backtest_periods: int = 26
    max_lead: int = 8
    d_past: int = 2
    d_static: int = 3
    window: int = DEFAULT_WINDOW
    zero_event_prob: tuple = (0.002, 0.03)
    promo_prob: float = 0.05
    promo_lift: float = 2.0

    def __post_init__(self):
        counts = {MagnitudeCategory.parse(k): int(v) for k, v in dict(self.counts).items()}
        if any(v < 0 for v in counts.values()):
            raise ValueError("category counts must be non-negative")
        if sum(counts.values()) + self.new_products <= 0:
            raise ValueError("dataset config requests no series")
        self.counts = counts
        self.zero_event_prob = tuple(self.zero_event_prob)
        if self.reference_t < self.window:
            raise ValueError("not enough periods before the reference date")

    @property
    def reference_t(self) -> int:
        return self.n_periods - self.backtest_periods - 1

    @property
    def d_future(self) -> int:
        return 3

    def to_dict(self):
        return {
            "counts": {k.value: v for k, v in self.counts.items()},
            "new_products": self.new_products,
            "n_periods": self.n_periods,
            "backtest_periods": self.backtest_periods,
            "max_lead": self.max_lead,
            "d_past": self.d_past,
            "d_static": self.d_static,
            "window": self.window,
            "zero_event_prob": list(self.zero_event_prob),
            "promo_prob": self.promo_prob,
            "promo_lift": self.promo_lift,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _calendar(t):
    phase = 2.0 * np.pi * np.asarray(t, dtype=np.float64) / 52.0
    return np.sin(phase), np.cos(phase)


def _draw_active(rng, rate, T, promo, cfg):
    season_amp = rng.uniform(0.0, 0.4)
    season_phase = rng.uniform(0.0, 52.0)
    season = 1.0 + season_amp * np.sin(2.0 * np.pi * (np.arange(T) + season_phase) / 52.0)
    lam = rate * season * np.where(promo, cfg.promo_lift, 1.0)
    # gamma-Poisson keeps fast series overdispersed
    shape = 4.0
    lam = rng.gamma(shape, lam / shape)
    return rng.poisson(lam).astype(np.float64)


def _draw_dormant(rng, T, cfg):
    p = math.exp(rng.uniform(math.log(cfg.zero_event_prob[0]), math.log(cfg.zero_event_prob[1])))
    events = rng.random(T) < p
    sizes = 1.0 + rng.poisson(rng.uniform(0.0, 3.0), size=T)
    return np.where(events, sizes, 0.0)


def gen_mixed_magnitude_dataset(config: DatasetConfig, seed) -> list:
    """Synthetic panel whose reference-date buckets follow ``config.counts``.

    Active series are gamma-Poisson with yearly seasonality and known
    promotions; zero-bucket series are dormant with rare demand events and
    their trailing window at the reference date is held at zero.
    """
    if not isinstance(config, DatasetConfig):
        config = DatasetConfig(**config)
    rng = np.random.default_rng(seed)
    T = config.n_periods
    ref = config.reference_t
    lo = ref - config.window + 1
    n_leads = config.max_lead

    plan = [(cat, k) for cat in CATEGORY_ORDER for k in range(config.counts.get(cat, 0))]
    plan += [("new", k) for k in range(config.new_products)]

    records = []
    # calendar for periods t+1 .. t+n_leads covers indices up to T-1+n_leads
    cal_sin, cal_cos = _calendar(np.arange(T + n_leads))
    for n, (cat, _) in enumerate(plan):
        promo_full = rng.random(T + n_leads) < config.promo_prob
        promo = promo_full[:T]
        first_listing = -int(rng.integers(1, 200))
        if cat == "new":
            first_listing = int(rng.integers(lo, ref + 1))
            rate = math.exp(rng.uniform(math.log(0.1), math.log(5.0)))
            y = _draw_active(rng, rate, T, promo, config)
            y[: ref + 1] = 0.0
            log_level = math.log(rate)
        elif cat is MagnitudeCategory.ZERO:
            y = _draw_dormant(rng, T, config)
            y[lo : ref + 1] = 0.0
            log_level = math.log(1e-3)
        else:
            a_lo, a_hi = _CATEGORY_AGG_RANGE[cat]
            for _attempt in range(500):
                agg = math.exp(rng.uniform(math.log(a_lo), math.log(a_hi)))
                rate = agg / config.window
                y = _draw_active(rng, rate, T, promo, config)
                if categorize_magnitude(y[lo : ref + 1].sum()) is cat:
                    break
            else:  # pragma: no cover - bucket ranges are chosen so this is unreachable
                raise RuntimeError(f"could not realise a {cat.value} series")
            log_level = math.log(rate)

        past = np.empty((T, config.d_past))
        past[:, 0] = promo
        if config.d_past > 1:
            past[:, 1:] = np.cumsum(rng.normal(0.0, 0.05, size=(T, config.d_past - 1)), axis=0)
        fut = np.empty((T, config.d_future, n_leads))
        t_idx = np.arange(T)[:, None] + np.arange(1, n_leads + 1)[None, :]
        fut[:, 0, :] = cal_sin[t_idx]
        fut[:, 1, :] = cal_cos[t_idx]
        fut[:, 2, :] = promo_full[t_idx]
        static = rng.normal(0.0, 1.0, size=config.d_static)
        if config.d_static:
            static[0] = log_level / 5.0 + rng.normal(0.0, 0.1)
        records.append(TimeSeriesRecord(f"s{n:05d}", y, past, fut, static, first_listing))
    return records


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

SERIES_FILE = "series.csv"
FUTURE_FILE = "future.csv"


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def write_dataset_csv(records, directory) -> None:
    """Write ``series.csv`` (one row per series/period) and ``future.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = list(records)
    dp = records[0].past_cov.shape[1]
    ds = records[0].static_cov.shape[0]
    df = records[0].future_cov.shape[1]
    with open(directory / SERIES_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "t", "y", "first_listing"] + [f"p_{j}" for j in range(dp)] + [f"s_{j}" for j in range(ds)])
        for r in records:
            static = [_fmt(v) for v in r.static_cov]
            for t in range(len(r)):
                w.writerow([r.id, t, _fmt(r.target[t]), r.first_listing] + [_fmt(v) for v in r.past_cov[t]] + static)
    with open(directory / FUTURE_FILE, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "t", "horizon_t"] + [f"f_{j}" for j in range(df)])
        for r in records:
            n_leads = r.future_cov.shape[2]
            for t in range(len(r)):
                for h in range(n_leads):
                    w.writerow([r.id, t, h + 1] + [_fmt(v) for v in r.future_cov[t, :, h]])


def read_dataset_csv(directory) -> list:
    directory = Path(directory)
    rows = {}
    order = []
    with open(directory / SERIES_FILE, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        p_cols = [i for i, h in enumerate(header) if h.startswith("p_")]
        s_cols = [i for i, h in enumerate(header) if h.startswith("s_")]
        for row in reader:
            sid = row[0]
            if sid not in rows:
                rows[sid] = {"t": [], "y": [], "p": [], "first": int(row[3]), "s": [float(row[i]) for i in s_cols]}
                order.append(sid)
            entry = rows[sid]
            entry["t"].append(int(row[1]))
            entry["y"].append(float(row[2]))
            entry["p"].append([float(row[i]) for i in p_cols])
    fut = {}
    future_path = directory / FUTURE_FILE
    if future_path.exists():
        with open(future_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            f_cols = [i for i, h in enumerate(header) if h.startswith("f_")]
            for row in reader:
                fut.setdefault(row[0], []).append((int(row[1]), int(row[2]), [float(row[i]) for i in f_cols]))
    records = []
    for sid in order:
        e = rows[sid]
        perm = np.argsort(e["t"], kind="stable")
        T = len(perm)
        entries = fut.get(sid, [])
        n_leads = max((h for _, h, _ in entries), default=1)
        df = len(entries[0][2]) if entries else 0
        F = np.zeros((T, df, n_leads))
        for t, h, vals in entries:
            F[t, :, h - 1] = vals
        records.append(
            TimeSeriesRecord(
                sid,
                np.asarray(e["y"])[perm],
                np.asarray(e["p"]).reshape(T, -1)[perm],
                F,
                np.asarray(e["s"]),
                e["first"],
            )
        )
    return records
