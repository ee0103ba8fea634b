"""Forecaster assembly: routing, main arm, sparse arm, training and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diff_core as ad
from . import kernels
from .encoder import EncoderConfig, init_encoder, multi_head_encode, peak_filter
from .metrics import report_by_category
from .series_data import DEFAULT_WINDOW, HorizonSpec, Panel, build_horizon_grid, categorize_array, importance_weights
from .sparse_arm import SparseArmConfig, init_sparse_arm, sparse_forecast

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    seed: int
    lr: float = 3e-3
    batch_size: int = 128
    epochs: int = 20
    steps_per_epoch: int = 50
    cutoff_quantile: float = 0.8
    min_history: int = 13
    backtest_periods: int = 26
    lr_schedule: str = "cosine"  # or "constant"
    lr_floor: float = 0.05  # final lr as a fraction of ``lr`` under the cosine schedule

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("a training seed is mandatory")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("invalid training parameters")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError("lr_floor must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        total = self.epochs * self.steps_per_epoch
        if self.lr_schedule == "constant" or total <= 1:
            return self.lr
        frac = step / (total - 1)
        return self.lr * (self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class ModelConfig:
    train: TrainConfig
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sparse: SparseArmConfig = field(default_factory=SparseArmConfig)
    use_sparse_arm: bool = True
    horizon: HorizonSpec = field(default_factory=lambda: build_horizon_grid(8, [1, 2, 4, 8]))
    quantiles: tuple = (0.5, 0.9)
    context_length: int = 64
    window: int = DEFAULT_WINDOW
    decoder_hidden: int = 32
    static_embed: int = 4
    level_scaling: bool = True

    def __post_init__(self):
        q = tuple(float(v) for v in self.quantiles)
        if not q or list(q) != sorted(q) or len(set(q)) != len(q) or not all(0 < v < 1 for v in q):
            raise ValueError("quantiles must be sorted, unique and inside (0, 1)")
        self.quantiles = q
        if self.context_length < self.sparse.context:
            raise ValueError("context_length must cover the sparse-arm context")
        if self.window < 1:
            raise ValueError("routing window must be >= 1")

    def to_dict(self):
        return {
            "train": asdict(self.train),
            "encoder": self.encoder.to_dict(),
            "sparse": self.sparse.to_dict(),
            "use_sparse_arm": self.use_sparse_arm,
            "horizon": self.horizon.to_dict(),
            "quantiles": list(self.quantiles),
            "context_length": self.context_length,
            "window": self.window,
            "decoder_hidden": self.decoder_hidden,
            "static_embed": self.static_embed,
            "level_scaling": self.level_scaling,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "train" not in d or "seed" not in d["train"]:
            raise ValueError("model config needs train.seed")
        train = TrainConfig(**d.pop("train"))
        encoder = EncoderConfig(**d.pop("encoder", {}))
        sparse = SparseArmConfig(**d.pop("sparse", {}))
        horizon = d.pop("horizon", None)
        if horizon is None:
            horizon = build_horizon_grid(8, [1, 2, 4, 8])
        elif "pairs" in horizon:
            horizon = HorizonSpec.from_dict(horizon)
        else:
            horizon = build_horizon_grid(horizon["max_lead"], horizon["spans"])
        return cls(train=train, encoder=encoder, sparse=sparse, horizon=horizon, **d)


def read_config_dict(path) -> dict:
    """Parse a JSON or TOML config file into a dict."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def load_config(path, seed=None) -> ModelConfig:
    """Read a model config from JSON or TOML; ``seed`` overrides ``train.seed``.

    A file with a ``model`` table (the experiment layout) is also accepted.
    """
    d = read_config_dict(path)
    d = dict(d.get("model", d))
    if seed is not None:
        d["train"] = {**d.get("train", {}), "seed": int(seed)}
    return ModelConfig.from_dict(d)


# ---------------------------------------------------------------------------
# feature preparation
# ---------------------------------------------------------------------------


class PreparedPanel:
    """Panel-level arrays computed once: filtered target, features, trailing sums."""

    def __init__(self, panel: Panel, config: ModelConfig):
        self.panel = panel
        self.config = config
        enc = config.encoder
        self.filtered = peak_filter(panel.target, enc.peak_filter, enc.peak_multiple, enc.peak_window, enc.peak_min_level)
        N, T = panel.target.shape
        dp = panel.past_cov.shape[2]
        # main-arm features: log1p(filtered target), past covariates, pad flag
        self.main_features = np.concatenate(
            [np.log1p(self.filtered)[..., None], panel.past_cov, np.zeros((N, T, 1))], axis=-1
        )
        self.sparse_features = np.concatenate([np.log1p(panel.target)[..., None], panel.past_cov], axis=-1)
        self.trailing = kernels.trailing_sum(panel.target, config.window)
        self.level_sum = kernels.trailing_sum(self.filtered, config.window)
        n_leads = panel.future_cov.shape[3]
        if n_leads < config.horizon.max_lead:
            raise ValueError(f"future covariates cover {n_leads} leads but the horizon needs {config.horizon.max_lead}")
        self.pool = np.zeros((n_leads, len(config.horizon)))
        for h, (lead, span) in enumerate(config.horizon.pairs):
            self.pool[lead - 1 : lead - 1 + span, h] = 1.0 / span
        self.n_main_features = 2 + dp
        self.n_sparse_features = 1 + dp

    def sparse_mask(self, series_idx, fcds):
        agg = self.trailing[series_idx, fcds]
        return (agg == 0.0) & (self.panel.first_listing[series_idx] <= fcds - self.config.window)

    def magnitudes(self, series_idx, fcds):
        return self.trailing[series_idx, fcds]

    def _window(self, arr, series_idx, fcds, length, pad_value=None):
        offs = np.arange(-length + 1, 1)
        idx = fcds[:, None] + offs[None, :]
        valid = idx >= 0
        out = arr[series_idx[:, None], np.maximum(idx, 0)]
        out = np.where(valid[..., None] if out.ndim == 3 else valid, out, 0.0)
        return out, valid

    def batch(self, series_idx, fcds):
        series_idx = np.asarray(series_idx, dtype=np.int64)
        fcds = np.asarray(fcds, dtype=np.int64)
        cfg = self.config
        x_main, valid = self._window(self.main_features, series_idx, fcds, cfg.context_length)
        x_main[..., -1] = (~valid).astype(np.float64)
        x_sparse, _ = self._window(self.sparse_features, series_idx, fcds, cfg.sparse.context)
        hist, _ = self._window(self.filtered, series_idx, fcds, cfg.context_length)
        fut = np.einsum("ndl,lh->nhd", self.panel.future_cov[series_idx, fcds], self.pool)
        level = 1.0 + self.level_sum[series_idx, fcds] / cfg.window
        return Batch(
            series_idx=series_idx,
            fcds=fcds,
            x_main=x_main,
            x_sparse=x_sparse,
            history=hist,
            future=fut,
            static=self.panel.static_cov[series_idx],
            level=level,
            sparse=self.sparse_mask(series_idx, fcds),
        )

    def targets(self, series_idx, fcds):
        h = self.config.horizon
        return kernels.span_targets(self.panel.target, fcds, series_idx, h.leads, h.spans)


@dataclass
class Batch:
    series_idx: np.ndarray
    fcds: np.ndarray
    x_main: np.ndarray
    x_sparse: np.ndarray
    history: np.ndarray
    future: np.ndarray
    static: np.ndarray
    level: np.ndarray
    sparse: np.ndarray

    def take(self, rows):
        return Batch(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))

    def __len__(self):
        return self.series_idx.shape[0]


# ---------------------------------------------------------------------------
# parameters and forward pass
# ---------------------------------------------------------------------------


def init_params(config: ModelConfig, n_main_features, n_sparse_features, d_future, d_static) -> dict:
    rng = np.random.default_rng(config.train.seed)
    params = init_encoder(rng, config.encoder, n_main_features)
    H, Q = len(config.horizon), len(config.quantiles)
    hid, E = config.decoder_hidden, config.static_embed
    params["dec.static.w"], params["dec.static.b"] = ad.init_dense(rng, d_static, E) if d_static else (np.zeros((0, E)), np.zeros(E))
    params["dec.enc.w"], _ = ad.init_dense(rng, config.encoder.combine_width, hid)
    params["dec.fut.w"], _ = ad.init_dense(rng, d_future, hid) if d_future else (np.zeros((0, hid)), None)
    params["dec.stat.w"], _ = ad.init_dense(rng, E, hid)
    params["dec.horizon.w"] = rng.normal(0.0, 0.1, size=(H, hid))
    params["dec.hidden.b"] = np.zeros(hid)
    params["dec.out.w"], params["dec.out.b"] = ad.init_dense(rng, hid, Q, scale=0.01)
    if config.use_sparse_arm:
        params.update(init_sparse_arm(rng, config.sparse, n_sparse_features))
    return params


def decode(encoding, future, static, params, config: ModelConfig, level=None):
    """Span-normalised quantile forecasts (B, H, Q) from the fcd encoding.

    Non-crossing by construction: the lowest quantile is ``softplus(z_0)``
    and each higher one adds ``softplus(z_j)``. With ``level`` the result is
    multiplied by that per-series positive scale.
    """
    enc = ad.as_tensor(encoding)
    future = np.asarray(future, dtype=np.float64)
    H = len(config.horizon)
    if future.ndim != 3 or future.shape[1] != H:
        raise ValueError(f"future covariates must be (batch, {H}, d_f), got {future.shape}")
    B = enc.shape[0]
    se = ad.relu(ad.linear(np.asarray(static, dtype=np.float64), params["dec.static.w"], params["dec.static.b"]))
    row = ad.add(ad.matmul(enc, params["dec.enc.w"]), ad.matmul(se, params["dec.stat.w"]))
    hidden = ad.add(ad.reshape(row, (B, 1, -1)), ad.matmul(future, params["dec.fut.w"]))
    hidden = ad.add(hidden, params["dec.horizon.w"])
    hidden = ad.relu(ad.add(hidden, params["dec.hidden.b"]))
    z = ad.linear(hidden, params["dec.out.w"], params["dec.out.b"])
    out = ad.cumsum(ad.softplus(z), axis=-1)
    if level is not None:
        out = ad.mul(out, np.asarray(level, dtype=np.float64).reshape(B, 1, 1))
    return out


def main_arm(batch: Batch, params, config: ModelConfig):
    """Normalised (per period of span) forecasts from the convolutional arm."""
    enc = multi_head_encode(batch.x_main, params, config.encoder, history=batch.history, last_only=True)
    return decode(enc, batch.future, batch.static, params, config, level=batch.level if config.level_scaling else None)


def route(batch_sparse_mask):
    """Row indices of the (sparse, non-sparse) partition."""
    mask = np.asarray(batch_sparse_mask, dtype=bool)
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def forward(batch: Batch, params, config: ModelConfig, routing=True):
    """Raw-unit quantile forecasts (B, H, Q) and the sparse mask that was used.

    With ``routing=False`` (or no sparse arm) every row goes through the
    main arm.
    """
    spans = config.horizon.spans.astype(np.float64)[None, :, None]
    mask = batch.sparse if (routing and config.use_sparse_arm) else np.zeros(len(batch), dtype=bool)
    sparse_rows, dense_rows = route(mask)
    out = np.zeros((len(batch), len(config.horizon), len(config.quantiles)))
    if dense_rows.size:
        out[dense_rows] = main_arm(batch.take(dense_rows), params, config).data * spans
    if sparse_rows.size:
        sub = batch.take(sparse_rows)
        out[sparse_rows] = sparse_forecast(sub.x_sparse, config.horizon, config.quantiles, config.sparse, params).data
    return out, mask


def batch_loss(batch: Batch, targets, params, config: ModelConfig):
    """Multi-quantile loss on span-normalised units, averaged over rows."""
    spans = config.horizon.spans.astype(np.float64)[None, :, None]
    q = np.asarray(config.quantiles)[None, None, :]
    y = np.asarray(targets, dtype=np.float64)[..., None] / spans
    mask = batch.sparse if config.use_sparse_arm else np.zeros(len(batch), dtype=bool)
    sparse_rows, dense_rows = route(mask)
    total = None
    if dense_rows.size:
        pred = main_arm(batch.take(dense_rows), params, config)
        total = ad.tsum(ad.pinball(pred, y[dense_rows], q))
    if sparse_rows.size:
        sub = batch.take(sparse_rows)
        pred = sparse_forecast(sub.x_sparse, config.horizon, config.quantiles, config.sparse, params)
        part = ad.tsum(ad.pinball(ad.mul(pred, 1.0 / spans), y[sparse_rows], q))
        total = part if total is None else ad.add(total, part)
    return ad.mul(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict
    log: list = field(default_factory=list)

    def save(self, path):
        ad.save_checkpoint(path, self.params, {"config": self.config.to_dict(), "log": self.log})

    @classmethod
    def load(cls, path):
        params, meta = ad.load_checkpoint(path)
        return cls(ModelConfig.from_dict(meta["config"]), params, list(meta.get("log", [])))

    def predict(self, panel: Panel, series_idx, fcds, routing=True, chunk=2048):
        prep = PreparedPanel(panel, self.config)
        return predict_prepared(prep, self.params, self.config, series_idx, fcds, routing, chunk)


def predict_prepared(prep, params, config, series_idx, fcds, routing=True, chunk=2048):
    series_idx = np.asarray(series_idx, dtype=np.int64)
    fcds = np.asarray(fcds, dtype=np.int64)
    outs, masks = [], []
    for start in range(0, series_idx.shape[0], chunk):
        b = prep.batch(series_idx[start : start + chunk], fcds[start : start + chunk])
        out, mask = forward(b, params, config, routing)
        outs.append(out)
        masks.append(mask)
    if not outs:
        return np.zeros((0, len(config.horizon), len(config.quantiles))), np.zeros(0, dtype=bool)
    return np.concatenate(outs), np.concatenate(masks)


def training_pairs(panel: Panel, config: ModelConfig):
    """Candidate (series, fcd) pairs whose targets end before the backtest."""
    ref = panel.n_periods - config.train.backtest_periods - 1
    last = ref - config.horizon.max_lead
    first = config.train.min_history
    if last < first:
        raise ValueError("not enough history for any training forecast date")
    fcd_range = np.arange(first, last + 1)
    s, t = np.meshgrid(np.arange(panel.n_series), fcd_range, indexing="ij")
    return s.ravel(), t.ravel()


def backtest_pairs(panel: Panel, config: ModelConfig, stride=1):
    ref = panel.n_periods - config.train.backtest_periods - 1
    last = panel.n_periods - 1 - config.horizon.max_lead
    fcd_range = np.arange(ref, last + 1, stride)
    if fcd_range.size == 0:
        raise ValueError("backtest window shorter than the horizon")
    s, t = np.meshgrid(np.arange(panel.n_series), fcd_range, indexing="ij")
    return s.ravel(), t.ravel()


def train(panel: Panel, config: ModelConfig, init=None, progress=None) -> TrainedModel:
    """Adam on importance-sampled (series, fcd) pairs; deterministic given the seed."""
    if panel.n_series == 0:
        raise ValueError("empty dataset")
    tc = config.train
    prep = PreparedPanel(panel, config)
    params = init or init_params(
        config, prep.n_main_features, prep.n_sparse_features, panel.future_cov.shape[2], panel.static_cov.shape[1]
    )
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    s_all, t_all = training_pairs(panel, config)
    weights = importance_weights(prep.magnitudes(s_all, t_all), tc.cutoff_quantile)
    cdf = np.cumsum(weights.probabilities())
    cdf /= cdf[-1]
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 1]))
    state = ad.AdamState(lr=tc.lr)
    history = []
    for epoch in range(tc.epochs):
        losses = []
        for step in range(tc.steps_per_epoch):
            pick = np.minimum(np.searchsorted(cdf, rng.random(tc.batch_size), side="right"), cdf.size - 1)
            si, ti = s_all[pick], t_all[pick]
            batch = prep.batch(si, ti)
            y = prep.targets(si, ti)
            tensors = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
            with ad.Tape() as tape:
                loss = batch_loss(batch, y, tensors, config)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise ad.TrainingDivergence(f"non-finite loss at epoch {epoch}, step {step}")
                tape.backward(loss)
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            state.lr = tc.lr_at(epoch * tc.steps_per_epoch + step)
            try:
                ad.adam_step(params, grads, state)
            except ad.TrainingDivergence as exc:
                raise ad.TrainingDivergence(f"epoch {epoch}, step {step}: {exc}") from exc
            losses.append(value)
        history.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch, history[-1])
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    return TrainedModel(config, params, history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Evaluation:
    rows: list
    actuals: np.ndarray
    forecasts: np.ndarray
    categories: np.ndarray
    sparse: np.ndarray
    series_idx: np.ndarray
    fcds: np.ndarray


def evaluate(model: TrainedModel, panel: Panel, baseline=None, routing=True, stride=1) -> Evaluation:
    """Forecast every backtest (series, fcd) and report WQL/bias by category."""
    cfg = model.config
    prep = PreparedPanel(panel, cfg)
    s, t = backtest_pairs(panel, cfg, stride)
    fc, mask = predict_prepared(prep, model.params, cfg, s, t, routing)
    y = prep.targets(s, t)
    cats = categorize_array(prep.magnitudes(s, t))
    forecasts = {q: fc[..., j] for j, q in enumerate(cfg.quantiles)}
    rows = report_by_category(y, forecasts, cats, baseline=baseline)
    return Evaluation(rows, y, fc, cats, mask, s, t)
