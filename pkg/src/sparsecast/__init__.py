"""Sparsity-robust multi-horizon quantile forecasting on numpy."""

from .series_data import (
    HorizonSpec,
    MagnitudeCategory,
    Panel,
    TimeSeriesRecord,
    build_horizon_grid,
    categorize_magnitude,
    gen_mixed_magnitude_dataset,
    gen_poisson_sparse,
    importance_weights,
    is_sparse,
)
from .metrics import bias_decomposition, quantile_loss, report_by_category, wql
from .model import ModelConfig, TrainConfig, TrainedModel, evaluate, train

__version__ = "0.1.0"
