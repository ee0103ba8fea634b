import numpy as np
import pytest

from sparsecast.encoder import EncoderConfig
from sparsecast.model import ModelConfig, TrainConfig
from sparsecast.series_data import DatasetConfig, Panel, TimeSeriesRecord, gen_mixed_magnitude_dataset


def make_record(target, first_listing=-100, sid="x", d_past=1, d_future=1, n_leads=8, d_static=1):
    target = np.asarray(target, dtype=np.float64)
    T = target.shape[0]
    return TimeSeriesRecord(
        sid,
        target,
        np.zeros((T, d_past)),
        np.zeros((T, d_future, n_leads)),
        np.zeros(d_static),
        first_listing,
    )


@pytest.fixture(scope="session")
def small_dataset_config():
    return DatasetConfig(
        counts={"Zero": 24, "Super Slow": 4, "Slow": 6, "Medium": 4, "Fast": 2},
        n_periods=110,
        backtest_periods=20,
    )


@pytest.fixture(scope="session")
def small_panel(small_dataset_config):
    return Panel.from_records(gen_mixed_magnitude_dataset(small_dataset_config, 7))


def tiny_model_config(seed=0, **overrides):
    enc = overrides.pop("encoder", {})
    train = overrides.pop("train", {})
    return ModelConfig(
        train=TrainConfig(seed=seed, **{"epochs": 2, "steps_per_epoch": 4, "batch_size": 16, **train}),
        encoder=EncoderConfig(**{"heads": 2, "channels": 4, "combine_width": 8, **enc}),
        decoder_hidden=overrides.pop("decoder_hidden", 8),
        **overrides,
    )


_ACCEPTANCE = {}


@pytest.fixture()
def acceptance(request):
    """Record one summary line per acceptance criterion; printed after the run."""

    def record(number, passed, detail):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
