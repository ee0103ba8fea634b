import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsecast.metrics import (
    REPORT_COLUMNS,
    bias_decomposition,
    crps_normal,
    loss_weight_audit,
    quantile_loss,
    read_report,
    report_by_category,
    wql,
    write_report,
)
from sparsecast.series_data import MagnitudeCategory as M


def pinball_oracle(y, f, q):
    return q * (y - f) if y >= f else (1 - q) * (f - y)


@pytest.mark.parametrize("y, f, q, expected", [(10, 8, 0.9, 1.8), (5, 9, 0.5, 2.0), (3.3, 3.3, 0.7, 0.0)])
def test_quantile_loss_examples(y, f, q, expected):
    assert quantile_loss(y, f, q) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("q", [0.0, 1.0, -0.2, 1.5])
def test_quantile_loss_rejects_bad_q(q):
    with pytest.raises(ValueError):
        quantile_loss(1.0, 2.0, q)


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4), st.floats(0.01, 0.99))
def test_quantile_loss_matches_oracle(y, f, q):
    assert quantile_loss(y, f, q) == pytest.approx(pinball_oracle(y, f, q), rel=1e-12, abs=1e-12)
    assert quantile_loss(y, f, q) >= 0


@settings(max_examples=40)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=25), st.sampled_from([0.1, 0.5, 0.9]))
def test_constant_minimiser_is_empirical_quantile(sample, q):
    y = np.array(sample, dtype=float)
    grid = np.linspace(-1, 31, 641)
    losses = [quantile_loss(y, np.full_like(y, c), q).sum() for c in grid]
    best = losses[int(np.argmin(losses))]
    # any q-quantile of the sample (inverted-cdf definition) attains the minimum
    qv = float(np.quantile(y, q, method="inverted_cdf"))
    assert quantile_loss(y, np.full_like(y, qv), q).sum() <= best + 1e-9


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.0, 1.0), st.floats(0.05, 0.95))
def test_quantile_loss_convex_in_forecast(a, b, lam, q):
    y = 1.7
    mid = lam * a + (1 - lam) * b
    assert quantile_loss(y, mid, q) <= lam * quantile_loss(y, a, q) + (1 - lam) * quantile_loss(y, b, q) + 1e-9


def test_wql_single_point():
    assert wql([10.0], [8.0], 0.9) == pytest.approx(0.18, abs=1e-15)


def test_wql_perfect_forecast():
    y = np.array([1.0, 4.0, 0.0, 9.0])
    assert wql(y, y, 0.5) == 0.0


def test_wql_undefined_when_no_demand():
    assert wql([0.0, 0.0], [1.0, 2.0], 0.9) is None


def test_wql_selection():
    y = np.array([10.0, 0.0, 5.0])
    f = np.array([8.0, 3.0, 9.0])
    sel = np.array([True, False, False])
    assert wql(y, f, 0.9, selection=sel) == pytest.approx(0.18)


amount = st.integers(0, 10**6).map(lambda v: v / 1000.0)


@given(st.lists(st.tuples(amount, amount), min_size=1, max_size=20), st.floats(0.01, 100.0), st.floats(0.05, 0.95))
def test_wql_scale_invariant(pairs, c, q):
    y = np.array([p[0] for p in pairs])
    f = np.array([p[1] for p in pairs])
    base = wql(y, f, q)
    scaled = wql(c * y, c * f, q)
    if base is None:
        assert scaled is None or y.sum() == 0
    else:
        assert scaled == pytest.approx(base, rel=1e-9)


def test_bias_examples():
    assert bias_decomposition([10.0], [8.0], 0.9) == (0.0, 2.0)
    assert bias_decomposition([5.0], [9.0], 0.9) == (4.0, 0.0)
    ob, ub = bias_decomposition([10.0, 5.0], [8.0, 9.0], 0.9)
    assert (ob, ub) == (4.0, 2.0)
    ql = quantile_loss(np.array([10.0, 5.0]), np.array([8.0, 9.0]), 0.9).sum()
    assert ql == pytest.approx(0.9 * ub + 0.1 * ob) == pytest.approx(2.2)


@given(
    st.lists(st.tuples(st.floats(0, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30),
    st.floats(0.01, 0.99),
)
def test_bias_identity(pairs, q):
    y = np.array([p[0] for p in pairs])
    f = np.array([p[1] for p in pairs])
    ob, ub = bias_decomposition(y, f)
    ql = float(np.sum(quantile_loss(y, f, q)))
    assert ql == pytest.approx(q * ub + (1 - q) * ob, rel=1e-12, abs=1e-9)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        wql([1.0, 2.0], [1.0], 0.5)


# --- magnitude-bias audit ---------------------------------------------------------


def test_audit_two_series_pinball_ratio():
    res = loss_weight_audit([[1.0], [100.0]], r=0.1, loss="pinball", q=0.9)
    assert res.series_loss[1] / res.series_loss[0] == pytest.approx(100.0, rel=1e-12)
    assert res.g == "identity"


def test_audit_two_series_mse_ratio():
    res = loss_weight_audit([[1.0], [100.0]], r=0.1, loss="mse")
    assert res.series_loss[1] / res.series_loss[0] == pytest.approx(1e4, rel=1e-12)
    assert res.g == "square"


def test_audit_two_series_crps_ratio():
    res = loss_weight_audit([[1.0], [100.0]], r=0.1, loss="crps", kappa=0.1)
    assert res.series_loss[1] / res.series_loss[0] == pytest.approx(100.0, rel=1e-9)


@pytest.mark.parametrize("loss", ["pinball", "mse", "crps"])
def test_audit_deviation_tiny(loss):
    rng = np.random.default_rng(0)
    series = [rng.gamma(2.0, 10.0 ** rng.uniform(-1, 3), size=rng.integers(5, 30)) + 1e-3 for _ in range(50)]
    assert loss_weight_audit(series, r=0.1, loss=loss).max_rel_deviation < 1e-9


def test_audit_rejects_zero_target():
    with pytest.raises(ValueError):
        loss_weight_audit([[1.0, 0.0]], r=0.1)


def test_audit_rejects_zero_r_and_unknown_loss():
    with pytest.raises(ValueError):
        loss_weight_audit([[1.0]], r=0.0)
    with pytest.raises(ValueError):
        loss_weight_audit([[1.0]], loss="mae")


def test_crps_normal_against_numeric_integral():
    y, mu, sigma = 1.3, 0.4, 0.7
    from scipy.integrate import quad
    from scipy.stats import norm

    val, _ = quad(lambda x: (norm.cdf(x, mu, sigma) - (x >= y)) ** 2, -20, 20, points=[y], limit=200)
    assert float(crps_normal(y, mu, sigma)) == pytest.approx(val, rel=1e-7)


# --- category reports ----------------------------------------------------------------


def test_only_zero_category_gives_one_row_plus_all():
    y = np.array([[0.0, 1.0], [2.0, 0.0]])
    f = {0.5: np.ones_like(y)}
    rows = report_by_category(y, f, [M.ZERO, M.ZERO])
    assert [r.category for r in rows] == ["Zero", "All"]
    a, b = rows
    assert (a.ql, a.ob, a.ub, a.sum_y, a.wql) == (b.ql, b.ob, b.ub, b.sum_y, b.wql)


def test_self_baseline_zero_deltas():
    rng = np.random.default_rng(1)
    y = rng.poisson(2, size=(12, 3)).astype(float)
    f = {0.5: y + 1, 0.9: y + 2}
    cats = [M.SLOW] * 6 + [M.FAST] * 6
    base = report_by_category(y, f, cats)
    rows = report_by_category(y, f, cats, baseline=base)
    assert all(r.delta_vs_baseline_pct == 0.0 for r in rows)


def test_three_series_fixture_brute_force():
    y = np.array([[4.0, 0.0], [0.0, 0.0], [100.0, 120.0]])
    p50 = np.array([[3.0, 1.0], [0.5, 0.0], [110.0, 100.0]])
    p90 = np.array([[6.0, 2.0], [1.0, 1.0], [130.0, 140.0]])
    cats = [M.SLOW, M.ZERO, M.MEDIUM]
    rows = {(r.category, r.quantile): r for r in report_by_category(y, {0.5: p50, 0.9: p90}, cats)}

    def brute(rows_idx, f, q):
        ql = ob = ub = sy = 0.0
        for i in rows_idx:
            for h in range(2):
                ql += pinball_oracle(y[i, h], f[i, h], q)
                ob += max(f[i, h] - y[i, h], 0.0)
                ub += max(y[i, h] - f[i, h], 0.0)
                sy += y[i, h]
        return ql, ob, ub, sy

    groups = {"Slow": [0], "Zero": [1], "Medium": [2], "All": [0, 1, 2]}
    for name, idx in groups.items():
        for q, f in ((0.5, p50), (0.9, p90)):
            ql, ob, ub, sy = brute(idx, f, q)
            r = rows[(name, q)]
            assert r.ql == pytest.approx(ql, rel=1e-12)
            assert r.ob == pytest.approx(ob, rel=1e-12)
            assert r.ub == pytest.approx(ub, rel=1e-12)
            assert r.sum_y == sy
            if sy > 0:
                assert r.wql == pytest.approx(ql / sy, rel=1e-12)
            else:
                assert r.wql is None
    assert rows[("Zero", 0.9)].wql is None
    assert rows[("Zero", 0.9)].ob == pytest.approx(2.0)


def test_report_identity_holds_per_row():
    rng = np.random.default_rng(5)
    y = rng.poisson(3, size=(30, 4)).astype(float)
    forecasts = {q: rng.gamma(2.0, 2.0, size=y.shape) for q in (0.1, 0.5, 0.9)}
    cats = rng.choice([M.ZERO, M.SLOW, M.MEDIUM], size=30)
    for r in report_by_category(y, forecasts, cats):
        assert r.ql == pytest.approx(r.quantile * r.ub + (1 - r.quantile) * r.ob, rel=1e-12)


def test_report_category_count_must_match():
    with pytest.raises(ValueError):
        report_by_category(np.zeros((2, 1)), {0.5: np.zeros((2, 1))}, [M.ZERO])


def test_report_csv_json_round_trip(tmp_path):
    y = np.array([[0.0], [3.0]])
    f = {0.9: np.array([[1.0], [2.0]])}
    rows = report_by_category(y, f, [M.ZERO, M.SLOW])
    write_report(rows, tmp_path / "r.csv", tmp_path / "r.json")
    text = (tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()
    assert text[0] == ",".join(REPORT_COLUMNS)
    zero_line = next(line for line in text if line.startswith("Zero"))
    # undefined wql and delta are empty cells, not 0 or nan
    assert zero_line.endswith(",,")
    for path in ("r.csv", "r.json"):
        back = read_report(tmp_path / path)
        assert back == rows


def test_report_values_are_finite_or_absent():
    rows = report_by_category(np.zeros((3, 2)), {0.5: np.ones((3, 2))}, [M.ZERO] * 3)
    for r in rows:
        assert r.wql is None
        assert math.isfinite(r.ob) and math.isfinite(r.ub)
