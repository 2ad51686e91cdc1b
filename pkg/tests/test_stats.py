import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ttformer.numerics import ContractError, make_rng
from ttformer.stats import (
    HourlySeries,
    SingularDesignError,
    UndefinedCorrelationError,
    compute_trend,
    cross_correlation,
    detrend,
    fill_gaps,
    hour_day,
    lag_regression,
    ols_fit,
    pearson,
    student_t_sf,
    to_hourly,
)

START = int(dt.datetime(2020, 5, 1, tzinfo=dt.timezone.utc).timestamp())


def t_density(x, nu):
    c = math.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * math.gamma(nu / 2))
    return c * (1 + x * x / nu) ** (-(nu + 1) / 2)


def test_hour_day_matches_datetime():
    for ts in [START, START + 3600 * 37 + 5, 0, 1_600_000_000]:
        d = dt.datetime.fromtimestamp(ts, dt.timezone.utc)
        h, wd = hour_day(ts)
        assert (int(h), int(wd)) == (d.hour, d.weekday())


def test_trend_constant_and_hour_pattern():
    s = HourlySeries(START, np.full(24 * 14, 5.0))
    tr = compute_trend(s)
    assert np.all(tr.means[tr.counts > 0] == 5.0)
    week = HourlySeries(START, np.tile(np.arange(24.0), 7))
    tr = compute_trend(week)
    for h in range(24):
        assert np.all(tr.means[h] == h)
    with pytest.raises(ContractError):
        compute_trend(HourlySeries(START, []))


def test_trend_matches_groupby():
    rng = make_rng(21)
    s = HourlySeries(START, rng.normal(size=24 * 90))
    tr = compute_trend(s)
    groups = {}
    for ts, v in zip(s.timestamps, s.values):
        d = dt.datetime.fromtimestamp(int(ts), dt.timezone.utc)
        groups.setdefault((d.hour, d.weekday()), []).append(v)
    for (h, d), vals in groups.items():
        assert tr.means[h, d] == pytest.approx(sum(vals) / len(vals), abs=1e-12)
        assert tr.counts[h, d] == len(vals)


def test_detrend_examples_and_self_trend_property():
    s = HourlySeries(START, np.full(24 * 7, 3.0))
    assert np.all(detrend(s, compute_trend(s)).values == 0.0)
    rng = make_rng(22)
    pattern = rng.normal(size=(24, 7))
    ts = START + 3600 * np.arange(24 * 60)
    h, d = hour_day(ts)
    s = HourlySeries(START, pattern[h, d] + 0.3 * rng.normal(size=len(ts)))
    r = detrend(s, compute_trend(s))
    for hh in range(24):
        for dd in range(7):
            sel = (h == hh) & (d == dd)
            assert abs(r.values[sel].mean()) < 1e-9
    pure = HourlySeries(START, pattern[h, d])
    np.testing.assert_allclose(detrend(pure, compute_trend(pure)).values, 0.0, atol=1e-12)


def test_detrend_missing_cell():
    tr = compute_trend(HourlySeries(START, np.ones(24)))
    with pytest.raises(ContractError):
        detrend(HourlySeries(START, np.ones(48)), tr)


def test_to_hourly_and_gap_fill():
    vals = np.array([1.0, 2.0, np.nan, 4.0, 5.0, 5.0, 5.0, 5.0])
    hs = to_hourly(vals, START)
    np.testing.assert_allclose(hs.values, [2.5, 5.0])
    np.testing.assert_allclose(fill_gaps([np.nan, 1.0, np.nan, 3.0, np.nan]), [1.0, 1.0, 2.0, 3.0, 3.0])


def test_pearson_examples():
    a = np.array([1.0, 4.0, 2.0, 8.0, 5.0])
    assert pearson(a, a) == pytest.approx(1.0, abs=1e-15)
    assert pearson(a, -2 * a + 7) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedCorrelationError):
        pearson(a, np.ones(5))


def test_pearson_planted():
    rng = make_rng(23)
    x, e = rng.normal(size=2000), rng.normal(size=2000)
    y = -0.3 * x + math.sqrt(1 - 0.09) * e
    assert pearson(x, y) == pytest.approx(-0.3, abs=0.05)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_invariance(seed, scale, shift):
    rng = make_rng(seed)
    a, b = rng.normal(size=30), rng.normal(size=30)
    r = pearson(a, b)
    assert pearson(scale * a + shift, b) == pytest.approx(r, abs=1e-12)
    assert pearson(-scale * a, b) == pytest.approx(-r, abs=1e-12)


def test_cross_correlation_shift():
    rng = make_rng(24)
    v = rng.normal(size=500)
    c = np.roll(v, -3)  # c[t - 3] == v[t]
    cc = cross_correlation(v, c, 10)
    assert int(np.argmax(cc)) == 3
    assert cc[0] == pearson(v, c)


def test_cross_correlation_white_noise():
    rng = make_rng(25)
    cc = cross_correlation(rng.normal(size=5000), rng.normal(size=5000), 24)
    assert np.all(np.abs(cc) < 0.05)


def test_cross_correlation_planted_negative_block():
    rng = make_rng(26)
    n = 3000
    c = rng.normal(size=n)
    # v[t] depends negatively on c over the previous 0..10 hours
    kernel = np.ones(11)
    v = -np.convolve(c, kernel)[:n] + 2.0 * rng.normal(size=n)
    cc = cross_correlation(v, c, 24)
    assert np.all(cc[:11] < 0)
    with pytest.raises(ContractError):
        cross_correlation(v[:10], c[:10], 24)


def test_ols_noiseless():
    x = np.linspace(0, 1, 50)
    r = ols_fit(2 + 3 * x, np.column_stack([np.ones(50), x]))
    np.testing.assert_allclose(r.coefficients, [2, 3], atol=1e-10)
    assert r.r_squared == pytest.approx(1.0, abs=1e-12)


def test_ols_null_model():
    rng = make_rng(27)
    x = np.column_stack([np.ones(500), rng.normal(size=(500, 3))])
    r = ols_fit(rng.normal(size=500), x)
    assert r.r_squared < 0.03
    assert np.all(r.p_values > 0.01)


def test_ols_planted_table_values():
    rng = make_rng(28)
    n = 2000
    c = rng.normal(size=n)
    v = np.zeros(n)
    for t in range(1, n):
        v[t] = 0.88 * v[t - 1] - 0.06 * c[t] - 0.08 * c[t - 1] + 0.1 * rng.normal()
    r = lag_regression(v, c)
    truth = np.array([0.0, 0.88, -0.06, -0.08])
    assert np.all(np.abs(r.coefficients - truth) < 3 * r.std_errors)
    assert r.names == ("alpha", "beta1", "beta2", "beta3")


def test_ols_residual_orthogonality_and_t_identity():
    rng = make_rng(29)
    x = np.column_stack([np.ones(200), rng.normal(size=(200, 3)) * [1, 100, 0.01]])
    y = x @ [1, 2, 0.03, 40] + rng.normal(size=200)
    r = ols_fit(y, x)
    for j in range(4):
        col = x[:, j] / np.linalg.norm(x[:, j])
        assert abs(col @ r.residuals) / np.linalg.norm(r.residuals) < 1e-8
    np.testing.assert_allclose(r.t_stats, r.coefficients / r.std_errors)
    assert r.dof == 196


def test_ols_singular():
    x = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(SingularDesignError):
        ols_fit(np.arange(10.0), x)


def test_student_t_sf_examples():
    assert student_t_sf(0.0, 3.0) == 0.5
    assert student_t_sf(1.96, 1e7) == pytest.approx(0.025, abs=1e-3)
    quad, _ = integrate.quad(t_density, 2.0, np.inf, args=(10,), epsabs=1e-13, epsrel=1e-13)
    assert student_t_sf(2.0, 10) == pytest.approx(quad, abs=1e-8)


@settings(max_examples=80, deadline=None)
@given(st.floats(-30, 30), st.floats(0.5, 500))
def test_student_t_sf_symmetry(t, dof):
    assert student_t_sf(t, dof) + student_t_sf(-t, dof) == pytest.approx(1.0, abs=1e-12)
    assert student_t_sf(t + 0.5, dof) <= student_t_sf(t, dof)
