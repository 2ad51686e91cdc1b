"""Seasonal detrending, (lagged) correlation and the lag-1 OLS significance model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .numerics import ContractError

HOUR = 3600
DAY = 86400
N_HOURS, N_DAYS = 24, 7
REGRESSORS = ("alpha", "beta1", "beta2", "beta3")


class UndefinedCorrelationError(ValueError):
    pass


class SingularDesignError(ValueError):
    pass


@dataclass
class HourlySeries:
    """Regularly sampled series; ``step`` defaults to one hour."""

    start_ts: int
    values: np.ndarray
    step: int = HOUR

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self):
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_ts + self.step * np.arange(len(self.values), dtype=np.int64)


def hour_day(ts) -> tuple[np.ndarray, np.ndarray]:
    """UTC hour-of-day and day-of-week (Monday = 0)."""
    ts = np.asarray(ts, dtype=np.int64)
    return (ts % DAY) // HOUR, (ts // DAY + 3) % 7


def fill_gaps(values) -> np.ndarray:
    """Linear interpolation over NaN runs; leading/trailing gaps take the nearest value."""
    v = np.asarray(values, dtype=np.float64).copy()
    bad = np.isnan(v)
    if bad.all():
        raise ContractError("series has no observed values")
    if bad.any():
        idx = np.arange(len(v))
        v[bad] = np.interp(idx[bad], idx[~bad], v[~bad])
    return v


def to_hourly(values, start_ts: int, step: int = 900) -> HourlySeries:
    """Mean of the sub-hourly bins inside each clock hour, after gap filling."""
    v = fill_gaps(values)
    ts = int(start_ts) + step * np.arange(len(v), dtype=np.int64)
    hour_key = ts // HOUR
    first = int(hour_key[0])
    slot = hour_key - first
    sums = np.bincount(slot, weights=v)
    counts = np.bincount(slot)
    return HourlySeries(first * HOUR, sums / counts)


@dataclass
class TrendTable:
    means: np.ndarray = field(default_factory=lambda: np.full((N_HOURS, N_DAYS), np.nan))
    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_HOURS, N_DAYS), dtype=np.int64))

    def lookup(self, ts) -> np.ndarray:
        h, d = hour_day(ts)
        if np.any(self.counts[h, d] == 0):
            raise ContractError("trend table has no value for some (hour, day) cell in the series")
        return self.means[h, d]


def compute_trend(series: HourlySeries) -> TrendTable:
    if len(series) == 0:
        raise ContractError("cannot compute a trend from an empty series")
    h, d = hour_day(series.timestamps)
    cell = h * N_DAYS + d
    counts = np.bincount(cell, minlength=N_HOURS * N_DAYS)
    sums = np.bincount(cell, weights=series.values, minlength=N_HOURS * N_DAYS)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return TrendTable(means.reshape(N_HOURS, N_DAYS), counts.reshape(N_HOURS, N_DAYS))


def detrend(series: HourlySeries, trend: TrendTable) -> HourlySeries:
    return HourlySeries(series.start_ts, series.values - trend.lookup(series.timestamps), series.step)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"pearson needs equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 3:
        raise ContractError("pearson needs at least 3 observations")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(da @ da), np.sqrt(db @ db)
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def cross_correlation(v, c, max_lag: int = 24) -> np.ndarray:
    """Entry ``lag`` is corr(v[t], c[t - lag]) for lag = 0..max_lag."""
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    c = np.asarray(getattr(c, "values", c), dtype=np.float64)
    if max_lag < 0:
        raise ContractError("max_lag must be non-negative")
    if len(v) != len(c):
        raise ContractError("series lengths differ")
    if len(v) <= max_lag + 2:
        raise ContractError(f"series of length {len(v)} too short for max_lag {max_lag}")
    n = len(v)
    return np.array([pearson(v[lag:], c[: n - lag]) for lag in range(max_lag + 1)])


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail P(T > t) of Student's t via the regularized incomplete beta."""
    if dof <= 0:
        raise ContractError("degrees of freedom must be positive")
    tail = 0.5 * special.betainc(0.5 * dof, 0.5, dof / (dof + t * t))
    return float(tail if t >= 0 else 1.0 - tail)


def two_sided_p(t: float, dof: float) -> float:
    return min(1.0, 2.0 * student_t_sf(abs(t), dof))


@dataclass
class OlsResult:
    names: tuple[str, ...]
    coefficients: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    r_squared: float
    residuals: np.ndarray
    dof: int

    def as_table(self) -> dict:
        out = {
            name: {
                "coefficient": float(self.coefficients[i]),
                "std_error": float(self.std_errors[i]),
                "t_stat": float(self.t_stats[i]),
                "p_value": float(self.p_values[i]),
            }
            for i, name in enumerate(self.names)
        }
        out["r_squared"] = float(self.r_squared)
        out["n_obs"] = int(len(self.residuals))
        return out


def ols_fit(y, design, names=None) -> OlsResult:
    """Least squares via the normal equations (LU with partial pivoting).

    ``design`` must already contain the intercept column.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(design, dtype=np.float64)
    n, p = x.shape
    if n <= p:
        raise ContractError(f"need more rows than columns, got {n}x{p}")
    if np.linalg.matrix_rank(x) < p:
        raise SingularDesignError("design matrix is rank deficient")
    xtx = x.T @ x
    beta = np.linalg.solve(xtx, x.T @ y)
    resid = y - x @ beta
    dof = n - p
    sigma2 = (resid @ resid) / dof
    se = np.sqrt(np.maximum(sigma2 * np.diag(np.linalg.inv(xtx)), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf * np.sign(beta)))
    pvals = np.array([two_sided_p(ti, dof) if np.isfinite(ti) else 0.0 for ti in t])
    centred = y - y.mean()
    sst = centred @ centred
    r2 = 1.0 - (resid @ resid) / sst if sst > 0 else 1.0
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(p))
    return OlsResult(names, beta, se, t, pvals, float(np.clip(r2, 0.0, 1.0)), resid, dof)


def lag_regression(v_detrended, c_detrended) -> OlsResult:
    """v'[t] = alpha + beta1 v'[t-1] + beta2 c'[t] + beta3 c'[t-1]."""
    v = np.asarray(getattr(v_detrended, "values", v_detrended), dtype=np.float64)
    c = np.asarray(getattr(c_detrended, "values", c_detrended), dtype=np.float64)
    if len(v) != len(c):
        raise ContractError("series lengths differ")
    design = np.column_stack([np.ones(len(v) - 1), v[:-1], c[1:], c[:-1]])
    return ols_fit(v[1:], design, REGRESSORS)


@dataclass
class LagAnalysis:
    """Hourly traffic and tweet series, their detrended versions and the lag statistics."""

    traffic: HourlySeries
    tweets: HourlySeries
    traffic_detrended: HourlySeries
    tweets_detrended: HourlySeries
    correlation: np.ndarray  # index = lag in hours
    ols: OlsResult

    @property
    def min_lag(self) -> int:
        return int(np.argmin(self.correlation))


def lag_analysis(traffic_bins, tweet_bins, start_ts: int, max_lag: int = 24, step: int = 900) -> LagAnalysis:
    """Full correlation pipeline on binned series.

    ``traffic_bins`` is averaged per hour; ``tweet_bins`` holds per-bin counts and
    becomes hourly totals.
    """
    v = to_hourly(traffic_bins, start_ts, step)
    c = HourlySeries(v.start_ts, to_hourly(tweet_bins, start_ts, step).values * (HOUR // step))
    vd, cd = detrend(v, compute_trend(v)), detrend(c, compute_trend(c))
    return LagAnalysis(v, c, vd, cd, cross_correlation(vd.values, cd.values, max_lag),
                       lag_regression(vd.values, cd.values))
