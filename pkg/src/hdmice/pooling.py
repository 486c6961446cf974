"""Rubin's-rules combination of per-imputation estimates, fraction of missing
information, and the complete-data estimators (means, variances, covariances,
regression coefficients) they are fed with.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import Dataset
from .regress import ols_mle


@dataclass(frozen=True)
class EstimandValue:
    """One complete-data estimate with its sampling variance and df."""

    estimate: float
    variance: float
    df_complete: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"variance must be >= 0, got {self.variance}")
        if self.df_complete < 1:
            raise ValueError(f"df_complete must be >= 1, got {self.df_complete}")


@dataclass(frozen=True)
class PooledEstimate:
    qbar: float
    W: float
    B: float
    T: float
    df: float
    ci_low: float
    ci_high: float
    fmi: float
    unpooled: bool = False


def _t_quantile(df: float, level: float = 0.975) -> float:
    if not np.isfinite(df):
        return float(stats.norm.ppf(level))
    return float(stats.t.ppf(level, df))


def complete_ci(value: EstimandValue, level: float = 0.975) -> tuple[float, float]:
    """Symmetric t interval from a single complete-data estimate."""
    half = _t_quantile(value.df_complete, level) * np.sqrt(value.variance)
    return value.estimate - half, value.estimate + half


def rubin_pool(values: list[EstimandValue], small_sample_df: bool = False) -> PooledEstimate:
    """Pool d >= 2 per-imputation estimates with Rubin's rules.

    qbar = mean estimate; W = mean within variance; B = between variance
    (d-1 denominator); T = W + (1 + 1/d) B; df = (d-1)(1 + W/((1+1/d)B))^2;
    95% CI = qbar +/- t(df) sqrt(T); fmi = (r + 2/(df+3))/(r+1) with
    r = (1+1/d)B/W. When B = 0 the pool degenerates to the complete-data
    analysis: T = W, the CI uses df_complete, and fmi = 2/(df_complete + 3).
    A d = 1 input is passed through with its own CI and flagged unpooled.

    ``small_sample_df`` switches to the Barnard-Rubin adjusted df.
    """
    if not values:
        raise ValueError("rubin_pool needs at least one estimate")
    d = len(values)
    estimates = np.array([v.estimate for v in values])
    variances = np.array([v.variance for v in values])
    df_complete = float(min(v.df_complete for v in values))

    if d == 1:
        v = values[0]
        lo, hi = complete_ci(v)
        return PooledEstimate(
            qbar=v.estimate,
            W=v.variance,
            B=0.0,
            T=v.variance,
            df=v.df_complete,
            ci_low=lo,
            ci_high=hi,
            fmi=2.0 / (v.df_complete + 3.0),
            unpooled=True,
        )

    qbar = float(estimates.mean())
    W = float(variances.mean())
    B = float(estimates.var(ddof=1))
    T = W + (1.0 + 1.0 / d) * B

    if B == 0.0:
        df = df_complete
        fmi = 2.0 / (df_complete + 3.0)
    elif W == 0.0:
        warnings.warn("within-imputation variance is zero; fmi set to 1", RuntimeWarning)
        df = float(d - 1)
        fmi = 1.0
    else:
        r = (1.0 + 1.0 / d) * B / W
        df = (d - 1) * (1.0 + 1.0 / r) ** 2
        if small_sample_df:
            gamma = (1.0 + 1.0 / d) * B / T
            df_obs = (df_complete + 1.0) / (df_complete + 3.0) * df_complete * (1.0 - gamma)
            df = 1.0 / (1.0 / df + 1.0 / df_obs)
        fmi = (r + 2.0 / (df + 3.0)) / (r + 1.0)

    half = _t_quantile(df) * np.sqrt(T)
    return PooledEstimate(
        qbar=qbar, W=W, B=B, T=T, df=df, ci_low=qbar - half, ci_high=qbar + half, fmi=fmi
    )


@dataclass(frozen=True)
class Estimand:
    """What to estimate from a completed dataset.

    kind 'mean'/'variance' take one column, 'covariance' two, and
    'coefficient' takes (response, predictor...) columns plus the term name
    ('intercept' or a predictor column).
    """

    kind: str
    columns: tuple[str, ...]
    term: str | None = None

    @property
    def label(self) -> str:
        if self.kind == "mean":
            return f"mean_{self.columns[0]}"
        if self.kind == "variance":
            return f"var_{self.columns[0]}"
        if self.kind == "covariance":
            return f"cov_{self.columns[0]}_{self.columns[1]}"
        return f"coef_{self.columns[0]}_{self.term}"


def _column(data: Dataset, name: str) -> np.ndarray:
    return data.values[:, data.column_index(name)]


def estimand_from_sample(est: Estimand, data: Dataset) -> EstimandValue:
    """Complete-data estimate, sampling variance, and df for one estimand.

    Variances and covariances get normal-theory sampling variances
    (2 s^4/(n-1) and (s_xx s_yy + s_xy^2)/(n-1)); regression coefficients the
    classical OLS variance with n-q-1 df.
    """
    n = data.n
    if n < 3:
        raise ValueError("need at least 3 rows")
    if est.kind == "mean":
        x = _column(data, est.columns[0])
        s2 = float(x.var(ddof=1))
        return EstimandValue(float(x.mean()), s2 / n, n - 1)
    if est.kind == "variance":
        x = _column(data, est.columns[0])
        s2 = float(x.var(ddof=1))
        return EstimandValue(s2, 2.0 * s2 * s2 / (n - 1), n - 1)
    if est.kind == "covariance":
        x = _column(data, est.columns[0])
        y = _column(data, est.columns[1])
        sxx = float(x.var(ddof=1))
        syy = float(y.var(ddof=1))
        sxy = float(np.cov(x, y, ddof=1)[0, 1])
        return EstimandValue(sxy, (sxx * syy + sxy * sxy) / (n - 1), n - 1)
    if est.kind == "coefficient":
        values = regression_estimands(est.columns[0], est.columns[1:], data)
        return values[est.term]
    raise ValueError(f"unknown estimand kind {est.kind!r}")


def regression_estimands(
    response: str, predictors: tuple[str, ...], data: Dataset
) -> dict[str, EstimandValue]:
    """All coefficients (intercept plus slopes) of one linear model, fit once."""
    y = _column(data, response)
    X = np.column_stack([_column(data, c) for c in predictors]) if predictors else np.empty((data.n, 0))
    fit = ols_mle(X, y)
    df = data.n - len(predictors) - 1
    cov = fit.coef_covariance
    out = {"intercept": EstimandValue(fit.intercept, float(cov[0, 0]), df)}
    for k, name in enumerate(predictors):
        out[name] = EstimandValue(float(fit.coefficients[k]), float(cov[k + 1, k + 1]), df)
    return out
