"""MAR missingness imposition through a logistic response model.

Each target column receives independent Bernoulli nonresponse draws with
per-row probabilities logistic(gamma0 + z_i gamma); the intercept gamma0 is
calibrated by bisection so the mean probability hits the requested missing
proportion exactly (to 1e-6). Response-model predictors are standardized by
default, and an optional global slope multiplier (with a calibration helper)
lets a harness target a specific discrimination level (AUC) of the response
model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .data import Dataset, MissingMask, standardize

_BISECTION_BOUNDS = (-50.0, 50.0)
_BISECTION_MAX_ITER = 200


class CalibrationError(RuntimeError):
    """Requested missing proportion unreachable within the intercept bounds."""


@dataclass(frozen=True, eq=False)
class MarSpec:
    """Response-model design: which columns receive missingness, which fully
    observed columns drive it, and with what slopes/proportions."""

    targets: tuple[int, ...]
    predictors: tuple[int, ...]
    slopes: np.ndarray
    pm: float
    standardize_predictors: bool = True
    slope_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(j) for j in self.targets))
        object.__setattr__(self, "predictors", tuple(int(j) for j in self.predictors))
        object.__setattr__(self, "slopes", np.asarray(self.slopes, dtype=np.float64))
        if set(self.targets) & set(self.predictors):
            raise ValueError("targets and response-model predictors must be disjoint")
        if not 0.0 < self.pm < 1.0:
            raise ValueError(f"pm must be in (0, 1), got {self.pm}")
        if self.slopes.shape[0] != len(self.predictors):
            raise ValueError("one slope per predictor required")


def realized_rate(Ztilde: np.ndarray, gamma: np.ndarray, gamma0: float) -> float:
    """Mean nonresponse probability at a given intercept."""
    eta = np.asarray(Ztilde, dtype=np.float64) @ np.asarray(gamma, dtype=np.float64)
    return float(expit(gamma0 + eta).mean())


def calibrate_intercept(Ztilde: np.ndarray, gamma: np.ndarray, pm: float) -> float:
    """Bisection for gamma0 such that the mean response probability equals pm
    to within 1e-6; the mean is strictly increasing in gamma0."""
    eta = np.asarray(Ztilde, dtype=np.float64) @ np.asarray(gamma, dtype=np.float64)
    if not np.all(np.isfinite(eta)):
        raise CalibrationError("non-finite linear predictor")
    lo, hi = _BISECTION_BOUNDS
    f_lo = float(expit(lo + eta).mean()) - pm
    f_hi = float(expit(hi + eta).mean()) - pm
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(f"pm={pm} not bracketed by intercepts in [{lo}, {hi}]")
    for _ in range(_BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        f_mid = float(expit(mid + eta).mean()) - pm
        if abs(f_mid) < 1e-6:
            return mid
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
    raise CalibrationError("intercept bisection did not converge")


def impose_mar(data: Dataset, spec: MarSpec, rng: np.random.Generator) -> MissingMask:
    """Bernoulli nonresponse per target column with probabilities from the
    calibrated logistic response model. Columns that would end up with fewer
    than 2 observed rows are redrawn (fresh draws, capped at 100 attempts)."""
    Z = data.values[:, list(spec.predictors)]
    if not np.all(np.isfinite(Z)):
        raise ValueError("response-model predictors must be fully observed")
    if spec.standardize_predictors:
        Z, _ = standardize(Z)
    gamma = spec.slopes * spec.slope_scale
    n = data.n
    mask = np.zeros((n, data.p), dtype=bool)
    for j in spec.targets:
        gamma0 = calibrate_intercept(Z, gamma, spec.pm)
        probs = expit(gamma0 + Z @ gamma)
        for _ in range(100):
            col = rng.random(n) < probs
            if n - int(col.sum()) >= 2:
                break
        else:
            raise CalibrationError(f"column {j}: could not keep 2 observed rows")
        mask[:, j] = col
    return MissingMask(mask=mask, target_columns=spec.targets)


@dataclass(frozen=True)
class MarDiagnostics:
    pseudo_r2: float
    auc: float
    coefficients: np.ndarray
    converged: bool


def _logistic_irls(
    X: np.ndarray, y: np.ndarray, tol: float = 1e-8, max_iter: int = 25
) -> tuple[np.ndarray, bool]:
    n, q = X.shape
    beta = np.zeros(q)
    for _ in range(max_iter):
        eta = X @ beta
        p = expit(eta)
        w = np.maximum(p * (1.0 - p), 1e-10)
        z = eta + (y - p) / w
        Xw = X * w[:, None]
        G = X.T @ Xw
        try:
            new = np.linalg.solve(G, Xw.T @ z)
        except np.linalg.LinAlgError:
            new = np.linalg.lstsq(G, Xw.T @ z, rcond=None)[0]
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < tol:
            return beta, True
    return beta, False


def mar_diagnostics(indicator: np.ndarray, Ztilde: np.ndarray) -> MarDiagnostics:
    """Fit logistic(indicator ~ Ztilde) by IRLS and report McFadden pseudo-R2
    and the rank-based AUC. Separation triggers a capped-iteration warning
    with diagnostics still reported from the last iterate."""
    y = np.asarray(indicator, dtype=np.float64)
    Z = np.asarray(Ztilde, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    n1 = int(y.sum())
    n0 = y.shape[0] - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both response classes must be present")
    X = np.column_stack([np.ones(y.shape[0]), Z])
    beta, converged = _logistic_irls(X, y)
    if not converged:
        warnings.warn(
            "logistic diagnostics hit the iteration cap (possible separation); "
            "reporting the last iterate",
            RuntimeWarning,
        )
    eta = X @ beta
    p = np.clip(expit(eta), 1e-12, 1.0 - 1e-12)
    ll = float(y @ np.log(p) + (1.0 - y) @ np.log1p(-p))
    pbar = n1 / y.shape[0]
    ll0 = n1 * np.log(pbar) + n0 * np.log1p(-pbar)
    pseudo_r2 = 1.0 - ll / ll0

    ranks = rankdata(eta)
    auc = (float(ranks[y == 1.0].sum()) - n1 * (n1 + 1) / 2.0) / (n1 * n0)
    return MarDiagnostics(
        pseudo_r2=float(pseudo_r2), auc=float(auc), coefficients=beta, converged=converged
    )


def expected_auc(eta: np.ndarray, probs: np.ndarray) -> float:
    """Population AUC of a response model: the probability that a randomly
    chosen nonrespondent outranks a randomly chosen respondent on eta, under
    independent Bernoulli(probs) response draws."""
    order = np.argsort(eta, kind="stable")
    p = np.asarray(probs, dtype=np.float64)[order]
    q = 1.0 - p
    # exclusive prefix sums of q over strictly smaller eta (no ties expected
    # for continuous predictors; tied eta would need a 1/2 correction)
    cq = np.concatenate([[0.0], np.cumsum(q)[:-1]])
    num = float(p @ cq)
    den = float(p.sum() * q.sum())
    return num / den


def calibrate_slope_scale(
    Ztilde: np.ndarray,
    gamma: np.ndarray,
    pm: float,
    target_auc: float,
    tol: float = 1e-4,
    max_iter: int = 100,
) -> float:
    """Global slope multiplier whose calibrated response model attains the
    target expected AUC; the AUC is strictly increasing in the multiplier."""
    Z = np.asarray(Ztilde, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    eta1 = Z @ gamma
    if np.allclose(eta1, eta1[0]):
        raise CalibrationError("degenerate linear predictor; AUC is not tunable")

    def auc_at(scale: float) -> float:
        gamma0 = calibrate_intercept(Z, gamma * scale, pm)
        return expected_auc(eta1, expit(gamma0 + scale * eta1))

    lo, hi = 1e-6, 1.0
    while auc_at(hi) < target_auc:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError(f"target AUC {target_auc} unreachable")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        a = auc_at(mid)
        if abs(a - target_auc) < tol:
            return mid
        if a < target_auc:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
