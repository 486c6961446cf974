"""Linear-model kernels shared by the imputation strategies.

Maximum-likelihood regression, posterior draws under a Bayesian normal model
with a ridge penalty, lasso by coordinate descent with k-fold cross-validation
of the penalty, and posterior-predictive noise draws. All randomness flows
through an explicitly passed numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .data import Standardization


class SingularDesignError(np.linalg.LinAlgError):
    """Design matrix too ill-conditioned to invert; carries the condition number."""

    def __init__(self, condition: float):
        self.condition = float(condition)
        super().__init__(f"singular design (condition number {condition:.3e})")


class LassoConvergenceError(RuntimeError):
    """Coordinate descent failed to converge; carries the last max update."""

    def __init__(self, last_delta: float, sweeps: int):
        self.last_delta = float(last_delta)
        self.sweeps = sweeps
        super().__init__(
            f"lasso did not converge in {sweeps} sweeps (last max update {last_delta:.3e})"
        )


@dataclass(eq=False)
class LinearFit:
    """A fitted (or drawn) linear model.

    ``coefficients`` live on whatever predictor scale the caller supplied;
    when the caller standardized, the Standardization needed to map back can
    ride along. ``coef_covariance`` (intercept first) is present for MLE fits
    only. ``active_set`` indexes the exactly-nonzero coefficients.
    """

    intercept: float
    coefficients: np.ndarray
    sigma2: float
    coef_covariance: np.ndarray | None = None
    active_set: np.ndarray = field(default=None)  # type: ignore[assignment]
    standardization: Standardization | None = None

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be >= 0, got {self.sigma2}")
        if self.active_set is None:
            self.active_set = np.nonzero(self.coefficients)[0]
        else:
            self.active_set = np.asarray(self.active_set, dtype=np.intp)


@dataclass(eq=False)
class CvResult:
    """Cross-validation trace: descending penalty grid, mean held-out squared
    error per penalty, the selected penalty, and the fold labels."""

    lambda_grid: np.ndarray
    cv_error: np.ndarray
    lambda_star: float
    fold_assignment: np.ndarray


def _augment(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def ols_mle(X: np.ndarray, y: np.ndarray) -> LinearFit:
    """Least-squares fit with intercept; sigma2 = RSS/(n-q-1).

    Raises SingularDesignError when the intercept-augmented cross-product
    matrix has reciprocal condition number <= 1e-12; callers pick the fallback.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    if n <= q + 1:
        raise SingularDesignError(np.inf)
    D = _augment(X)
    G = D.T @ D
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or 1.0 / cond <= 1e-12:
        raise SingularDesignError(cond)
    Ginv = np.linalg.inv(G)
    beta = Ginv @ (D.T @ y)
    resid = y - D @ beta
    rss = float(resid @ resid)
    sigma2 = rss / (n - q - 1)
    return LinearFit(
        intercept=float(beta[0]),
        coefficients=beta[1:],
        sigma2=sigma2,
        coef_covariance=sigma2 * Ginv,
    )


def ridge_mle(X: np.ndarray, y: np.ndarray, kappa: float) -> LinearFit:
    """Ridge-regularized normal equations, used as the singular-design fallback.

    Only the slope block of the cross-product matrix is penalized; sigma2 and
    coef_covariance follow the same plug-in conventions as ols_mle.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    D = _augment(X)
    G = D.T @ D
    G[1:, 1:] += kappa * np.eye(q)
    Ginv = np.linalg.inv(G)
    beta = Ginv @ (D.T @ y)
    resid = y - D @ beta
    rss = float(resid @ resid)
    sigma2 = rss / max(n - q - 1, 1)
    return LinearFit(
        intercept=float(beta[0]),
        coefficients=beta[1:],
        sigma2=sigma2,
        coef_covariance=sigma2 * Ginv,
    )


def bayes_ridge_draw(
    X: np.ndarray, y: np.ndarray, kappa: float, rng: np.random.Generator
) -> LinearFit:
    """One draw from the Bayesian normal linear model with ridge penalty kappa.

    Point estimate b = (X'X + kI)^-1 X'y on centered y; sigma2 is drawn from
    its scaled inverse-chi-square posterior (df floored at 1 so p > n designs
    stay usable); slopes are drawn normal around b with covariance
    sigma2 (X'X + kI)^-1; the intercept is handled on the centered scale.

    For q > n (and kappa > 0) the draw is produced through the n x n dual
    form, which samples from the identical distribution at a fraction of the
    cost.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    if n < 3:
        raise ValueError("bayes_ridge_draw needs n >= 3")
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    ybar = float(y.mean())
    yc = y - ybar

    if q == 0:
        rss = float(yc @ yc)
        nu = max(n - 1, 1)
        sigma2 = rss / rng.chisquare(nu)
        intercept = ybar + np.sqrt(sigma2 / n) * rng.standard_normal()
        return LinearFit(intercept=float(intercept), coefficients=np.empty(0), sigma2=float(sigma2))

    nu = max(n - q - 1, 1)
    if q > n and kappa > 0:
        # Dual form: (X'X + kI)^-1 X' = X'(XX' + kI)^-1.
        M = X @ X.T + kappa * np.eye(n)
        Mf = cho_factor(M, lower=True)
        beta_hat = X.T @ cho_solve(Mf, yc)
        resid = yc - X @ beta_hat
        rss = float(resid @ resid)
        sigma2 = rss / rng.chisquare(nu)
        beta = _slope_draw_dual(X, yc, kappa, np.sqrt(sigma2), Mf, beta_hat, rng)
    else:
        S = X.T @ X + kappa * np.eye(q)
        if kappa == 0.0:
            cond = np.linalg.cond(S)
            if not np.isfinite(cond) or 1.0 / cond <= 1e-12:
                raise SingularDesignError(cond)
        try:
            Sf = cho_factor(S, lower=True)
        except np.linalg.LinAlgError:
            raise SingularDesignError(np.linalg.cond(S)) from None
        beta_hat = cho_solve(Sf, X.T @ yc)
        resid = yc - X @ beta_hat
        rss = float(resid @ resid)
        sigma2 = rss / rng.chisquare(nu)
        sigma = np.sqrt(sigma2)
        z = rng.standard_normal(q)
        # cov(L'^-1 z) = (L L')^-1 = S^-1
        beta = beta_hat + sigma * solve_triangular(Sf[0].T, z, lower=False)

    intercept = ybar + np.sqrt(sigma2 / n) * rng.standard_normal()
    return LinearFit(intercept=float(intercept), coefficients=beta, sigma2=float(sigma2))


def _slope_draw_dual(
    X: np.ndarray,
    yc: np.ndarray,
    kappa: float,
    sigma: float,
    Mf,
    beta_hat: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exact N(beta_hat, sigma^2 (X'X + kI)^-1) draw through the n x n dual
    factorization (Bhattacharya-style auxiliary sampler); never forms the
    q x q inverse."""
    n, q = X.shape
    u = (sigma / np.sqrt(kappa)) * rng.standard_normal(q)
    delta = rng.standard_normal(n)
    if sigma <= 0:
        return beta_hat
    v = X @ u / sigma + delta
    w = cho_solve(Mf, yc / sigma - v)
    return u + sigma * (X.T @ w)


def ridge_point_estimate(X: np.ndarray, y: np.ndarray, kappa: float) -> tuple[float, np.ndarray]:
    """(intercept, slopes) of the penalized point estimate used by the draw."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    ybar = float(y.mean())
    yc = y - ybar
    if q == 0:
        return ybar, np.empty(0)
    if q > n and kappa > 0:
        M = X @ X.T + kappa * np.eye(n)
        beta = X.T @ cho_solve(cho_factor(M, lower=True), yc)
    else:
        S = X.T @ X + kappa * np.eye(q)
        try:
            Sf = cho_factor(S, lower=True)
        except np.linalg.LinAlgError:
            raise SingularDesignError(np.linalg.cond(S)) from None
        beta = cho_solve(Sf, X.T @ yc)
    return ybar, beta


def _soft(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def _cd_solve(
    C: np.ndarray,
    b: np.ndarray,
    n: int,
    lam: float,
    beta: np.ndarray,
    tol: float,
    max_sweeps: int,
) -> np.ndarray:
    """Coordinate descent on the covariance-updated normal equations.

    C = Xc'Xc, b = Xc'yc for column-centered Xc, yc. Minimizes
    (1/2n)||yc - Xc beta||^2 + lam ||beta||_1; converged when a full sweep's
    max coordinate update falls below tol.
    """
    q = b.shape[0]
    diag = np.diag(C).copy()
    cb = C @ beta
    thresh = lam * n
    last = np.inf
    for _ in range(max_sweeps):
        delta_max = 0.0
        for j in range(q):
            dj = diag[j]
            if dj <= 0.0:
                continue
            old = beta[j]
            u = b[j] - cb[j] + dj * old
            new = _soft(u, thresh) / dj
            if new != old:
                step = new - old
                cb += C[:, j] * step
                beta[j] = new
                astep = abs(step)
                if astep > delta_max:
                    delta_max = astep
        last = delta_max
        if delta_max < tol:
            return beta
    raise LassoConvergenceError(last, max_sweeps)


def lasso_max_lambda(X: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty at which the lasso solution is the null model."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    if X.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(Xc.T @ yc)) / n)


def lasso_path(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    coef_init: np.ndarray | None = None,
    tol: float = 1e-7,
    max_sweeps: int = 10_000,
) -> LinearFit:
    """Lasso solution of (1/2n)||y - b0 - X beta||^2 + lam ||beta||_1.

    The intercept is unpenalized; inactive coefficients are exact zeros via
    soft-thresholding. sigma2 is the plug-in RSS/(n - df) with
    df = |active| + 1, floored at RSS/n once df >= n.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    xbar = X.mean(axis=0)
    Xc = X - xbar
    ybar = float(y.mean())
    yc = y - ybar
    beta = np.zeros(q) if coef_init is None else np.asarray(coef_init, dtype=np.float64).copy()
    C = Xc.T @ Xc
    b = Xc.T @ yc
    beta = _cd_solve(C, b, n, lam, beta, tol, max_sweeps)
    intercept = ybar - float(xbar @ beta)
    resid = y - intercept - X @ beta
    rss = float(resid @ resid)
    df = int(np.count_nonzero(beta)) + 1
    sigma2 = rss / (n - df) if df < n else rss / n
    return LinearFit(intercept=intercept, coefficients=beta, sigma2=sigma2)


def lasso_cv(
    X: np.ndarray,
    y: np.ndarray,
    folds: int = 10,
    rng: np.random.Generator | None = None,
    n_lambdas: int = 100,
    lambda_min_ratio: float = 1e-3,
    tol: float = 1e-7,
    max_sweeps: int = 10_000,
) -> CvResult:
    """k-fold cross-validation of the lasso penalty over a 100-point log grid
    from lambda_max down to 1e-3 lambda_max, with warm starts along the path.

    The selected penalty minimizes the mean held-out squared error; ties break
    to the first (largest, sparsest) grid point.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    if not 2 <= folds <= n:
        raise ValueError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    if rng is None:
        rng = np.random.default_rng()

    lam_max = max(lasso_max_lambda(X, y), 1e-12)
    grid = np.geomspace(lam_max, lambda_min_ratio * lam_max, n_lambdas)

    perm = rng.permutation(n)
    fold_assignment = np.empty(n, dtype=np.intp)
    fold_assignment[perm] = np.arange(n) % folds

    sq_err = np.zeros(n_lambdas)
    for f in range(folds):
        test = fold_assignment == f
        train = ~test
        Xtr = X[train]
        ytr = y[train]
        xbar = Xtr.mean(axis=0)
        ybar = float(ytr.mean())
        Xc = Xtr - xbar
        yc = ytr - ybar
        C = Xc.T @ Xc
        b = Xc.T @ yc
        Xte_c = X[test] - xbar
        yte = y[test]
        ntr = int(train.sum())
        beta = np.zeros(q)
        for li, lam in enumerate(grid):
            beta = _cd_solve(C, b, ntr, lam, beta, tol, max_sweeps)
            pred = ybar + Xte_c @ beta
            err = yte - pred
            sq_err[li] += float(err @ err)
    cv_error = sq_err / n
    best = int(np.argmin(cv_error))
    return CvResult(
        lambda_grid=grid,
        cv_error=cv_error,
        lambda_star=float(grid[best]),
        fold_assignment=fold_assignment,
    )


def predictive_draw(fit: LinearFit, Xnew: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Xnew beta + b0 + eps with eps iid normal(0, fit.sigma2)."""
    Xnew = np.asarray(Xnew, dtype=np.float64)
    if not np.isfinite(fit.sigma2):
        raise ValueError("fit.sigma2 must be finite")
    if Xnew.ndim != 2 or Xnew.shape[1] != fit.coefficients.shape[0]:
        raise ValueError(
            f"Xnew has {Xnew.shape[1] if Xnew.ndim == 2 else '?'} columns, "
            f"fit expects {fit.coefficients.shape[0]}"
        )
    m = Xnew.shape[0]
    mean = fit.intercept + Xnew @ fit.coefficients
    return mean + np.sqrt(fit.sigma2) * rng.standard_normal(m)
