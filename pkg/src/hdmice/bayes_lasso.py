"""Gibbs sampler for Bayesian lasso regression with a point-mass mixture
prior on the coefficients.

Model, for centered y and standardized X:

    y | beta, sigma2        ~  N(X beta, sigma2 I)
    beta_j | tau, sigma, rho ~ (1 - rho) delta_0 + rho (tau/2 sigma) exp(-tau |beta_j| / sigma)
    sigma2 ~ Inverse-Gamma(a, b),  tau ~ Gamma(r, s),  rho ~ Beta(g, h)

Each beta_j is resampled from its exact full conditional: an atom at zero
plus a two-sided truncated-normal slab, with the inclusion probability
computed from the marginal-likelihood ratio in log space. The sigma2 update
is made conjugate (inverse-gamma) by augmenting the active coefficients with
the usual normal-scale-mixture representation of the Laplace; the latent
scales are drawn fresh inside the update and discarded, so the sampler is a
valid partially collapsed Gibbs scheme for the exact posterior. tau has a
gamma full conditional whose rate involves the active coefficients only, and
rho a beta full conditional counting the active set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import log_ndtr

_LOG_2PI = math.log(2.0 * math.pi)


class BlassoError(RuntimeError):
    """Sampler state became non-finite."""


@dataclass(frozen=True)
class BlassoHyper:
    """Shape/rate pairs for sigma2 (inverse-gamma) and tau (gamma), plus the
    beta parameters of the sparsity weight rho. All strictly positive."""

    a: float = 0.1
    b: float = 0.1
    r: float = 0.01
    s: float = 0.01
    g: float = 1.0
    h: float = 1.0

    def __post_init__(self):
        for name in ("a", "b", "r", "s", "g", "h"):
            if getattr(self, name) <= 0:
                raise ValueError(f"hyperparameter {name} must be > 0")


@dataclass(eq=False)
class BlassoState:
    beta: np.ndarray  # exact zeros for excluded coefficients
    sigma2: float
    tau: float
    rho: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if not (self.sigma2 > 0 and self.tau > 0 and 0.0 <= self.rho <= 1.0):
            raise ValueError("need sigma2 > 0, tau > 0, rho in [0, 1]")


def initial_state(q: int, y: np.ndarray) -> BlassoState:
    """Neutral start: beta = 0, sigma2 = var(y), tau = 1, rho = 0.5."""
    y = np.asarray(y, dtype=np.float64)
    var = float(y.var(ddof=1)) if y.shape[0] > 1 else 1.0
    return BlassoState(beta=np.zeros(q), sigma2=max(var, 1e-12), tau=1.0, rho=0.5)


def _truncated_std_normal_lower(alpha: float, rng: np.random.Generator) -> float:
    """Standard normal truncated to (alpha, inf), by rejection (exact)."""
    if alpha <= 0.0:
        while True:
            z = rng.standard_normal()
            if z >= alpha:
                return z
    # tail region: Robert (1995) shifted-exponential proposal
    lam = 0.5 * (alpha + math.sqrt(alpha * alpha + 4.0))
    while True:
        z = alpha + rng.exponential(1.0 / lam)
        u = rng.random()
        if u <= math.exp(-0.5 * (z - lam) ** 2):
            return z


def _truncated_normal(mu: float, sd: float, positive: bool, rng: np.random.Generator) -> float:
    """Draw from N(mu, sd^2) truncated to (0, inf) or (-inf, 0)."""
    if positive:
        return mu + sd * _truncated_std_normal_lower(-mu / sd, rng)
    return mu - sd * _truncated_std_normal_lower(mu / sd, rng)


def slab_log_weights(bt: float, s_j: float, sigma2: float, tau: float) -> tuple[float, float]:
    """Log weights of the positive and negative truncated-normal branches of
    the slab, up to the branch-independent constant."""
    sigma = math.sqrt(sigma2)
    sd2 = sigma2 / s_j
    mu_pos = bt - tau * sigma / s_j
    mu_neg = bt + tau * sigma / s_j
    lw_pos = mu_pos * mu_pos / (2.0 * sd2) + float(log_ndtr(mu_pos / math.sqrt(sd2)))
    lw_neg = mu_neg * mu_neg / (2.0 * sd2) + float(log_ndtr(-mu_neg / math.sqrt(sd2)))
    return lw_pos, lw_neg


def inclusion_log_odds(
    bt: float, s_j: float, sigma2: float, tau: float, rho: float
) -> float:
    """Log posterior odds that beta_j is nonzero, given the partial-residual
    projection bt = x_j' r_(-j) / s_j. Entirely in log space so extreme
    projections cannot overflow."""
    if rho <= 0.0:
        return -math.inf
    if rho >= 1.0:
        return math.inf
    lw_pos, lw_neg = slab_log_weights(bt, s_j, sigma2, tau)
    log_slab = np.logaddexp(lw_pos, lw_neg)
    sd2 = sigma2 / s_j
    return (
        math.log(rho)
        - math.log1p(-rho)
        + math.log(tau)
        - math.log(2.0)
        - 0.5 * math.log(sigma2)
        + 0.5 * (_LOG_2PI + math.log(sd2))
        + float(log_slab)
    )


def blasso_gibbs_step(
    state: BlassoState,
    X: np.ndarray,
    y: np.ndarray,
    hyper: BlassoHyper,
    rng: np.random.Generator,
) -> BlassoState:
    """One full sweep: every beta_j from its mixture full conditional, then
    sigma2 (inverse-gamma via scale-mixture augmentation of the active set),
    tau (gamma), and rho (beta counting the active coefficients).

    X should be standardized and y centered on the supplied rows; constant
    (all-zero) columns are held at exactly zero.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, q = X.shape
    beta = state.beta.copy()
    if beta.shape[0] != q:
        raise ValueError(f"state has {beta.shape[0]} coefficients, X has {q} columns")
    sigma2 = state.sigma2
    tau = state.tau
    rho = state.rho

    col_ss = np.einsum("ij,ij->j", X, X)
    resid = y - X @ beta

    for j in range(q):
        s_j = col_ss[j]
        if s_j <= 0.0:
            beta[j] = 0.0
            continue
        old = beta[j]
        if old != 0.0:
            resid += X[:, j] * old
        bt = float(X[:, j] @ resid) / s_j
        log_odds = inclusion_log_odds(bt, s_j, sigma2, tau, rho)
        if log_odds == math.inf:
            include = True
        elif log_odds == -math.inf:
            include = False
        else:
            # P(include) = expit(log_odds), drawn via log-uniform comparison
            include = math.log(rng.random()) < -np.logaddexp(0.0, -log_odds)
        if include:
            sigma = math.sqrt(sigma2)
            sd = sigma / math.sqrt(s_j)
            lw_pos, lw_neg = slab_log_weights(bt, s_j, sigma2, tau)
            p_pos = 1.0 / (1.0 + math.exp(min(lw_neg - lw_pos, 700.0)))
            positive = rng.random() < p_pos
            mu = bt - tau * sigma / s_j if positive else bt + tau * sigma / s_j
            draw = _truncated_normal(mu, sd, positive, rng)
            beta[j] = draw
            resid -= X[:, j] * draw
        else:
            beta[j] = 0.0

    active = np.nonzero(beta)[0]
    n_active = active.shape[0]

    # sigma2 | rest: augment each active beta_j with its latent Laplace scale
    rss = float(resid @ resid)
    shape = hyper.a + 0.5 * n + 0.5 * n_active
    rate = hyper.b + 0.5 * rss
    if n_active:
        sigma = math.sqrt(sigma2)
        abs_beta = np.abs(beta[active])
        mean = np.clip(tau * sigma / abs_beta, 1e-12, 1e12)
        eta = rng.wald(mean, tau * tau)  # 1/omega_j
        rate += 0.5 * float((beta[active] ** 2) @ eta)
    sigma2_new = 1.0 / rng.gamma(shape, 1.0 / rate)

    # tau | rest: the point-mass components contribute nothing to the l1 term
    l1 = float(np.abs(beta[active]).sum()) if n_active else 0.0
    tau_new = rng.gamma(hyper.r + n_active, 1.0 / (hyper.s + l1 / math.sqrt(sigma2_new)))

    q_elig = int((col_ss > 0.0).sum())
    rho_new = rng.beta(hyper.g + n_active, hyper.h + q_elig - n_active)

    out = BlassoState(beta=beta, sigma2=float(sigma2_new), tau=float(tau_new), rho=float(rho_new))
    if not (
        np.all(np.isfinite(out.beta))
        and math.isfinite(out.sigma2)
        and math.isfinite(out.tau)
        and math.isfinite(out.rho)
    ):
        raise BlassoError("non-finite sampler state")
    return out


def blasso_impute(
    X_obs: np.ndarray,
    y_obs: np.ndarray,
    X_mis: np.ndarray,
    warm_state: BlassoState,
    sweeps: int,
    hyper: BlassoHyper,
    rng: np.random.Generator,
) -> tuple[np.ndarray, BlassoState]:
    """Advance the chain ``sweeps`` steps from ``warm_state`` and draw
    imputations X_mis beta + eps, eps ~ N(0, sigma2), from the final state.

    Returns the advanced state so the next call can warm-start. y_obs is
    expected centered (the caller restores its mean).
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    state = warm_state
    for _ in range(sweeps):
        state = blasso_gibbs_step(state, X_obs, y_obs, hyper, rng)
    X_mis = np.asarray(X_mis, dtype=np.float64)
    m = X_mis.shape[0]
    values = X_mis @ state.beta + math.sqrt(state.sigma2) * rng.standard_normal(m)
    return values, state


def with_rho(state: BlassoState, rho: float) -> BlassoState:
    """Copy of the state with rho replaced (testing hook for forced sparsity)."""
    return replace(state, beta=state.beta.copy(), rho=rho)
