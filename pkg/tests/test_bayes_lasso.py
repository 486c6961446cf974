import math

import numpy as np
import pytest

from hdmice.bayes_lasso import (
    BlassoHyper,
    BlassoState,
    blasso_gibbs_step,
    blasso_impute,
    inclusion_log_odds,
    initial_state,
    with_rho,
)
from hdmice.data import standardize

PAPER_HYPER = BlassoHyper(a=0.1, b=0.1, r=0.01, s=0.01, g=1.0, h=1.0)


def make_problem(rng, n=60, q=5, signal=(2.0,)):
    X = standardize(rng.normal(size=(n, q)))[0]
    beta = np.zeros(q)
    beta[: len(signal)] = signal
    y = X @ beta + rng.normal(size=n)
    return X, y - y.mean()


class _SpyRng:
    """Delegating wrapper that records beta() calls."""

    def __init__(self, rng):
        self._rng = rng
        self.beta_calls = []

    def beta(self, a, b):
        self.beta_calls.append((a, b))
        return self._rng.beta(a, b)

    def __getattr__(self, name):
        return getattr(self._rng, name)


class TestGibbsStep:
    def test_zero_inclusion_probability_gives_exact_zeros(self, rng):
        X, y = make_problem(rng)
        state = with_rho(initial_state(5, y), 0.0)
        state.beta[:] = 1.0  # nonzero start; the sweep must still zero everything
        out = blasso_gibbs_step(state, X, y, PAPER_HYPER, rng)
        assert np.all(out.beta == 0.0)

    def test_forced_inclusion(self, rng):
        X, y = make_problem(rng)
        out = blasso_gibbs_step(with_rho(initial_state(5, y), 1.0), X, y, PAPER_HYPER, rng)
        assert np.all(out.beta != 0.0)

    def test_strong_signal_inclusion_frequency(self, rng):
        X, y = make_problem(rng, n=80, q=1, signal=(5.0,))
        y = X[:, 0] * 5.0 + 0.05 * rng.normal(size=80)
        y -= y.mean()
        state = initial_state(1, y)
        included = 0
        for _ in range(5000):
            state = blasso_gibbs_step(state, X, y, PAPER_HYPER, rng)
            included += state.beta[0] != 0.0
        assert included / 5000 > 0.95

    def test_null_signal_stays_sparse(self, rng):
        X = standardize(rng.normal(size=(60, 20)))[0]
        y = rng.normal(size=60)
        y -= y.mean()
        state = initial_state(20, y)
        fractions = []
        for _ in range(2000):
            state = blasso_gibbs_step(state, X, y, PAPER_HYPER, rng)
            fractions.append(np.count_nonzero(state.beta) / 20)
        assert np.mean(fractions) < 0.25

    def test_exact_sparsity_occurs_along_chain(self, rng):
        X, y = make_problem(rng, n=40, q=6, signal=(1.0,))
        state = initial_state(6, y)
        zeros_seen = 0
        for _ in range(200):
            state = blasso_gibbs_step(state, X, y, PAPER_HYPER, rng)
            zeros_seen += int(np.any(state.beta == 0.0))
        assert zeros_seen > 0

    def test_rho_update_counts_active_set(self, rng):
        X, y = make_problem(rng, n=50, q=8, signal=(2.0, -1.0))
        state = initial_state(8, y)
        spy = _SpyRng(rng)
        for _ in range(20):
            state = blasso_gibbs_step(state, X, y, PAPER_HYPER, spy)
            g_arg, h_arg = spy.beta_calls[-1]
            n_active = int(np.count_nonzero(state.beta))
            assert g_arg == PAPER_HYPER.g + n_active
            assert h_arg == PAPER_HYPER.h + 8 - n_active

    def test_degenerate_column_held_at_zero(self, rng):
        X, y = make_problem(rng, n=40, q=4, signal=(2.0,))
        X = X.copy()
        X[:, 2] = 0.0
        state = with_rho(initial_state(4, y), 1.0)
        out = blasso_gibbs_step(state, X, y, PAPER_HYPER, rng)
        assert out.beta[2] == 0.0

    def test_high_h_kills_the_model(self, rng):
        # h large enough that the prior log-odds dominate the data evidence
        X, y = make_problem(rng, n=50, q=5, signal=(0.3,))
        hyper = BlassoHyper(a=0.1, b=0.1, r=0.01, s=0.01, g=1.0, h=1e8)
        state = initial_state(5, y)
        actives = []
        for _ in range(300):
            state = blasso_gibbs_step(state, X, y, hyper, rng)
            actives.append(np.count_nonzero(state.beta))
        assert np.mean(actives[100:]) < 0.5

    def test_dense_weak_penalty_approaches_bayes_regression(self, rng):
        # g huge forces rho -> 1; a tight small-tau prior removes the l1 pull
        X, y = make_problem(rng, n=100, q=2, signal=(1.5, -0.75))
        from hdmice.regress import ols_mle

        mle = ols_mle(X, y)
        hyper = BlassoHyper(a=0.1, b=0.1, r=0.01, s=1e6, g=1e6, h=1.0)
        state = initial_state(2, y)
        draws = []
        for it in range(1500):
            state = blasso_gibbs_step(state, X, y, hyper, rng)
            if it >= 500:
                draws.append(state.beta.copy())
        mean = np.mean(draws, axis=0)
        se = np.sqrt(np.diag(mle.coef_covariance)[1:])
        assert np.all(np.abs(mean - mle.coefficients) < 4 * se)


class TestLogOdds:
    def test_matches_extended_precision_oracle(self, rng):
        mpmath = pytest.importorskip("mpmath")
        mpmath.mp.dps = 50

        def oracle(bt, s_j, sigma2, tau, rho):
            bt, s_j, sigma2, tau, rho = map(mpmath.mpf, (bt, s_j, sigma2, tau, rho))
            sigma = mpmath.sqrt(sigma2)
            sd = mpmath.sqrt(sigma2 / s_j)
            mu_p = bt - tau * sigma / s_j
            mu_n = bt + tau * sigma / s_j
            phi = lambda z: mpmath.erfc(-z / mpmath.sqrt(2)) / 2
            slab = mpmath.exp(mu_p**2 / (2 * sd**2)) * phi(mu_p / sd) + mpmath.exp(
                mu_n**2 / (2 * sd**2)
            ) * phi(-mu_n / sd)
            odds = (
                (rho / (1 - rho))
                * (tau / (2 * sigma))
                * mpmath.sqrt(2 * mpmath.pi * sd**2)
                * slab
            )
            return float(mpmath.log(odds))

        for _ in range(50):
            bt = float(rng.normal() * 3)
            s_j = float(abs(rng.normal()) * 50 + 1)
            sigma2 = float(abs(rng.normal()) + 0.2)
            tau = float(abs(rng.normal()) * 2 + 0.05)
            rho = float(rng.uniform(0.05, 0.95))
            got = inclusion_log_odds(bt, s_j, sigma2, tau, rho)
            want = oracle(bt, s_j, sigma2, tau, rho)
            assert got == pytest.approx(want, rel=1e-6, abs=1e-9)


class TestImpute:
    def test_empty_missing_block(self, rng):
        X, y = make_problem(rng)
        state = initial_state(5, y)
        values, out = blasso_impute(X, y, np.empty((0, 5)), state, 3, PAPER_HYPER, rng)
        assert values.shape == (0,)
        assert out is not state  # chain advanced

    def test_sigma2_chain_stabilizes(self, rng):
        X, y = make_problem(rng, n=80, q=5, signal=(2.0, -1.0))
        state = initial_state(5, y)
        sig = []
        for _ in range(2000):
            state = blasso_gibbs_step(state, X, y, PAPER_HYPER, rng)
            sig.append(state.sigma2)
        first = np.mean(sig[1000:1500])
        second = np.mean(sig[1500:2000])
        assert abs(second - first) / first < 0.10

    def test_reproducible(self, rng):
        X, y = make_problem(rng)
        Xm = rng.normal(size=(6, 5))
        v1, s1 = blasso_impute(X, y, Xm, initial_state(5, y), 5, PAPER_HYPER, np.random.default_rng(9))
        v2, s2 = blasso_impute(X, y, Xm, initial_state(5, y), 5, PAPER_HYPER, np.random.default_rng(9))
        assert np.array_equal(v1, v2)
        assert np.array_equal(s1.beta, s2.beta)
        assert s1.sigma2 == s2.sigma2

    def test_invalid_hyper_rejected(self):
        with pytest.raises(ValueError):
            BlassoHyper(a=0.0)

    def test_truncated_normal_moments(self, rng):
        from scipy import stats

        from hdmice.bayes_lasso import _truncated_normal

        for mu, sd, positive in [(1.0, 0.5, True), (-3.0, 1.0, True), (2.0, 0.7, False)]:
            draws = np.array([_truncated_normal(mu, sd, positive, rng) for _ in range(20_000)])
            if positive:
                a, b = (0 - mu) / sd, np.inf
            else:
                a, b = -np.inf, (0 - mu) / sd
            want = stats.truncnorm.mean(a, b, loc=mu, scale=sd)
            sd_want = stats.truncnorm.std(a, b, loc=mu, scale=sd)
            assert abs(draws.mean() - want) < 4 * sd_want / np.sqrt(draws.size) + 1e-3
            assert np.all(draws > 0) if positive else np.all(draws < 0)
