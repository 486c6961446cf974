import numpy as np
import pytest

from hdmice.amputation import impose_mar
from hdmice.data import Dataset, MissingMask
from hdmice.engine import (
    ChainError,
    ChainTrace,
    ImputationSpec,
    Method,
    MethodParams,
    convergence_summary,
    default_iterations,
    drop_collinear,
    eps_screen,
    initialize_fill,
    mice_run,
    quickpred_select,
    ridge_kappa_cv,
    _iurr_values,
)
from hdmice.pooling import Estimand, estimand_from_sample, rubin_pool
from hdmice.simulation import PopulationModel, default_mar_spec, gen_sample
from hdmice.data import standardize


def small_problem(seed=0, n=40, p=8, pm=0.25):
    rng = np.random.default_rng(seed)
    data = gen_sample(PopulationModel(p=max(p, 10)), n, rng)
    if p < 10:
        data = Dataset(values=data.values[:, :p], columns=data.columns[:p])
    mask = np.zeros((n, p), dtype=bool)
    for j in (0, 1):
        col = rng.random(n) < pm
        col[:3] = False  # keep a few observed rows
        mask[:, j] = col
    return data, MissingMask(mask=mask, target_columns=(0, 1))


class TestInitializeFill:
    def test_identity_without_missingness(self, rng):
        data, _ = small_problem()
        mask = MissingMask(mask=np.zeros((40, 8), dtype=bool), target_columns=(0,))
        out = initialize_fill(data, mask, rng)
        assert np.array_equal(out.values, data.values)

    def test_constant_donor_column(self, rng):
        values = np.column_stack([np.full(20, 7.0), np.arange(20.0)])
        mask = np.zeros((20, 2), dtype=bool)
        mask[5:10, 0] = True
        data = Dataset(values=values, columns=("a", "b"))
        out = initialize_fill(data, MissingMask(mask=mask, target_columns=(0,)), rng)
        assert np.all(out.values[5:10, 0] == 7.0)

    def test_fill_marginal_frequency(self, rng):
        n = 200_000
        values = np.zeros((n, 1))
        values[:50_000, 0] = 1.0  # observed donors: half 1, half 0
        mask = np.zeros((n, 1), dtype=bool)
        mask[100_000:, 0] = True
        data = Dataset(values=values, columns=("a",))
        out = initialize_fill(data, MissingMask(mask=mask, target_columns=(0,)), rng)
        assert 0.49 <= out.values[mask[:, 0], 0].mean() <= 0.51

    def test_fully_missing_column_rejected(self, rng):
        values = np.ones((5, 2))
        mask = np.zeros((5, 2), dtype=bool)
        mask[:, 0] = True
        data = Dataset(values=values, columns=("a", "b"))
        with pytest.raises(ValueError):
            initialize_fill(data, MissingMask(mask=mask, target_columns=(0,)), rng)


class TestQuickpred:
    def build(self, rng, n=400):
        # target t; p1 strongly related to t; p2 unrelated to everything;
        # p3 related only to the response indicator
        t = rng.normal(size=n)
        p1 = 0.6 * t + 0.8 * rng.normal(size=n)
        p2 = rng.normal(size=n)
        p3 = rng.normal(size=n)
        miss = (0.8 * p3 + 0.6 * rng.normal(size=n)) > 0.8
        values = np.column_stack([t, p1, p2, p3])
        mask = np.zeros((n, 4), dtype=bool)
        mask[:, 0] = miss
        data = Dataset(values=values, columns=("t", "p1", "p2", "p3"))
        return data, MissingMask(mask=mask, target_columns=(0,))

    def test_rule_application(self, rng):
        data, mask = self.build(rng)
        sel = quickpred_select(data, mask, 0, 0.1)
        assert 1 in sel and 3 in sel and 2 not in sel

    def test_zero_threshold_selects_everything_defined(self, rng):
        data, mask = self.build(rng)
        sel = quickpred_select(data, mask, 0, 0.0)
        assert np.array_equal(sel, [1, 2, 3])

    def test_unit_threshold_selects_only_perfect(self, rng):
        t = rng.normal(size=100)
        values = np.column_stack([t, t.copy(), rng.normal(size=100)])
        mask = np.zeros((100, 3), dtype=bool)
        mask[: 20, 0] = True
        data = Dataset(values=values, columns=("t", "dup", "x"))
        mm = MissingMask(mask=mask, target_columns=(0,))
        assert np.array_equal(quickpred_select(data, mm, 0, 1.0), [1])

    def test_undefined_correlations_never_select(self, rng):
        values = np.column_stack([rng.normal(size=50), np.full(50, 3.0)])
        mask = np.zeros((50, 2), dtype=bool)
        mask[:10, 0] = True
        data = Dataset(values=values, columns=("t", "const"))
        mm = MissingMask(mask=mask, target_columns=(0,))
        assert quickpred_select(data, mm, 0, 0.0).size == 0


class TestCollinearityScreens:
    def test_drop_collinear_removes_duplicates(self, rng):
        x = rng.normal(size=100)
        P = np.column_stack([x, rng.normal(size=100), x * 2.0 + 1e-9 * rng.normal(size=100)])
        kept = drop_collinear(P, 0.999)
        assert np.array_equal(kept, [0, 1])

    def test_drop_collinear_keeps_moderate_correlation(self, rng):
        x = rng.normal(size=100)
        P = np.column_stack([x, 0.8 * x + 0.6 * rng.normal(size=100)])
        assert np.array_equal(drop_collinear(P, 0.999), [0, 1])

    def test_no_surviving_pair_exceeds_threshold(self, rng):
        x = rng.normal(size=80)
        P = np.column_stack([x + 1e-8 * rng.normal(size=80) for _ in range(6)])
        kept = drop_collinear(P, 0.999)
        corr = np.corrcoef(P[:, kept], rowvar=False)
        if kept.size > 1:
            off = np.abs(corr - np.eye(kept.size))
            assert off.max() <= 0.999

    def test_eps_screen_restores_conditioning(self, rng):
        Z = standardize(rng.normal(size=(50, 80)))[0]
        kept = eps_screen(Z, 1e-4)
        C = np.corrcoef(Z[:, kept], rowvar=False)
        w = np.linalg.eigvalsh(C)
        assert w[0] / w[-1] >= 1e-4
        assert kept.size < 80

    def test_eps_screen_keeps_well_conditioned_input(self, rng):
        Z = standardize(rng.normal(size=(200, 5)))[0]
        assert np.array_equal(eps_screen(Z, 1e-4), np.arange(5))


class TestMiceRun:
    def spec(self, method, **kw):
        params = MethodParams(**kw.pop("params", {}))
        return ImputationSpec(method=method, iterations=kw.pop("iterations", 3),
                              chains=kw.pop("chains", 2), seed=kw.pop("seed", 5), params=params)

    def test_zero_missing_cells_returns_copies(self, rng):
        data, _ = small_problem()
        mask = MissingMask(mask=np.zeros((40, 8), dtype=bool), target_columns=(0,))
        with pytest.warns(RuntimeWarning):
            mi = mice_run(data, mask, self.spec(Method.BRIDGE))
        assert len(mi.datasets) == 2
        for ds in mi.datasets:
            assert np.array_equal(ds.values, data.values)
        assert mi.trace.means.shape == (2, 3, 0)

    @pytest.mark.parametrize(
        "method,params",
        [
            (Method.BRIDGE, {"kappa": 1e-4}),
            (Method.DURR, {"cv_folds": 4}),
            (Method.IURR, {"cv_folds": 4}),
            (Method.BLASSO, {"blasso_sweeps": 3}),
            (Method.MI_PCA, {}),
            (Method.MI_CART, {"min_leaf": 3}),
            (Method.MI_RF, {"n_trees": 4, "min_leaf": 3}),
            (Method.MI_QP, {}),
            (Method.MI_AM, {"analysis_columns": ("v1", "v2", "v3")}),
            (Method.MI_OR, {"oracle_columns": ("v1", "v2", "v3", "v4")}),
        ],
    )
    def test_every_method_preserves_observed_and_reproduces(self, method, params):
        data, mask = small_problem(seed=3)
        spec = self.spec(method, params=params)
        mi1 = mice_run(data, mask, spec)
        obs = ~mask.mask
        for ds in mi1.datasets:
            assert np.array_equal(ds.values[obs], data.values[obs])
            assert np.all(np.isfinite(ds.values))
            assert not np.array_equal(ds.values[mask.mask], data.values[mask.mask])
        mi2 = mice_run(data, mask, spec)
        for a, b in zip(mi1.datasets, mi2.datasets):
            assert np.array_equal(a.values, b.values)
        assert np.array_equal(mi1.trace.means, mi2.trace.means)

    def test_chains_differ(self):
        data, mask = small_problem(seed=4)
        mi = mice_run(data, mask, self.spec(Method.BRIDGE, params={"kappa": 1e-4}))
        assert not np.array_equal(mi.datasets[0].values, mi.datasets[1].values)

    def test_am_or_dispatch_equivalence(self):
        data, mask = small_problem(seed=6)
        cols = ("v1", "v2", "v3", "v5")
        am = mice_run(data, mask, self.spec(Method.MI_AM, params={"analysis_columns": cols}))
        orc = mice_run(data, mask, self.spec(Method.MI_OR, params={"oracle_columns": cols}))
        for a, b in zip(am.datasets, orc.datasets):
            assert np.array_equal(a.values, b.values)

    def test_mi_or_small_instance_statistics(self):
        # strong linear truth on 3 variables; pooled mean should track the
        # complete-data mean within 3 pooled standard errors nearly always
        inside = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = 80
            x = rng.normal(size=n)
            z = 0.8 * x + 0.6 * rng.normal(size=n)
            y = 1.0 + 2.0 * x + rng.normal(size=n) * 0.5
            values = np.column_stack([y, x, z])
            miss = np.zeros((n, 3), dtype=bool)
            miss[:, 0] = rng.random(n) < 0.3
            data = Dataset(values=values, columns=("y", "x", "z"))
            mask = MissingMask(mask=miss, target_columns=(0,))
            spec = ImputationSpec(
                Method.MI_OR, iterations=10, chains=5, seed=seed,
                params=MethodParams(oracle_columns=("y", "x", "z")),
            )
            mi = mice_run(data, mask, spec)
            est = Estimand("mean", ("y",))
            pool = rubin_pool([estimand_from_sample(est, ds) for ds in mi.datasets])
            truth = values[:, 0].mean()
            inside += abs(pool.qbar - truth) <= 3.0 * np.sqrt(pool.T)
        assert inside >= 95

    def test_chain_error_names_the_failure(self):
        rng = np.random.default_rng(0)
        values = rng.normal(size=(40, 3))
        miss = np.zeros((40, 3), dtype=bool)
        miss[2:, 0] = True  # 2 observed rows only: the normal draw cannot fit
        data = Dataset(values=values, columns=("a", "b", "c"))
        mask = MissingMask(mask=miss, target_columns=(0,))
        with pytest.raises(ChainError) as err:
            mice_run(data, mask, self.spec(Method.BRIDGE))
        assert "BRIDGE" in str(err.value) and "'a'" in str(err.value)

    def test_iurr_mle_sees_exactly_the_active_set(self, rng):
        data, mask = small_problem(seed=9, n=60)
        work = data.values.copy()
        obs = ~mask.mask[:, 0]
        mis = mask.mask[:, 0]
        work[mis, 0] = work[obs, 0].mean()
        capture = {}
        _iurr_values(work, obs, mis, 0, np.arange(1, 8), 5, rng, capture=capture)
        assert capture["mle_q"] == capture["active_set"].shape[0]

    def test_default_iterations(self):
        assert default_iterations(Method.BLASSO) == 200
        assert default_iterations(Method.BRIDGE) == 50

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ImputationSpec(Method.MI_AM).validate()
        with pytest.raises(ValueError):
            ImputationSpec(Method.BRIDGE, iterations=0).validate()


class TestRidgeKappaCv:
    def test_single_point_grid(self):
        data, mask = small_problem(seed=11)
        pilot = ImputationSpec(Method.BRIDGE, iterations=3, chains=2, seed=1)
        ests = [Estimand("mean", ("v1",))]
        out = ridge_kappa_cv(data, mask, (1e-3,), pilot, ests)
        assert out.kappa == 1e-3
        assert set(out.fmi_by_kappa) == {1e-3}

    def test_selection_matches_recorded_fmis(self):
        data, mask = small_problem(seed=12, n=60)
        pilot = ImputationSpec(Method.BRIDGE, iterations=5, chains=3, seed=2)
        ests = [Estimand("mean", ("v1",)), Estimand("variance", ("v1",))]
        out = ridge_kappa_cv(data, mask, (1e-1, 1e-5), pilot, ests)
        best = min(sorted(out.fmi_by_kappa, reverse=True), key=lambda k: out.fmi_by_kappa[k])
        assert out.kappa == best

    def test_deterministic(self):
        data, mask = small_problem(seed=13)
        pilot = ImputationSpec(Method.BRIDGE, iterations=3, chains=2, seed=3)
        ests = [Estimand("mean", ("v1",))]
        a = ridge_kappa_cv(data, mask, (1e-2, 1e-4), pilot, ests)
        b = ridge_kappa_cv(data, mask, (1e-2, 1e-4), pilot, ests)
        assert a.kappa == b.kappa
        assert a.fmi_by_kappa == b.fmi_by_kappa


class TestConvergenceSummary:
    def make_trace(self, means):
        means = np.asarray(means, dtype=float)
        return ChainTrace(means=means, sds=np.zeros_like(means), targets=(0,))

    def test_constant_trace(self):
        trace = self.make_trace(np.full((2, 50, 1), 4.2))
        assert np.allclose(convergence_summary(trace), 0.0)

    def test_linear_trend_analytic(self):
        M = 100
        series = np.arange(M, dtype=float)
        trace = self.make_trace(series.reshape(1, M, 1))
        drift = convergence_summary(trace)[0]
        last = series[80:].mean()
        prev = series[60:80].mean()
        assert drift == pytest.approx((last - prev) / abs(prev), rel=1e-12)

    def test_white_noise_is_quiet(self):
        hits = 0
        for seed in range(200):
            rng = np.random.default_rng(seed)
            trace = self.make_trace(rng.normal(5.0, 0.3, size=(1, 100, 1)))
            hits += abs(convergence_summary(trace)[0]) < 0.05
        assert hits >= 190

    def test_needs_ten_iterations(self):
        with pytest.raises(ValueError):
            convergence_summary(self.make_trace(np.zeros((1, 9, 1))))
