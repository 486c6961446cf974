"""The chained-equations driver: initialization, per-target predictor
selection, elementary-method dispatch, iteration, multiple chains, and
convergence diagnostics.

Each of the d chains is seeded independently from the spec seed, starts from
a uniform-donor fill, and sweeps the target columns in ascending order for M
iterations; the chain's final state is one completed dataset. Identical
(data, mask, spec) inputs produce bitwise-identical output regardless of how
callers schedule the chains.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import bayes_lasso, trees
from .bayes_lasso import BlassoHyper, BlassoState
from .data import Dataset, MissingMask, pairwise_correlation, standardize, validate_observed
from .pca import pca_fit, pca_scores
from .pooling import Estimand, estimand_from_sample, rubin_pool
from .regress import (
    LinearFit,
    SingularDesignError,
    bayes_ridge_draw,
    lasso_cv,
    lasso_path,
    ols_mle,
    predictive_draw,
    ridge_mle,
)

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


class Method(str, Enum):
    BRIDGE = "BRIDGE"
    DURR = "DURR"
    IURR = "IURR"
    BLASSO = "BLASSO"
    MI_PCA = "MI_PCA"
    MI_CART = "MI_CART"
    MI_RF = "MI_RF"
    MI_QP = "MI_QP"
    MI_AM = "MI_AM"
    MI_OR = "MI_OR"


def default_iterations(method: Method) -> int:
    """BLASSO converges far more slowly than the rest (its elementary model
    is itself an MCMC chain), so it gets 200 iterations of 10 sweeps each."""
    return 200 if method is Method.BLASSO else 50


@dataclass(frozen=True)
class MethodParams:
    """Per-method settings; only the fields relevant to the chosen method are
    consulted."""

    kappa: float = 1e-4                 # BRIDGE ridge penalty
    cv_folds: int = 10                  # DURR / IURR lasso cross-validation
    blasso_hyper: BlassoHyper = field(default_factory=BlassoHyper)
    blasso_sweeps: int = 10             # Gibbs sweeps per MICE iteration
    var_target: float = 0.5             # MI_PCA explained-variance target
    min_leaf: int = 5                   # trees
    cp: float = 1e-4
    n_trees: int = 10
    mtry: int | None = None             # default floor(sqrt(q))
    quickpred_threshold: float = 0.1    # MI_QP screening
    collinearity_threshold: float = 0.999
    qp_kappa: float = 1e-5
    qp_eps: float = 1e-4                # near-linear-dependence ratio floor
    analysis_columns: tuple[str, ...] | None = None   # MI_AM
    oracle_columns: tuple[str, ...] | None = None     # MI_OR


@dataclass(frozen=True)
class ImputationSpec:
    method: Method
    iterations: int = 50
    chains: int = 5
    seed: int = 0
    params: MethodParams = field(default_factory=MethodParams)

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.method is Method.MI_AM and not self.params.analysis_columns:
            raise ValueError("MI_AM requires params.analysis_columns")
        if self.method is Method.MI_OR and not self.params.oracle_columns:
            raise ValueError("MI_OR requires params.oracle_columns")
        if self.method is Method.BLASSO and self.params.blasso_sweeps < 1:
            raise ValueError("BLASSO requires blasso_sweeps >= 1")


@dataclass(eq=False)
class ChainTrace:
    """Mean and sd of the imputed values per chain x iteration x target."""

    means: np.ndarray
    sds: np.ndarray
    targets: tuple[int, ...]

    def rows(self, columns: tuple[str, ...]):
        d, M, t = self.means.shape
        for c in range(d):
            for m in range(M):
                for tix in range(t):
                    yield (c, m, columns[self.targets[tix]],
                           float(self.means[c, m, tix]), float(self.sds[c, m, tix]))


@dataclass(eq=False)
class MultiplyImputedData:
    datasets: list[Dataset]
    mask: MissingMask
    trace: ChainTrace
    spec: ImputationSpec


class ChainError(RuntimeError):
    """Elementary-method failure with the offending chain/target/iteration."""

    def __init__(self, method: Method, column: str, iteration: int, chain: int, cause: str):
        self.method = method
        self.column = column
        self.iteration = iteration
        self.chain = chain
        super().__init__(
            f"{method.value} failed on column {column!r} "
            f"(chain {chain}, iteration {iteration}): {cause}"
        )


def _fill_values(values: np.ndarray, mask: MissingMask, rng: np.random.Generator) -> np.ndarray:
    work = values.copy()
    work[mask.mask] = np.nan  # poison first so true values cannot leak
    for j in mask.target_columns:
        mis = mask.mask[:, j]
        donors = values[~mis, j]
        if donors.shape[0] == 0:
            raise ValueError(f"column {j} has no observed values to start from")
        if mis.any():
            work[mis, j] = rng.choice(donors, size=int(mis.sum()), replace=True)
    return work


def initialize_fill(data: Dataset, mask: MissingMask, rng: np.random.Generator) -> Dataset:
    """Fill every missing cell with a uniform draw from the same column's
    observed values (the starting point every chain iterates away from)."""
    return Dataset(values=_fill_values(data.values, mask, rng), columns=data.columns)


def quickpred_select(data: Dataset, mask: MissingMask, j: int, threshold: float) -> np.ndarray:
    """Columns whose absolute pairwise correlation with the target, or with
    its response indicator, reaches the screening threshold. Undefined
    correlations never select."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    masked = data.values.copy()
    masked[mask.mask] = np.nan
    zj = masked[:, j]
    indicator = mask.mask[:, j].astype(np.float64)
    selected = []
    for k in range(data.p):
        if k == j:
            continue
        zk = masked[:, k]
        r_target = pairwise_correlation(zk, zj)
        r_ind = pairwise_correlation(zk, indicator)
        if (np.isfinite(r_target) and abs(r_target) >= threshold) or (
            np.isfinite(r_ind) and abs(r_ind) >= threshold
        ):
            selected.append(k)
    return np.asarray(selected, dtype=np.intp)


def drop_collinear(P: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy screen in column order: drop any column whose absolute
    correlation with an already-kept column exceeds the threshold.
    Undefined correlations (constant columns) never trigger a drop."""
    ncol = P.shape[1]
    if ncol <= 1:
        return np.arange(ncol, dtype=np.intp)
    with np.errstate(divide="ignore", invalid="ignore"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            corr = np.abs(np.corrcoef(P, rowvar=False))
    kept = [0]
    for idx in range(1, ncol):
        against = corr[idx, kept]
        if not np.any(against > threshold):  # NaN compares False
            kept.append(idx)
    return np.asarray(kept, dtype=np.intp)


def eps_screen(Z: np.ndarray, eps: float) -> np.ndarray:
    """Near-linear-dependence screen on standardized predictors: while the
    correlation matrix's smallest/largest eigenvalue ratio is below eps, drop
    the column loading most heavily on each offending eigenvector (one column
    per eigenvector below the floor, batched, then re-check)."""
    k = Z.shape[1]
    if k <= 1:
        return np.arange(k, dtype=np.intp)
    keep = np.nonzero(Z.std(axis=0) > 0)[0].astype(np.intp)
    while keep.shape[0] > 1:
        C = np.corrcoef(Z[:, keep], rowvar=False)
        w, V = np.linalg.eigh(C)
        if w[0] / w[-1] >= eps:
            break
        offending = np.nonzero(w / w[-1] < eps)[0]
        drop: set[int] = set()
        for b in offending:
            for cand in np.argsort(-np.abs(V[:, b])):
                if int(cand) not in drop:
                    drop.add(int(cand))
                    break
        hold = np.ones(keep.shape[0], dtype=bool)
        hold[list(drop)] = False
        keep = keep[hold]
    return keep


def _standardized_design(
    P: np.ndarray, obs: np.ndarray, mis: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Standardize predictors on the observed rows, map the missing rows with
    the same transform, and drop degenerate (constant-on-observed) columns."""
    Xo, std = standardize(P[obs])
    Xm = std.apply(P[mis])
    keep = ~std.degenerate
    if not keep.all():
        Xo = Xo[:, keep]
        Xm = Xm[:, keep]
    return Xo, Xm


def _bayes_normal_values(
    P: np.ndarray,
    y_all: np.ndarray,
    obs: np.ndarray,
    mis: np.ndarray,
    kappa: float,
    rng: np.random.Generator,
) -> np.ndarray:
    Xo, Xm = _standardized_design(P, obs, mis)
    fit = bayes_ridge_draw(Xo, y_all[obs], kappa, rng)
    return predictive_draw(fit, Xm, rng)


def _durr_values(
    work: np.ndarray,
    obs: np.ndarray,
    mis: np.ndarray,
    j: int,
    cols: np.ndarray,
    folds: int,
    rng: np.random.Generator,
) -> np.ndarray:
    n = work.shape[0]
    boot = rng.integers(0, n, size=n)
    rows = boot[obs[boot]]  # bootstrap first, then restrict to rows observed on j
    if rows.shape[0] < 4:
        raise ValueError("bootstrap kept fewer than 4 observed rows")
    P = work[:, cols]
    Xb, std = standardize(P[rows])
    keep = ~std.degenerate
    Xm = std.apply(P[mis])
    if not keep.all():
        Xb = Xb[:, keep]
        Xm = Xm[:, keep]
    yb = work[rows, j]
    cv = lasso_cv(Xb, yb, folds=min(folds, rows.shape[0]), rng=rng)
    fit = lasso_path(Xb, yb, cv.lambda_star)
    return predictive_draw(fit, Xm, rng)


def _safe_cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _iurr_values(
    work: np.ndarray,
    obs: np.ndarray,
    mis: np.ndarray,
    j: int,
    cols: np.ndarray,
    folds: int,
    rng: np.random.Generator,
    capture: dict | None = None,
) -> np.ndarray:
    P = work[:, cols]
    Xo, Xm = _standardized_design(P, obs, mis)
    y = work[obs, j]
    n_obs = y.shape[0]
    cv = lasso_cv(Xo, y, folds=min(folds, n_obs), rng=rng)
    selector = lasso_path(Xo, y, cv.lambda_star)
    active = selector.active_set  # the lasso active set, and nothing else, enters the MLE
    XA = Xo[:, active]
    XAm = Xm[:, active]
    qA = active.shape[0]
    try:
        mle = ols_mle(XA, y)
    except SingularDesignError:
        logger.info("IURR: singular MLE design (q=%d, n=%d); ridge fallback", qA, n_obs)
        mle = ridge_mle(XA, y, 1e-5)

    sigma_hat = math.sqrt(mle.sigma2)
    nu = max(n_obs - qA - 1, 1)
    mean = np.concatenate([[mle.intercept], mle.coefficients, [sigma_hat]])
    cov = np.zeros((qA + 2, qA + 2))
    cov[: qA + 1, : qA + 1] = mle.coef_covariance
    cov[qA + 1, qA + 1] = mle.sigma2 / (2.0 * nu)
    L = _safe_cholesky(cov)

    draw = mean
    sigma_draw = sigma_hat
    fallback = False
    for _ in range(10):
        draw = mean + L @ rng.standard_normal(qA + 2)
        if draw[-1] > 0.0:
            sigma_draw = float(draw[-1])
            break
    else:
        # the joint normal of Eq.-style MLE draws admits negative sigma;
        # after 10 rejections keep the coefficient draw and the MLE sigma
        fallback = True
        sigma_draw = sigma_hat
        logger.info("IURR: 10 negative sigma draws on column %d; using MLE sigma", j)
    if capture is not None:
        capture["active_set"] = active.copy()
        capture["mle_q"] = qA
        capture["sigma_fallback"] = fallback
    fit = LinearFit(intercept=float(draw[0]), coefficients=draw[1:-1], sigma2=sigma_draw**2)
    return predictive_draw(fit, XAm, rng)


def _blasso_values(
    work: np.ndarray,
    obs: np.ndarray,
    mis: np.ndarray,
    j: int,
    cols: np.ndarray,
    state: BlassoState | None,
    hyper: BlassoHyper,
    sweeps: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, BlassoState]:
    P = work[:, cols]
    # degenerate columns stay as exact-zero columns so the warm state keeps a
    # stable length across iterations; the sampler skips them
    Xo, std = standardize(P[obs])
    Xm = std.apply(P[mis])
    y = work[obs, j]
    ym = float(y.mean())
    yc = y - ym
    if state is None:
        state = bayes_lasso.initial_state(Xo.shape[1], yc)
    values, state = bayes_lasso.blasso_impute(Xo, yc, Xm, state, sweeps, hyper, rng)
    return values + ym, state


@dataclass(eq=False)
class _Shared:
    effective: list[int]
    all_cols: dict[int, np.ndarray]
    scores: np.ndarray | None = None
    qp_sets: dict[int, np.ndarray] = field(default_factory=dict)
    list_cols: dict[int, np.ndarray] = field(default_factory=dict)


def _resolve_columns(data: Dataset, names: tuple[str, ...]) -> np.ndarray:
    return np.asarray([data.column_index(c) for c in names], dtype=np.intp)


def _prepare_shared(data: Dataset, mask: MissingMask, spec: ImputationSpec) -> _Shared:
    targets = sorted(mask.target_columns)
    effective = [j for j in targets if mask.mask[:, j].any()]
    if len(effective) < len(targets):
        warnings.warn(
            "target column(s) without missing cells are left untouched", RuntimeWarning
        )
    shared = _Shared(
        effective=effective,
        all_cols={j: np.asarray([k for k in range(data.p) if k != j], dtype=np.intp)
                  for j in effective},
    )
    method = spec.method
    if method is Method.MI_PCA:
        target_set = set(mask.target_columns)
        aux = [k for k in range(data.p) if k not in target_set]
        if aux:
            model = pca_fit(data.values[:, aux], spec.params.var_target)
            shared.scores = pca_scores(model, data.values[:, aux])
        else:
            shared.scores = np.empty((data.n, 0))
    elif method is Method.MI_QP:
        for j in effective:
            shared.qp_sets[j] = quickpred_select(data, mask, j, spec.params.quickpred_threshold)
    elif method in (Method.MI_AM, Method.MI_OR):
        names = (spec.params.analysis_columns if method is Method.MI_AM
                 else spec.params.oracle_columns)
        listed = _resolve_columns(data, names)
        for j in effective:
            shared.list_cols[j] = listed[listed != j]
    return shared


def _chain_pass(
    data: Dataset,
    mask: MissingMask,
    spec: ImputationSpec,
    shared: _Shared,
    chain: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = spec.params
    M = spec.iterations
    t = len(shared.effective)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed & _SEED_MASK, chain)))
    work = _fill_values(data.values, mask, rng)
    means = np.empty((M, t))
    sds = np.empty((M, t))
    blasso_states: dict[int, BlassoState] = {}

    for m in range(M):
        for tix, j in enumerate(shared.effective):
            mis = mask.mask[:, j]
            obs = ~mis
            try:
                method = spec.method
                if method is Method.BRIDGE:
                    values = _bayes_normal_values(
                        work[:, shared.all_cols[j]], work[:, j], obs, mis, p.kappa, rng
                    )
                elif method is Method.MI_QP:
                    sel = shared.qp_sets[j]
                    if sel.shape[0]:
                        P_obs = work[obs][:, sel]
                        kept = sel[drop_collinear(P_obs, p.collinearity_threshold)]
                        Zk, _ = standardize(work[obs][:, kept])
                        kept = kept[eps_screen(Zk, p.qp_eps)]
                        P = work[:, kept]
                    else:
                        P = np.empty((work.shape[0], 0))
                    # the quoted ridge default multiplies diag(X'X), which is
                    # n_obs - 1 on the standardized scale
                    kappa_eff = p.qp_kappa * max(int(obs.sum()) - 1, 1)
                    values = _bayes_normal_values(P, work[:, j], obs, mis, kappa_eff, rng)
                elif method in (Method.MI_AM, Method.MI_OR):
                    P = work[:, shared.list_cols[j]]
                    values = _bayes_normal_values(P, work[:, j], obs, mis, 0.0, rng)
                elif method is Method.MI_PCA:
                    other = [k for k in shared.effective if k != j]
                    P = np.column_stack([work[:, other], shared.scores]) if other else shared.scores
                    values = _bayes_normal_values(P, work[:, j], obs, mis, 0.0, rng)
                elif method is Method.DURR:
                    values = _durr_values(work, obs, mis, j, shared.all_cols[j], p.cv_folds, rng)
                elif method is Method.IURR:
                    values = _iurr_values(work, obs, mis, j, shared.all_cols[j], p.cv_folds, rng)
                elif method is Method.BLASSO:
                    values, state = _blasso_values(
                        work, obs, mis, j, shared.all_cols[j],
                        blasso_states.get(j), p.blasso_hyper, p.blasso_sweeps, rng,
                    )
                    blasso_states[j] = state
                elif method is Method.MI_CART:
                    P = work[:, shared.all_cols[j]]
                    tree = trees.cart_fit(P[obs], work[obs, j], p.min_leaf, p.cp)
                    values = trees.cart_impute(tree, work[obs, j], P[mis], rng)
                elif method is Method.MI_RF:
                    P = work[:, shared.all_cols[j]]
                    q = P.shape[1]
                    mtry = p.mtry if p.mtry is not None else max(1, int(math.isqrt(q)))
                    forest = trees.forest_fit(
                        P[obs], work[obs, j], p.n_trees, mtry, p.min_leaf, rng, cp=p.cp
                    )
                    values = trees.forest_impute(forest, work[obs, j], P[mis], rng)
                else:  # pragma: no cover
                    raise ValueError(f"unhandled method {method}")
                if not np.all(np.isfinite(values)):
                    raise ValueError("non-finite imputations")
            except Exception as exc:
                raise ChainError(spec.method, data.columns[j], m, chain, str(exc)) from exc
            work[mis, j] = values
            means[m, tix] = float(values.mean())
            sds[m, tix] = float(values.std(ddof=1)) if values.shape[0] > 1 else 0.0
    return work, means, sds


def mice_run(data: Dataset, mask: MissingMask, spec: ImputationSpec) -> MultiplyImputedData:
    """Run d independent chains of M chained-equation iterations and return
    each chain's final completed dataset, the per-iteration trace, and the
    spec. Observed cells are preserved bitwise."""
    spec.validate()
    validate_observed(data, mask)
    shared = _prepare_shared(data, mask, spec)
    d = spec.chains
    M = spec.iterations
    t = len(shared.effective)
    means = np.empty((d, M, t))
    sds = np.empty((d, M, t))
    datasets = []
    observed = ~mask.mask
    for c in range(d):
        work, m_c, s_c = _chain_pass(data, mask, spec, shared, c)
        if not np.array_equal(work[observed], data.values[observed]):
            raise AssertionError("observed cells were modified")  # defensive; never expected
        means[c] = m_c
        sds[c] = s_c
        datasets.append(Dataset(values=work, columns=data.columns))
    trace = ChainTrace(means=means, sds=sds, targets=tuple(shared.effective))
    return MultiplyImputedData(datasets=datasets, mask=mask, trace=trace, spec=spec)


DEFAULT_KAPPA_GRID: tuple[float, ...] = tuple(10.0 ** -k for k in range(1, 9))


@dataclass(frozen=True)
class KappaCvResult:
    kappa: float
    fmi_by_kappa: dict[float, float]
    failures: dict[float, str]


def ridge_kappa_cv(
    data: Dataset,
    mask: MissingMask,
    grid: tuple[float, ...],
    pilot_spec: ImputationSpec,
    estimands: list[Estimand],
) -> KappaCvResult:
    """Pick the ridge penalty whose pilot BRIDGE imputation has the smallest
    average fraction of missing information across the estimands (ties go to
    the larger penalty). Penalties whose pilot run fails are excluded."""
    if not grid:
        raise ValueError("empty penalty grid")
    fmi_by_kappa: dict[float, float] = {}
    failures: dict[float, str] = {}
    for kappa in sorted(grid, reverse=True):
        spec_k = replace(
            pilot_spec, method=Method.BRIDGE, params=replace(pilot_spec.params, kappa=kappa)
        )
        try:
            mi = mice_run(data, mask, spec_k)
            fmis = [
                rubin_pool([estimand_from_sample(e, ds) for ds in mi.datasets]).fmi
                for e in estimands
            ]
        except Exception as exc:
            failures[kappa] = str(exc)
            logger.warning("ridge penalty %.1e pilot failed: %s", kappa, exc)
            continue
        fmi_by_kappa[kappa] = float(np.mean(fmis))
    if not fmi_by_kappa:
        raise RuntimeError("every penalty in the grid failed")
    best = None
    best_fmi = math.inf
    for kappa in sorted(fmi_by_kappa, reverse=True):  # ties keep the larger penalty
        if fmi_by_kappa[kappa] < best_fmi:
            best_fmi = fmi_by_kappa[kappa]
            best = kappa
    return KappaCvResult(kappa=best, fmi_by_kappa=fmi_by_kappa, failures=failures)


def convergence_summary(trace: ChainTrace) -> np.ndarray:
    """Per-target drift: the relative difference between the mean imputed
    value over the last 20% of iterations and over the preceding 20%
    (chains averaged first). Near-zero reference segments fall back to the
    absolute difference."""
    M = trace.means.shape[1]
    if M < 10:
        raise ValueError("need at least 10 iterations to summarize convergence")
    series = trace.means.mean(axis=0)  # (M, t)
    k = max(1, int(0.2 * M))
    last = series[M - k:].mean(axis=0)
    prev = series[M - 2 * k: M - k].mean(axis=0)
    denom = np.abs(prev)
    return (last - prev) / np.where(denom > 1e-12, denom, 1.0)
