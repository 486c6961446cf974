"""Monte Carlo and resampling evaluation harness: block-correlated data
generation, per-replication treatment of amputated data with every requested
strategy, bias/coverage metrics against the gold-standard-defined truth, and
persistence of raw per-replication estimates so results can be re-aggregated
without rerunning.
"""

from __future__ import annotations

import csv
import math
import multiprocessing
import time
import warnings
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np

from .amputation import MarSpec, impose_mar
from .data import DataError, Dataset, format_value
from .engine import Method, MethodParams, ImputationSpec, default_iterations, mice_run
from .pooling import (
    Estimand,
    EstimandValue,
    complete_ci,
    estimand_from_sample,
    regression_estimands,
    rubin_pool,
)

# fixed strategy order: keys per-method seed substreams, independent of the
# method list a particular run happens to pass
STRATEGIES: tuple[str, ...] = ("GS", "CC") + tuple(m.value for m in Method)

DEFAULT_TARGETS: tuple[int, ...] = (0, 1, 2, 5, 6, 7)
DEFAULT_MAR_PREDICTORS: tuple[int, ...] = (3, 4, 8, 9)


@dataclass(frozen=True)
class Condition:
    label: str
    n: int
    p: int
    pm: float
    replications: int


#: the four crossed cells of the factorial design (n=200; p 50/500; pm 0.1/0.3)
PAPER_CONDITIONS: tuple[Condition, ...] = (
    Condition("low-dim-low-pm", 200, 50, 0.1, 1000),
    Condition("high-dim-low-pm", 200, 500, 0.1, 1000),
    Condition("low-dim-high-pm", 200, 50, 0.3, 1000),
    Condition("high-dim-high-pm", 200, 500, 0.3, 1000),
)


@dataclass(frozen=True)
class PopulationModel:
    """Multivariate normal population: means 5, variances 5, a strongly
    correlated block (columns 0-4 at rho 0.6), a weakly correlated block
    (columns 5-9 at rho 0.3, also cross-correlated with block 1 at 0.3), and
    uncorrelated remainder. ``weak_within_block2=False`` switches the weak
    correlation to cross-block only."""

    p: int
    mean: float = 5.0
    variance: float = 5.0
    rho_strong: float = 0.6
    rho_weak: float = 0.3
    weak_within_block2: bool = True

    @property
    def block1(self) -> range:
        return range(0, 5)

    @property
    def block2(self) -> range:
        return range(5, 10)


def gen_covariance(model: PopulationModel) -> np.ndarray:
    """Population covariance with the block structure above; always checked
    Cholesky-factorizable."""
    if model.p < 10:
        raise ValueError("the block design needs p >= 10")
    v = model.variance
    sigma = np.zeros((model.p, model.p))
    np.fill_diagonal(sigma, v)
    for i in model.block1:
        for j in model.block1:
            if i != j:
                sigma[i, j] = model.rho_strong * v
    for i in model.block2:
        for j in model.block1:
            sigma[i, j] = sigma[j, i] = model.rho_weak * v
    if model.weak_within_block2:
        for i in model.block2:
            for j in model.block2:
                if i != j:
                    sigma[i, j] = model.rho_weak * v
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise ValueError("implied covariance matrix is not positive definite") from None
    return sigma


def gen_sample(model: PopulationModel, n: int, rng: np.random.Generator) -> Dataset:
    """n multivariate-normal rows through the Cholesky factor; columns are
    named v1..vp."""
    sigma = gen_covariance(model)
    L = np.linalg.cholesky(sigma)
    values = model.mean + rng.standard_normal((n, model.p)) @ L.T
    return Dataset(values=values, columns=tuple(f"v{k + 1}" for k in range(model.p)))


def prb(estimates: np.ndarray, truth: float) -> float:
    """Absolute percent relative bias of the averaged estimate. A zero truth
    has no relative scale, so the absolute bias is returned instead (callers
    flag that case)."""
    mean = float(np.mean(estimates))
    if truth == 0.0:
        return abs(mean)
    return abs(mean - truth) / abs(truth) * 100.0


def cic(intervals: np.ndarray, truth: float) -> float:
    """Fraction of closed intervals containing the truth."""
    iv = np.asarray(intervals, dtype=np.float64)
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


def significance_band(p0: float, S: int) -> tuple[float, float]:
    """p0 +/- 2 SE(p0): coverages outside it differ significantly from nominal."""
    se = math.sqrt(p0 * (1.0 - p0) / S)
    return p0 - 2.0 * se, p0 + 2.0 * se


def default_mar_spec(pm: float, slope: float = 1.0, slope_scale: float = 1.0) -> MarSpec:
    """The experiment's response model: three strongly and three weakly
    correlated targets, driven by the four remaining block variables with
    equal slopes."""
    return MarSpec(
        targets=DEFAULT_TARGETS,
        predictors=DEFAULT_MAR_PREDICTORS,
        slopes=np.full(len(DEFAULT_MAR_PREDICTORS), slope),
        pm=pm,
        standardize_predictors=True,
        slope_scale=slope_scale,
    )


def experiment_estimands(columns: tuple[str, ...]) -> list[Estimand]:
    """The 27 analysis-model parameters: means, variances, and pairwise
    covariances of the six incomplete variables."""
    names = [columns[j] for j in DEFAULT_TARGETS]
    out = [Estimand("mean", (c,)) for c in names]
    out += [Estimand("variance", (c,)) for c in names]
    out += [
        Estimand("covariance", (names[i], names[k]))
        for i in range(len(names))
        for k in range(i + 1, len(names))
    ]
    return out


@dataclass(frozen=True)
class RegressionModel:
    name: str
    response: str
    predictors: tuple[str, ...]


def regression_model_estimands(models: list[RegressionModel]) -> list[Estimand]:
    out = []
    for m in models:
        cols = (m.response,) + tuple(m.predictors)
        out.append(Estimand("coefficient", cols, term="intercept"))
        out += [Estimand("coefficient", cols, term=p) for p in m.predictors]
    return out


@dataclass(frozen=True)
class EstimateRow:
    replication: int
    method: str
    estimand: str
    estimate: float
    ci_low: float
    ci_high: float
    fmi: float  # NaN for strategies without an imputation phase
    wallclock_ms: float


@dataclass(frozen=True)
class FailureRow:
    replication: int
    method: str
    message: str


@dataclass(frozen=True)
class MetricRow:
    method: str
    estimand: str
    prb: float
    cic: float
    avg_ci_width: float
    truth: float
    absolute_bias: bool  # truth was 0; prb holds the absolute bias

    @property
    def biased(self) -> bool:
        return self.prb > 10.0

    @property
    def severe_under(self) -> bool:
        return self.cic < 0.90

    @property
    def severe_over(self) -> bool:
        return self.cic > 0.99

    @property
    def significant(self) -> bool:
        return not (0.94 <= self.cic <= 0.96)

    @property
    def flags(self) -> str:
        present = []
        if self.biased:
            present.append("biased")
        if self.severe_under:
            present.append("severe_under")
        if self.severe_over:
            present.append("severe_over")
        if self.significant:
            present.append("significant")
        if self.absolute_bias:
            present.append("absolute_bias")
        return ";".join(present)


@dataclass(frozen=True)
class MethodSummary:
    method: str
    replications_used: int
    failures: int
    wallclock_ms: float
    valid: bool  # invalid once failures exceed 5% of replications


@dataclass(eq=False)
class ConditionResult:
    label: str
    metrics: list[MetricRow]
    methods: list[MethodSummary]

    def metric(self, method: str, estimand: str) -> MetricRow:
        for row in self.metrics:
            if row.method == method and row.estimand == estimand:
                return row
        raise KeyError((method, estimand))


@dataclass(frozen=True)
class HarnessOptions:
    """Knobs the experiments turn without touching the engine defaults."""

    d: int = 5
    iterations: int | None = None  # None: per-method default (50; BLASSO 200)
    mar_slope: float = 1.0         # 0 gives MCAR
    mar_slope_scale: float = 1.0
    method_params: dict[str, MethodParams] = field(default_factory=dict)


def _method_seed(master_seed: int, s: int, name: str) -> int:
    ss = np.random.SeedSequence((master_seed, s, 100 + STRATEGIES.index(name)))
    return int(ss.generate_state(1, np.uint64)[0])


def _build_spec(
    name: str,
    master_seed: int,
    s: int,
    options: HarnessOptions,
    analysis_columns: tuple[str, ...],
    oracle_columns: tuple[str, ...],
) -> ImputationSpec:
    method = Method(name)
    params = options.method_params.get(name, MethodParams())
    if method is Method.MI_AM and params.analysis_columns is None:
        params = replace(params, analysis_columns=analysis_columns)
    if method is Method.MI_OR and params.oracle_columns is None:
        params = replace(params, oracle_columns=oracle_columns)
    iterations = options.iterations or default_iterations(method)
    return ImputationSpec(
        method=method,
        iterations=iterations,
        chains=options.d,
        seed=_method_seed(master_seed, s, name),
        params=params,
    )


def evaluate_estimands(estimands: list[Estimand], data: Dataset) -> dict[str, EstimandValue]:
    """All estimand values on one completed dataset; coefficient estimands of
    the same model share a single fit."""
    out: dict[str, EstimandValue] = {}
    coef_groups: dict[tuple[str, ...], list[Estimand]] = {}
    for e in estimands:
        if e.kind == "coefficient":
            coef_groups.setdefault(e.columns, []).append(e)
        else:
            out[e.label] = estimand_from_sample(e, data)
    for cols, group in coef_groups.items():
        fits = regression_estimands(cols[0], cols[1:], data)
        for e in group:
            out[e.label] = fits[e.term]
    return out


def _treat_one_method(
    name: str,
    data: Dataset,
    mask,
    estimands: list[Estimand],
    master_seed: int,
    s: int,
    options: HarnessOptions,
    analysis_columns: tuple[str, ...],
    oracle_columns: tuple[str, ...],
) -> list[EstimateRow]:
    t0 = time.perf_counter()
    if name == "GS":
        values = evaluate_estimands(estimands, data)
        pooled = {lbl: (v.estimate, *complete_ci(v), float("nan")) for lbl, v in values.items()}
    elif name == "CC":
        complete = ~mask.mask.any(axis=1)
        cc = Dataset(values=data.values[complete], columns=data.columns)
        values = evaluate_estimands(estimands, cc)
        pooled = {lbl: (v.estimate, *complete_ci(v), float("nan")) for lbl, v in values.items()}
    else:
        spec = _build_spec(name, master_seed, s, options, analysis_columns, oracle_columns)
        mi = mice_run(data, mask, spec)
        per_set = [evaluate_estimands(estimands, ds) for ds in mi.datasets]
        pooled = {}
        for e in estimands:
            pool = rubin_pool([vals[e.label] for vals in per_set])
            pooled[e.label] = (pool.qbar, pool.ci_low, pool.ci_high, pool.fmi)
    ms = (time.perf_counter() - t0) * 1000.0
    return [
        EstimateRow(s, name, e.label, *pooled[e.label], wallclock_ms=ms) for e in estimands
    ]


def run_replication(
    condition: Condition,
    methods: list[str],
    master_seed: int,
    s: int,
    options: HarnessOptions,
) -> tuple[list[EstimateRow], list[FailureRow]]:
    """One full replication: generate, ampute, treat with every strategy.

    Seed substreams are keyed by the replication index (and a fixed strategy
    order), so a replication's results are identical whether it runs alone or
    inside a batch, in any worker."""
    model = PopulationModel(p=condition.p)
    data = gen_sample(model, condition.n, np.random.default_rng(np.random.SeedSequence((master_seed, s, 0))))
    mar = default_mar_spec(condition.pm, slope=options.mar_slope, slope_scale=options.mar_slope_scale)
    mask = impose_mar(data, mar, np.random.default_rng(np.random.SeedSequence((master_seed, s, 1))))
    estimands = experiment_estimands(data.columns)
    analysis_columns = tuple(data.columns[j] for j in DEFAULT_TARGETS)
    oracle_columns = analysis_columns + tuple(data.columns[j] for j in DEFAULT_MAR_PREDICTORS)
    rows: list[EstimateRow] = []
    failures: list[FailureRow] = []
    for name in methods:
        try:
            rows.extend(
                _treat_one_method(
                    name, data, mask, estimands, master_seed, s, options,
                    analysis_columns, oracle_columns,
                )
            )
        except Exception as exc:
            failures.append(FailureRow(s, name, str(exc)))
    return rows, failures


def _sim_worker(s, condition, methods, master_seed, options):
    return run_replication(condition, methods, master_seed, s, options)


def _sorted_rows(rows: list[EstimateRow], estimands: list[Estimand]) -> list[EstimateRow]:
    order = {e.label: i for i, e in enumerate(estimands)}
    return sorted(rows, key=lambda r: (r.replication, STRATEGIES.index(r.method), order[r.estimand]))


def aggregate(
    label: str,
    rows: list[EstimateRow],
    failures: list[FailureRow],
    methods: list[str],
    estimand_labels: list[str],
    replications: int,
) -> ConditionResult:
    """Fold per-replication estimates into PRB/CIC metrics; truth is the mean
    of the gold-standard estimates. Failed replications are excluded per
    method; a method failing in more than 5% of replications is flagged
    invalid. Re-aggregating persisted rows reproduces the metrics bitwise."""
    by_method: dict[str, list[EstimateRow]] = {}
    for r in rows:
        by_method.setdefault(r.method, []).append(r)
    gs_rows = by_method.get("GS", [])
    if not gs_rows:
        raise ValueError("gold-standard rows are required to define truth")
    truth: dict[str, float] = {}
    for lbl in estimand_labels:
        ests = [r.estimate for r in gs_rows if r.estimand == lbl]
        truth[lbl] = float(np.mean(ests))

    metrics: list[MetricRow] = []
    summaries: list[MethodSummary] = []
    for name in methods:
        sub = by_method.get(name, [])
        reps = sorted({r.replication for r in sub})
        n_fail = sum(1 for f in failures if f.method == name)
        wall = 0.0
        seen = set()
        for r in sub:
            if r.replication not in seen:
                seen.add(r.replication)
                wall += r.wallclock_ms
        valid = n_fail <= 0.05 * replications
        if not valid:
            warnings.warn(
                f"{name} failed in {n_fail}/{replications} replications; cell marked invalid",
                RuntimeWarning,
            )
        for lbl in estimand_labels:
            erows = sorted((r for r in sub if r.estimand == lbl), key=lambda r: r.replication)
            if not erows:
                continue
            estimates = np.array([r.estimate for r in erows])
            intervals = np.array([[r.ci_low, r.ci_high] for r in erows])
            t = truth[lbl]
            metrics.append(
                MetricRow(
                    method=name,
                    estimand=lbl,
                    prb=prb(estimates, t),
                    cic=cic(intervals, t),
                    avg_ci_width=float(np.mean(intervals[:, 1] - intervals[:, 0])),
                    truth=t,
                    absolute_bias=(t == 0.0),
                )
            )
        summaries.append(
            MethodSummary(
                method=name,
                replications_used=len(reps),
                failures=n_fail,
                wallclock_ms=wall,
                valid=valid,
            )
        )
    return ConditionResult(label=label, metrics=metrics, methods=summaries)


def _limit_blas_threads():
    # workers already saturate the cores; nested BLAS threading only contends
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except Exception:
        pass


def _run_tasks(worker, replications: int, jobs: int):
    if jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=jobs, initializer=_limit_blas_threads) as pool:
            results = pool.map(worker, range(replications))
    else:
        results = [worker(s) for s in range(replications)]
    rows: list[EstimateRow] = []
    failures: list[FailureRow] = []
    for r, f in results:
        rows.extend(r)
        failures.extend(f)
    return rows, failures


def run_condition(
    condition: Condition,
    methods: list[str],
    master_seed: int,
    jobs: int = 1,
    options: HarnessOptions | None = None,
) -> tuple[ConditionResult, list[EstimateRow], list[FailureRow]]:
    """Run every replication of one condition (optionally across processes)
    and aggregate. Results are independent of the execution order and of
    ``jobs``. GS is always computed (it defines truth) even when absent from
    ``methods``."""
    if not methods:
        raise ValueError("methods must be non-empty")
    for name in methods:
        if name not in STRATEGIES:
            raise ValueError(f"unknown method {name!r}")
    options = options or HarnessOptions()
    run_methods = list(methods) if "GS" in methods else ["GS"] + list(methods)
    worker = partial(
        _sim_worker,
        condition=condition,
        methods=run_methods,
        master_seed=master_seed,
        options=options,
    )
    rows, failures = _run_tasks(worker, condition.replications, jobs)
    estimands = experiment_estimands(tuple(f"v{k + 1}" for k in range(condition.p)))
    rows = _sorted_rows(rows, estimands)
    labels = [e.label for e in estimands]
    result = aggregate(condition.label, rows, failures, methods, labels, condition.replications)
    return result, rows, failures


def run_resampling_replication(
    population: Dataset,
    n: int,
    mar_spec: MarSpec,
    models: list[RegressionModel],
    methods: list[str],
    master_seed: int,
    s: int,
    options: HarnessOptions,
) -> tuple[list[EstimateRow], list[FailureRow]]:
    rng = np.random.default_rng(np.random.SeedSequence((master_seed, s, 0)))
    idx = rng.integers(0, population.n, size=n)
    sample = Dataset(values=population.values[idx], columns=population.columns)
    mask = impose_mar(sample, mar_spec, np.random.default_rng(np.random.SeedSequence((master_seed, s, 1))))
    estimands = regression_model_estimands(models)
    model_columns: list[str] = []
    for m in models:
        for c in (m.response,) + tuple(m.predictors):
            if c not in model_columns:
                model_columns.append(c)
    analysis_columns = tuple(model_columns)
    mar_names = tuple(population.columns[j] for j in mar_spec.predictors)
    oracle_columns = analysis_columns + tuple(c for c in mar_names if c not in analysis_columns)
    rows: list[EstimateRow] = []
    failures: list[FailureRow] = []
    for name in methods:
        try:
            rows.extend(
                _treat_one_method(
                    name, sample, mask, estimands, master_seed, s, options,
                    analysis_columns, oracle_columns,
                )
            )
        except Exception as exc:
            failures.append(FailureRow(s, name, str(exc)))
    return rows, failures


def _resample_worker(s, population, n, mar_spec, models, methods, master_seed, options):
    return run_resampling_replication(
        population, n, mar_spec, models, methods, master_seed, s, options
    )


def run_resampling(
    population: Dataset,
    n: int,
    replications: int,
    mar_spec: MarSpec,
    models: list[RegressionModel],
    methods: list[str],
    master_seed: int,
    jobs: int = 1,
    options: HarnessOptions | None = None,
    label: str = "resample",
) -> tuple[ConditionResult, list[EstimateRow], list[FailureRow]]:
    """Treat a complete dataset as the population: resample n rows with
    replacement per replication, ampute, treat, and pool the coefficients of
    the supplied linear analysis models."""
    if not np.all(np.isfinite(population.values)):
        raise DataError("population must be complete (no missing cells)")
    if not methods:
        raise ValueError("methods must be non-empty")
    options = options or HarnessOptions()
    run_methods = list(methods) if "GS" in methods else ["GS"] + list(methods)
    worker = partial(
        _resample_worker,
        population=population,
        n=n,
        mar_spec=mar_spec,
        models=models,
        methods=run_methods,
        master_seed=master_seed,
        options=options,
    )
    rows, failures = _run_tasks(worker, replications, jobs)
    estimands = regression_model_estimands(models)
    rows = _sorted_rows(rows, estimands)
    labels = [e.label for e in estimands]
    result = aggregate(label, rows, failures, methods, labels, replications)
    return result, rows, failures


# ---------------------------------------------------------------------------
# persistence

ESTIMATE_COLUMNS = (
    "condition", "replication", "method", "estimand",
    "estimate", "ci_low", "ci_high", "fmi", "wallclock_ms",
)
SUMMARY_COLUMNS = ("condition", "method", "estimand", "prb", "cic", "flags")


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else format_value(x)


def save_estimates(path, label: str, rows: list[EstimateRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ESTIMATE_COLUMNS)
        for r in rows:
            w.writerow(
                [label, r.replication, r.method, r.estimand,
                 format_value(r.estimate), format_value(r.ci_low), format_value(r.ci_high),
                 _fmt(r.fmi), format_value(r.wallclock_ms)]
            )


def load_estimates(path) -> tuple[str, list[EstimateRow]]:
    rows: list[EstimateRow] = []
    label = ""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != ESTIMATE_COLUMNS:
            raise DataError(f"{path}: not a per-replication estimates file")
        for rec in reader:
            if len(rec) != len(ESTIMATE_COLUMNS):
                raise DataError(f"{path}: malformed row {rec!r}")
            label = rec[0]
            rows.append(
                EstimateRow(
                    replication=int(rec[1]),
                    method=rec[2],
                    estimand=rec[3],
                    estimate=float(rec[4]),
                    ci_low=float(rec[5]),
                    ci_high=float(rec[6]),
                    fmi=float(rec[7]) if rec[7] else float("nan"),
                    wallclock_ms=float(rec[8]),
                )
            )
    return label, rows


def save_summary(path, result: ConditionResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in result.metrics:
            w.writerow(
                [result.label, row.method, row.estimand,
                 format_value(row.prb), format_value(row.cic), row.flags]
            )


FAILURE_COLUMNS = ("condition", "replication", "method", "message")


def save_failures(path, label: str, failures: list[FailureRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FAILURE_COLUMNS)
        for f in failures:
            w.writerow([label, f.replication, f.method, f.message])


def load_failures(path) -> list[FailureRow]:
    out: list[FailureRow] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FAILURE_COLUMNS:
            raise DataError(f"{path}: not a failures file")
        for rec in reader:
            out.append(FailureRow(replication=int(rec[1]), method=rec[2], message=rec[3]))
    return out
