"""Command-line entry point.

Every subcommand is driven by a JSON config validated against the shipped
schema (unknown keys are errors); --seed/--jobs/--out/--methods override the
corresponding config values. Exit codes: 0 success, 1 config/input error,
2 runtime failure, 3 diagnostic threshold exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from dataclasses import replace
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np

from . import simulation
from .data import DataError, Dataset, MissingMask, MISSING_TOKENS, format_value
from .engine import (
    ChainError,
    ChainTrace,
    ImputationSpec,
    Method,
    MethodParams,
    convergence_summary,
    default_iterations,
    mice_run,
    ridge_kappa_cv,
    DEFAULT_KAPPA_GRID,
)
from .simulation import (
    Condition,
    HarnessOptions,
    RegressionModel,
    STRATEGIES,
    aggregate,
    experiment_estimands,
    load_estimates,
    load_failures,
    run_condition,
    run_resampling,
    save_estimates,
    save_failures,
    save_summary,
)
from .amputation import MarSpec
from .pooling import Estimand


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    with resources.files("hdmice").joinpath("config_schema.json").open() as fh:
        return json.load(fh)


def load_config(path, command: str, overrides: dict) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    if config.get("command") != command:
        raise ConfigError(
            f"config command {config.get('command')!r} does not match subcommand {command!r}"
        )
    try:
        jsonschema.validate(config, _schema())
    except jsonschema.ValidationError as exc:
        path_str = "/".join(str(k) for k in exc.absolute_path) or "<root>"
        raise ConfigError(f"config schema violation at {path_str}: {exc.message}") from exc
    return config


def _out_dir(config: dict) -> Path:
    out = Path(config.get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_atomic(path: Path, writer) -> None:
    tmp = path.with_name(f".tmp-{path.name}")
    try:
        writer(tmp)
        tmp.replace(path)
    finally:
        tmp.unlink(missing_ok=True)


def _version() -> str:
    try:
        return metadata.version("hdmice")
    except metadata.PackageNotFoundError:
        return "unknown"


def _pilot_data(config: dict, options: HarnessOptions, master_seed: int):
    """Replication-0 dataset and mask, used to cross-validate the ridge penalty."""
    model = simulation.PopulationModel(p=config["p"])
    rng = np.random.default_rng(np.random.SeedSequence((master_seed, 0, 0)))
    data = simulation.gen_sample(model, config["n"], rng)
    mar = simulation.default_mar_spec(
        config["pm"], slope=options.mar_slope, slope_scale=options.mar_slope_scale
    )
    from .amputation import impose_mar

    mask = impose_mar(data, mar, np.random.default_rng(np.random.SeedSequence((master_seed, 0, 1))))
    return data, mask


def cmd_simulate(config: dict) -> int:
    out = _out_dir(config)
    seed = config.get("seed", 0)
    jobs = config.get("jobs", 1)
    label = config.get("label", "condition")
    condition = Condition(
        label=label, n=config["n"], p=config["p"], pm=config["pm"],
        replications=config["replications"],
    )
    method_params: dict[str, MethodParams] = {}
    if "pca_var_target" in config:
        method_params["MI_PCA"] = MethodParams(var_target=config["pca_var_target"])
    options = HarnessOptions(
        d=config.get("d", 5),
        iterations=config.get("iterations"),
        mar_slope=config.get("mar_slope", 1.0),
        mar_slope_scale=config.get("mar_slope_scale", 1.0),
        method_params=method_params,
    )
    kappa_info = None
    if "bridge_kappa" in config:
        method_params["BRIDGE"] = MethodParams(kappa=config["bridge_kappa"])
    elif config.get("bridge_kappa_cv") and "BRIDGE" in config["methods"]:
        data, mask = _pilot_data(config, options, seed)
        pilot = ImputationSpec(
            method=Method.BRIDGE,
            iterations=config.get("kappa_pilot_iterations", config.get("iterations") or 50),
            chains=config.get("kappa_pilot_chains", config.get("d", 5)),
            seed=seed,
        )
        cv = ridge_kappa_cv(data, mask, DEFAULT_KAPPA_GRID, pilot, experiment_estimands(data.columns))
        method_params["BRIDGE"] = MethodParams(kappa=cv.kappa)
        kappa_info = {
            "selected": cv.kappa,
            "fmi_by_kappa": {f"{k:.0e}": v for k, v in cv.fmi_by_kappa.items()},
            "pilots": 1,
        }
    options = replace(options, method_params=method_params)

    result, rows, failures = run_condition(
        condition, list(config["methods"]), seed, jobs=jobs, options=options
    )
    _write_atomic(out / "estimates.csv", lambda p: save_estimates(p, label, rows))
    _write_atomic(out / "summary.csv", lambda p: save_summary(p, result))
    _write_atomic(out / "failures.csv", lambda p: save_failures(p, label, failures))
    meta = {
        "config": config,
        "seed": seed,
        "version": _version(),
        "pooling_df": "rubin-1987 (Barnard-Rubin available via pooling.rubin_pool flag)",
        "mean_ci_quantile": "t with Rubin df",
        "wallclock_ms_by_method": {m.method: m.wallclock_ms for m in result.methods},
        "failures_by_method": {m.method: m.failures for m in result.methods},
        "valid_by_method": {m.method: m.valid for m in result.methods},
    }
    if kappa_info:
        meta["bridge_kappa_cv"] = kappa_info
    _write_atomic(out / "metadata.json", lambda p: p.write_text(json.dumps(meta, indent=2)))
    return 0


def _read_csv_raw(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        rows = [row for row in reader if row]
    return header, rows


def cmd_impute(config: dict) -> int:
    in_path = Path(config["input"])
    header, raw_rows = _read_csv_raw(in_path)
    columns = tuple(name.strip() for name in header)
    n, p = len(raw_rows), len(columns)
    values = np.empty((n, p))
    missing = np.zeros((n, p), dtype=bool)
    for i, row in enumerate(raw_rows):
        if len(row) != p:
            raise ConfigError(f"{in_path}: row {i + 2} has {len(row)} fields, expected {p}")
        for k, tok in enumerate(row):
            tok = tok.strip()
            if tok in MISSING_TOKENS:
                values[i, k] = np.nan
                missing[i, k] = True
            else:
                try:
                    values[i, k] = float(tok)
                except ValueError:
                    raise ConfigError(f"{in_path}: bad numeric field {tok!r} in row {i + 2}") from None
    data = Dataset(values=values, columns=columns)
    try:
        target_idx = [data.column_index(c) for c in config["targets"]]
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    non_target = np.ones(p, dtype=bool)
    non_target[target_idx] = False
    if missing[:, non_target].any():
        raise ConfigError("missing values outside the declared target columns")
    mask = MissingMask(mask=missing, target_columns=tuple(target_idx))
    if mask.n_missing == 0:
        warnings.warn("input has no missing cells; writing identical copies", RuntimeWarning)

    method = Method(config["method"])
    params = MethodParams(
        kappa=config.get("kappa", 1e-4),
        cv_folds=config.get("cv_folds", 10),
        var_target=config.get("var_target", 0.5),
        quickpred_threshold=config.get("quickpred_threshold", 0.1),
        blasso_sweeps=config.get("blasso_sweeps", 10),
        n_trees=config.get("n_trees", 10),
        min_leaf=config.get("min_leaf", 5),
        analysis_columns=tuple(config["analysis_columns"]) if "analysis_columns" in config else None,
        oracle_columns=tuple(config["oracle_columns"]) if "oracle_columns" in config else None,
    )
    spec = ImputationSpec(
        method=method,
        iterations=config.get("iterations", default_iterations(method)),
        chains=config.get("d", 5),
        seed=config.get("seed", 0),
        params=params,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    mi = mice_run(data, mask, spec)
    out = _out_dir(config)
    stem = in_path.stem
    for k, ds in enumerate(mi.datasets, start=1):
        path = out / f"{stem}_imp{k}.csv"

        def write_completed(tmp, ds=ds):
            with open(tmp, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(columns)
                for i in range(n):
                    row = []
                    for c in range(p):
                        # observed cells keep their original byte form
                        row.append(format_value(ds.values[i, c]) if missing[i, c]
                                   else raw_rows[i][c].strip())
                    w.writerow(row)

        _write_atomic(path, write_completed)

    def write_trace(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("chain", "iteration", "target", "mean", "sd"))
            for chain, it, target, mean, sd in mi.trace.rows(columns):
                w.writerow((chain, it, target, format_value(mean), format_value(sd)))

    _write_atomic(out / f"{stem}_trace.csv", write_trace)
    return 0


def cmd_diagnose(config: dict) -> int:
    path = Path(config["trace"])
    try:
        header, rows = _read_csv_raw(path)
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    if header != ["chain", "iteration", "target", "mean", "sd"]:
        raise ConfigError(f"{path}: not a trace file")
    targets: list[str] = []
    entries: dict[tuple[int, int, str], tuple[float, float]] = {}
    chains = set()
    iterations = set()
    try:
        for rec in rows:
            c, m, tgt = int(rec[0]), int(rec[1]), rec[2]
            entries[(c, m, tgt)] = (float(rec[3]), float(rec[4]))
            chains.add(c)
            iterations.add(m)
            if tgt not in targets:
                targets.append(tgt)
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed trace row") from exc
    d, M, t = len(chains), len(iterations), len(targets)
    if len(entries) != d * M * t:
        raise ConfigError(f"{path}: trace is not rectangular")
    means = np.empty((d, M, t))
    sds = np.empty((d, M, t))
    for (c, m, tgt), (mean, sd) in entries.items():
        means[c, m, targets.index(tgt)] = mean
        sds[c, m, targets.index(tgt)] = sd
    try:
        drift = convergence_summary(ChainTrace(means=means, sds=sds, targets=tuple(range(t))))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out = _out_dir(config)

    def write_drift(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("target", "drift"))
            for name, value in zip(targets, drift):
                w.writerow((name, format_value(float(value))))

    _write_atomic(out / "drift.csv", write_drift)
    threshold = config.get("drift_threshold", 0.1)
    return 3 if np.any(np.abs(drift) > threshold) else 0


_ESTIMAND_TYPES = (("mean_", "mean"), ("var_", "variance"), ("cov_", "covariance"), ("coef_", "coefficient"))


def _estimand_type(label: str) -> str:
    for prefix, kind in _ESTIMAND_TYPES:
        if label.startswith(prefix):
            return kind
    return "other"


def cmd_report(config: dict) -> int:
    try:
        label, rows = load_estimates(config["estimates"])
        failures = load_failures(config["failures"]) if "failures" in config else []
    except (DataError, OSError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if not rows:
        raise ConfigError("estimates file holds no rows")
    methods = [m for m in STRATEGIES if any(r.method == m for r in rows)]
    labels: list[str] = []
    for r in rows:
        if r.estimand not in labels:
            labels.append(r.estimand)
    replications = len({r.replication for r in rows})
    result = aggregate(label, rows, failures, methods, labels, replications)

    out = _out_dir(config)
    _write_atomic(out / "summary.csv", lambda p: save_summary(p, result))

    def write_report(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("condition", "method", "estimand_type",
                        "prb_min", "prb_avg", "prb_max",
                        "cic_min", "cic_avg", "cic_max", "flags"))
            for method in methods:
                by_type: dict[str, list] = {}
                for row in result.metrics:
                    if row.method == method:
                        by_type.setdefault(_estimand_type(row.estimand), []).append(row)
                for kind in ("mean", "variance", "covariance", "coefficient", "other"):
                    group = by_type.get(kind)
                    if not group:
                        continue
                    prbs = np.array([g.prb for g in group])
                    cics = np.array([g.cic for g in group])
                    flags = []
                    if prbs.max() > 10.0:
                        flags.append("biased")
                    if cics.min() < 0.90:
                        flags.append("severe_under")
                    if cics.max() > 0.99:
                        flags.append("severe_over")
                    if np.any((cics < 0.94) | (cics > 0.96)):
                        flags.append("significant")
                    w.writerow((label, method, kind,
                                format_value(prbs.min()), format_value(prbs.mean()),
                                format_value(prbs.max()),
                                format_value(cics.min()), format_value(cics.mean()),
                                format_value(cics.max()), ";".join(flags)))

    _write_atomic(out / "report.csv", write_report)
    return 0


def cmd_resample(config: dict) -> int:
    from .data import read_csv

    population, pop_mask = read_csv(config["population"])
    if pop_mask.n_missing:
        raise ConfigError("population contains missing cells")
    try:
        targets = tuple(population.column_index(c) for c in config["targets"])
        predictors = tuple(population.column_index(c) for c in config["mar_predictors"])
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    mar = MarSpec(
        targets=targets,
        predictors=predictors,
        slopes=np.full(len(predictors), config.get("mar_slope", 1.0)),
        pm=config["pm"],
        slope_scale=config.get("mar_slope_scale", 1.0),
    )
    models = [
        RegressionModel(name=m["name"], response=m["response"], predictors=tuple(m["predictors"]))
        for m in config["models"]
    ]
    for m in models:
        for c in (m.response,) + m.predictors:
            if c not in population.columns:
                raise ConfigError(f"analysis model {m.name}: no column named {c!r}")
    options = HarnessOptions(d=config.get("d", 5), iterations=config.get("iterations"))
    seed = config.get("seed", 0)
    label = f"resample-n{config['n']}"
    result, rows, failures = run_resampling(
        population, config["n"], config["replications"], mar, models,
        list(config["methods"]), seed, jobs=config.get("jobs", 1), options=options,
        label=label,
    )
    out = _out_dir(config)
    _write_atomic(out / "estimates.csv", lambda p: save_estimates(p, label, rows))
    _write_atomic(out / "summary.csv", lambda p: save_summary(p, result))
    _write_atomic(out / "failures.csv", lambda p: save_failures(p, label, failures))
    meta = {
        "config": config,
        "seed": seed,
        "version": _version(),
        "wallclock_ms_by_method": {m.method: m.wallclock_ms for m in result.methods},
        "failures_by_method": {m.method: m.failures for m in result.methods},
    }
    _write_atomic(out / "metadata.json", lambda p: p.write_text(json.dumps(meta, indent=2)))
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "impute": cmd_impute,
    "resample": cmd_resample,
    "diagnose": cmd_diagnose,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdmice", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--methods", default=None, help="comma-separated method list")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "jobs": args.jobs,
        "out": args.out,
        "methods": args.methods.split(",") if args.methods else None,
    }
    try:
        config = load_config(args.config, args.command, overrides)
        return _COMMANDS[args.command](config)
    except ConfigError as exc:
        print(f"hdmice: config error: {exc}", file=sys.stderr)
        return 1
    except ChainError as exc:
        print(f"hdmice: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"hdmice: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
