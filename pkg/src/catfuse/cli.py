"""Command-line interface: ``catfuse {fit,cv,simulate,diagnose,predict}``.

Every command reads a CSV (header row required) and/or a JSON config and
writes a JSON report.  Command-line flags override config entries.  Exit
status is 0 only when the report was written; failures print a one-line
``error:`` message to stderr and exit with a command-specific nonzero code.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .design import (
    CategoricalDesign,
    CoefficientFit,
    PenaltyParams,
    ResponseMatrix,
    encode_with_labels,
    ingest_design,
    predict,
    read_table,
)
from .fit import FitConfig, objective_value
from .multi import compute_diagnostics, cross_validate, iterative_q_step, one_pass_q_step
from .sim import MODES, ScenarioSpec, run_study

SCHEMA_VERSION = 1
DEFAULT_GRID = tuple(float(x) for x in np.geomspace(0.01, 2.0, 20))
VOLATILE_KEYS = frozenset({"created_at", "runtime_seconds", "runtime_seconds_mean", "runtime_seconds_sd"})

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_SCHEMA = 5
EXIT_FAILURE = 6


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    command: str
    input_path: str | None = None
    columns: dict = field(default_factory=dict)
    lam: object = None
    gamma: float = 8.0
    max_sweeps: int = 200
    tol: float = 1e-8
    min_sweeps: int = 2
    max_rounds: int = 20
    mode: str = "iterative"
    seed: int = 0
    output_path: str | None = None
    folds: int = 5
    split_by: str | None = None
    test_fraction: float | None = None
    coef_csv: str | None = None
    scenario: dict = field(default_factory=dict)
    truth_path: str | None = None
    report_path: str | None = None

    @property
    def fit_config(self) -> FitConfig:
        return FitConfig(self.max_sweeps, self.tol, self.min_sweeps)


_CONFIG_ALIASES = {"input": "input_path", "output": "output_path", "lambda": "lam", "truth": "truth_path", "report": "report_path"}


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as e:
        raise CLIError(f"cannot read config file {path}: {e.strerror}", EXIT_CONFIG) from None
    except json.JSONDecodeError as e:
        raise CLIError(f"config file {path} is not valid JSON: {e.msg} (line {e.lineno})", EXIT_CONFIG) from None
    if not isinstance(data, dict):
        raise CLIError(f"config file {path} must hold a JSON object", EXIT_CONFIG)
    if "fit" in data:
        sub = data.pop("fit")
        if not isinstance(sub, dict):
            raise CLIError("config entry 'fit' must be an object", EXIT_CONFIG)
        data.update(sub)
    out = {}
    known = {f.name for f in fields(RunConfig)}
    for k, v in data.items():
        k = _CONFIG_ALIASES.get(k, k).replace("-", "_")
        if k not in known:
            raise CLIError(f"unknown config entry {k!r}", EXIT_CONFIG)
        out[k] = v
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    values.pop("command", None)
    for name in ("input_path", "output_path", "seed", "mode", "lam", "gamma", "folds", "split_by", "test_fraction", "coef_csv", "truth_path", "report_path"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "replications", None) is not None:
        values.setdefault("scenario", {})["replications"] = args.replications
    cfg = RunConfig(command=args.command, **values)
    cfg.mode = cfg.mode.replace("-", "_")
    if cfg.test_fraction is not None and not 0 < float(cfg.test_fraction) < 1:
        raise CLIError("--test-fraction must lie strictly between 0 and 1", EXIT_USAGE)
    return cfg


def _parse_lambda(v):
    if v is None:
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    parts = [p for p in str(v).split(",") if p.strip()]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise CLIError(f"cannot parse lambda value {v!r}", EXIT_USAGE) from None
    if not vals or any(not math.isfinite(x) or x < 0 for x in vals):
        raise CLIError(f"lambda must be finite and nonnegative, got {v!r}", EXIT_USAGE)
    return vals[0] if len(vals) == 1 else vals


# ---------------------------------------------------------------------------
# data loading


@dataclass
class Dataset:
    design: CategoricalDesign
    Y: ResponseMatrix
    raw: dict


def _load(cfg: RunConfig, need_response: bool = True) -> Dataset:
    if not cfg.input_path:
        raise CLIError("no input CSV given (use --input or 'input' in the config)", EXIT_USAGE)
    if not cfg.columns:
        raise CLIError("no column roles given (config entry 'columns': {name: role})", EXIT_CONFIG)
    try:
        cat, resp = read_table(cfg.input_path, cfg.columns)
    except OSError as e:
        raise CLIError(f"cannot read input {cfg.input_path}: {e.strerror}", EXIT_INPUT) from None
    except KeyError as e:
        raise CLIError(str(e.args[0]), EXIT_CONFIG) from None
    except ValueError as e:
        raise CLIError(str(e), EXIT_INPUT) from None
    if need_response and not resp:
        raise CLIError("config designates no response column", EXIT_CONFIG)
    if not cat:
        raise CLIError("config designates no categorical column", EXIT_CONFIG)
    ys = []
    for name, col in resp.items():
        try:
            ys.append([float(v) for v in col])
        except ValueError:
            bad = next(v for v in col if not _is_float(v))
            raise CLIError(f"response column {name!r} is not numeric (value {bad!r})", EXIT_INPUT) from None
    raw = dict(cat)
    design = ingest_design(cat)
    Y = ResponseMatrix(np.column_stack(ys), tuple(resp)) if ys else None
    return Dataset(design, Y, raw)


def _is_float(v) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


# ---------------------------------------------------------------------------
# reports


def _json_safe(v):
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.ndarray):
        return _json_safe(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    if isinstance(v, np.integer):
        return int(v)
    return v


def canonical(report: dict) -> dict:
    """Report without timestamp and timing fields, for determinism checks."""
    if isinstance(report, dict):
        return {k: canonical(v) for k, v in report.items() if k not in VOLATILE_KEYS}
    if isinstance(report, list):
        return [canonical(v) for v in report]
    return report


def write_report(report: dict, path) -> None:
    report = {"schema_version": SCHEMA_VERSION, "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), **report}
    text = json.dumps(_json_safe(report), indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _fit_section(design: CategoricalDesign, Y: ResponseMatrix, mf, params: PenaltyParams) -> dict:
    responses = []
    for l, f in enumerate(mf.fits):
        coefs, groups = {}, {}
        for j, name in enumerate(design.names):
            labels = design.level_labels[j]
            b = f.blocks[j]
            coefs[name] = {lab: float(b[k]) for k, lab in enumerate(labels)}
            vals = np.unique(b)
            groups[name] = [[labels[k] for k in np.flatnonzero(b == v)] for v in vals]
        responses.append(
            {
                "name": Y.names[l],
                "intercept": f.intercept,
                "coefficients": coefs,
                "groups": groups,
                "active": [design.names[j] for j in f.nonzero_blocks()],
                "objective": objective_value(design, Y.column(l), f, params.lam[l], params.gamma[l]),
                "converged": f.converged,
                "n_sweeps": f.n_sweeps,
            }
        )
    return {
        "predictors": [{"name": n, "levels": list(lab)} for n, lab in zip(design.names, design.level_labels)],
        "responses": responses,
        "active_history": [[Y.names[l], [design.names[j] for j in a]] for l, a in mf.active_history],
        "converged": mf.converged,
        "rounds": mf.rounds,
        "penalty": {"lambda": params.lam, "gamma": params.gamma},
    }


def write_coef_csv(report: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "predictor", "response", "coefficient", "group_id"])
        for r in report["responses"]:
            for pred, coefs in r["coefficients"].items():
                gid = {lab: g for g, grp in enumerate(r["groups"][pred]) for lab in grp}
                for lab, v in coefs.items():
                    w.writerow([lab, pred, r["name"], repr(float(v)), gid[lab]])


def _multipliers(design: CategoricalDesign, q: int, lam) -> np.ndarray:
    m = np.broadcast_to(np.asarray(lam, dtype=float), (q,))
    return np.array(m, dtype=float)


def _run_fit(cfg: RunConfig, design: CategoricalDesign, Y: ResponseMatrix, mult) -> tuple:
    params = PenaltyParams.scaled(design, Y.q, mult, cfg.gamma)
    if cfg.mode == "iterative":
        mf = iterative_q_step(design, Y, params, cfg.fit_config, cfg.max_rounds)
    elif cfg.mode == "one_pass":
        mf = one_pass_q_step(design, Y, params, cfg.fit_config)
    else:
        raise CLIError(f"unknown mode {cfg.mode!r}; expected iterative or one-pass", EXIT_USAGE)
    return mf, params


def _evaluate(design: CategoricalDesign, Y: ResponseMatrix, mf, train_rows, test_rows) -> dict:
    train_counts = [np.bincount(design.codes(j)[train_rows], minlength=K) for j, K in enumerate(design.n_levels)]
    test_d = design.subset(test_rows)
    unseen = int(sum(np.sum(train_counts[j][test_d.codes(j)] == 0) for j in range(design.p)))
    out = {"n_train": int(train_rows.sum()), "n_test": int(test_rows.sum()), "unseen_level_cells": unseen, "responses": []}
    for l, f in enumerate(mf.fits):
        y = Y.column(l)[test_rows]
        yhat = predict(test_d, f)
        entry = {"name": Y.names[l], "mse": float(np.mean((y - yhat) ** 2))}
        if set(np.unique(Y.column(l))) <= {0.0, 1.0}:
            entry["misclassification"] = float(np.mean((yhat >= 0.5).astype(float) != y))
        out["responses"].append(entry)
    return out


def _fit_one(cfg: RunConfig, design: CategoricalDesign, Y: ResponseMatrix, extra: dict) -> dict:
    rows = np.ones(design.n, dtype=bool)
    if cfg.test_fraction is not None:
        n_test = int(round(float(cfg.test_fraction) * design.n))
        if n_test < 1 or n_test >= design.n:
            raise CLIError("--test-fraction leaves an empty training or test set", EXIT_USAGE)
        perm = np.random.default_rng(cfg.seed).permutation(design.n)
        rows[perm[:n_test]] = False
    train_d = design.subset(rows)
    train_Y = ResponseMatrix(Y.values[rows], Y.names)
    lam = _parse_lambda(cfg.lam)
    cv_info = None
    if lam is None or isinstance(lam, list):
        grid = lam if isinstance(lam, list) else DEFAULT_GRID
        res = cross_validate(train_d, train_Y, grid, cfg.gamma, cfg.folds, cfg.seed, cfg.fit_config, return_details=True)
        mult = res.best_multiplier
        cv_info = {"grid": res.grid, "cv_error": res.cv_error, "selected": res.best_multiplier}
    else:
        mult = _multipliers(train_d, train_Y.q, lam)
    mf, params = _run_fit(cfg, train_d, train_Y, mult)
    report = {"command": cfg.command, "input": cfg.input_path, "mode": cfg.mode, "seed": cfg.seed, "lambda_multiplier": mult, **extra}
    report.update(_fit_section(train_d, train_Y, mf, params))
    if cv_info is not None:
        report["cross_validation"] = cv_info
    if cfg.test_fraction is not None:
        report["evaluation"] = _evaluate(design, Y, mf, rows, ~rows)
    return report


def _output_for(cfg: RunConfig, suffix: str | None):
    if suffix is None or cfg.output_path in (None, "-"):
        return cfg.output_path
    p = Path(cfg.output_path)
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in suffix)
    return str(p.with_name(f"{p.stem}_{safe}{p.suffix}"))


def cmd_fit(cfg: RunConfig) -> list:
    data = _load(cfg)
    if cfg.split_by is None:
        report = _fit_one(cfg, data.design, data.Y, {})
        write_report(report, cfg.output_path)
        if cfg.coef_csv:
            write_coef_csv(report, cfg.coef_csv)
        return [cfg.output_path]
    if cfg.split_by not in data.raw:
        raise CLIError(f"--split-by column {cfg.split_by!r} is not a categorical column of the input", EXIT_CONFIG)
    split_col = data.raw[cfg.split_by]
    rest = {k: v for k, v in data.raw.items() if k != cfg.split_by}
    if not rest:
        raise CLIError("--split-by leaves no categorical predictor", EXIT_CONFIG)
    outputs = []
    for value in sorted(set(split_col)):
        rows = np.array([v == value for v in split_col])
        sub = ingest_design({k: [c for c, keep in zip(col, rows) if keep] for k, col in rest.items()})
        Ysub = ResponseMatrix(data.Y.values[rows], data.Y.names)
        report = _fit_one(cfg, sub, Ysub, {"split_by": cfg.split_by, "split_value": value})
        out = _output_for(cfg, value)
        write_report(report, out)
        if cfg.coef_csv:
            write_coef_csv(report, _output_for(RunConfig("fit", output_path=cfg.coef_csv), value))
        outputs.append(out)
    return outputs


def cmd_cv(cfg: RunConfig) -> list:
    data = _load(cfg)
    lam = _parse_lambda(cfg.lam)
    grid = DEFAULT_GRID if lam is None else (lam if isinstance(lam, list) else [lam])
    res = cross_validate(data.design, data.Y, grid, cfg.gamma, cfg.folds, cfg.seed, cfg.fit_config, return_details=True)
    mf, params = _run_fit(cfg, data.design, data.Y, res.best_multiplier)
    report = {
        "command": "cv",
        "input": cfg.input_path,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "folds": cfg.folds,
        "cross_validation": {"grid": res.grid, "cv_error": res.cv_error, "selected": res.best_multiplier},
        "lambda_multiplier": res.best_multiplier,
    }
    report.update(_fit_section(data.design, data.Y, mf, params))
    write_report(report, cfg.output_path)
    if cfg.coef_csv:
        write_coef_csv(report, cfg.coef_csv)
    return [cfg.output_path]


def cmd_simulate(cfg: RunConfig) -> list:
    sc = dict(cfg.scenario)
    sc.setdefault("base_seed", cfg.seed)
    mode = sc.pop("mode", None) or cfg.mode
    mode = {"univariate": "univariate_baseline", "lasso": "lasso_baseline"}.get(mode, mode)
    if mode not in MODES:
        raise CLIError(f"unknown simulation mode {mode!r}; expected one of {', '.join(MODES)}", EXIT_USAGE)
    known = {f.name for f in fields(ScenarioSpec)}
    bad = set(sc) - known - {"aggregate_csv"}
    if bad:
        raise CLIError(f"unknown scenario entr{'y' if len(bad) == 1 else 'ies'}: {', '.join(sorted(bad))}", EXIT_CONFIG)
    csv_path = sc.pop("aggregate_csv", None)
    try:
        spec = ScenarioSpec(**sc)
    except (TypeError, ValueError) as e:
        raise CLIError(f"invalid scenario: {e}", EXIT_CONFIG) from None
    rep = run_study(spec, mode, cfg.fit_config)
    write_report({"command": "simulate", **rep.to_dict()}, cfg.output_path)
    if csv_path:
        rep.write_csv(csv_path)
    return [cfg.output_path]


def _read_truth(path, design: CategoricalDesign, response_names) -> list:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise CLIError(f"cannot read truth table {path}: {e.strerror}", EXIT_INPUT) from None
    need = {"level", "predictor", "response", "coefficient"}
    if not rows or not need <= set(rows[0]):
        raise CLIError(f"truth table {path} needs columns {', '.join(sorted(need))}", EXIT_INPUT)
    names = list(response_names) if response_names else sorted({r["response"] for r in rows})
    table = [design.zero_blocks() for _ in names]
    pidx = {n: j for j, n in enumerate(design.names)}
    for r in rows:
        if r["response"] not in names:
            names.append(r["response"])
            table.append(design.zero_blocks())
        j = pidx.get(r["predictor"])
        if j is None:
            raise CLIError(f"truth table names unknown predictor {r['predictor']!r}", EXIT_INPUT)
        labels = design.level_labels[j]
        if r["level"] not in labels:
            raise CLIError(f"truth table names unknown level {r['level']!r} of {r['predictor']!r}", EXIT_INPUT)
        try:
            table[names.index(r["response"])][j][labels.index(r["level"])] = float(r["coefficient"])
        except ValueError:
            raise CLIError(f"truth coefficient {r['coefficient']!r} is not numeric", EXIT_INPUT) from None
    return names, table


def cmd_diagnose(cfg: RunConfig) -> list:
    data = _load(cfg, need_response=False)
    if not cfg.truth_path:
        raise CLIError("diagnose needs a truth table (--truth or 'truth' in the config)", EXIT_USAGE)
    names, truth = _read_truth(cfg.truth_path, data.design, data.Y.names if data.Y is not None else None)
    lam = _parse_lambda(cfg.lam)
    if isinstance(lam, list):
        raise CLIError("diagnose takes a single lambda multiplier", EXIT_USAGE)
    mult = 1.0 if lam is None else lam
    params = PenaltyParams.scaled(data.design, len(truth), mult, cfg.gamma)
    sigma = cfg.scenario.get("sigma") if cfg.scenario else None
    try:
        diag = compute_diagnostics(truth, data.design, params, sigma)
    except ValueError as e:
        raise CLIError(f"diagnostics failed: {e}", EXIT_INPUT) from None
    report = {"command": "diagnose", "input": cfg.input_path, "responses": names, "predictors": list(data.design.names), "lambda_multiplier": mult}
    report["diagnostics"] = diag.to_dict()
    write_report(report, cfg.output_path)
    return [cfg.output_path]


def cmd_predict(cfg: RunConfig) -> list:
    if not cfg.report_path:
        raise CLIError("predict needs a saved fit report (--report)", EXIT_USAGE)
    try:
        saved = json.loads(Path(cfg.report_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CLIError(f"cannot read report {cfg.report_path}: {e.strerror}", EXIT_INPUT) from None
    except json.JSONDecodeError as e:
        raise CLIError(f"report {cfg.report_path} is not valid JSON: {e.msg}", EXIT_INPUT) from None
    version = saved.get("schema_version")
    if not isinstance(version, int):
        raise CLIError(f"report {cfg.report_path} has no schema_version", EXIT_SCHEMA)
    if version > SCHEMA_VERSION:
        raise CLIError(f"report schema version {version} is newer than supported version {SCHEMA_VERSION}", EXIT_SCHEMA)
    if "responses" not in saved or "predictors" not in saved:
        raise CLIError(f"report {cfg.report_path} holds no fitted coefficients", EXIT_SCHEMA)
    if not cfg.input_path:
        raise CLIError("no input CSV given (use --input)", EXIT_USAGE)
    try:
        with open(cfg.input_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
    except OSError as e:
        raise CLIError(f"cannot read input {cfg.input_path}: {e.strerror}", EXIT_INPUT) from None
    except StopIteration:
        raise CLIError(f"{cfg.input_path}: file is empty, a header row is required", EXIT_INPUT) from None
    preds = [p["name"] for p in saved["predictors"]]
    missing = [p for p in preds if p not in header]
    if missing:
        raise CLIError(f"input lacks predictor column(s): {', '.join(missing)}", EXIT_INPUT)
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise CLIError(f"{cfg.input_path}: line {i} has {len(row)} fields, expected {len(header)}", EXIT_INPUT)
    unseen = 0
    out = {}
    cols = {p: [row[header.index(p)] for row in rows] for p in preds}
    masks = {}
    codes = {}
    for p in saved["predictors"]:
        c, m = encode_with_labels(cols[p["name"]], p["levels"])
        codes[p["name"]], masks[p["name"]] = c - 1, m
        unseen += int(m.sum())
    for r in saved["responses"]:
        yhat = np.full(len(rows), float(r["intercept"]))
        for p in saved["predictors"]:
            b = np.array([float(r["coefficients"][p["name"]][lab]) for lab in p["levels"]])
            yhat += np.where(masks[p["name"]], 0.0, b[codes[p["name"]]])
        out[r["name"]] = yhat
    if unseen:
        print(f"warning: {unseen} cell(s) hold levels unseen at fit time; their coefficient is taken as 0", file=sys.stderr)
    report = {"command": "predict", "input": cfg.input_path, "source_report": cfg.report_path, "n_rows": len(rows), "unseen_level_cells": unseen, "predictions": out}
    write_report(report, cfg.output_path)
    return [cfg.output_path]


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "simulate": cmd_simulate, "diagnose": cmd_diagnose, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catfuse", description="Fused-level ANOVA for categorical predictors and several responses.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("fit", "fit the q-step estimator to a CSV"),
        ("cv", "choose lambda by cross-validation, then fit"),
        ("simulate", "run a simulation study"),
        ("diagnose", "theory diagnostics for a true coefficient table"),
        ("predict", "apply a saved fit report to new rows"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--input", dest="input_path")
        p.add_argument("--config")
        p.add_argument("--output", dest="output_path")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=["iterative", "one-pass", "one_pass", "univariate", "lasso"])
        p.add_argument("--lambda", dest="lam", help="multiplier of sqrt(log K_j / n); a comma list is a CV grid")
        p.add_argument("--gamma", type=float)
        p.add_argument("--folds", type=int)
        p.add_argument("--split-by", dest="split_by")
        p.add_argument("--test-fraction", dest="test_fraction", type=float)
        p.add_argument("--coef-csv", dest="coef_csv")
        p.add_argument("--truth", dest="truth_path")
        p.add_argument("--report", dest="report_path")
        p.add_argument("--replications", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        COMMANDS[cfg.command](cfg)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except TypeError as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
