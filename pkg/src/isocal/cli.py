"""Command line entry point: ``isocal <command> [options]``.

Commands
--------
simulate    draw a synthetic dataset (plus truths CSV), optionally split
fit         Cox model for events or censoring; optional probability grid
calibrate   isotonic calibration surface from calibration-set artifacts
evaluate    metrics for surfaces and/or a Cox model on a test set
report      mean and two standard errors over per-seed metric CSVs
experiment  full simulate-fit-calibrate-evaluate loop over seeds

Exit codes: 0 success (undefined metrics are reported as nulls), 1 usage
error, 2 invalid input data, 3 numerical failure. Every command reads and
checks all of its inputs before it writes anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time as _time
from pathlib import Path

import numpy as np

from . import calibrate as _cal
from . import pipeline as _pipe
from .coxfit import (
    CoxConfig,
    CoxFitError,
    NoEventsError,
    fit_censoring,
    fit_cox,
    load_model,
    save_model,
    survival_grid,
)
from .data import (
    DEFAULT_CLIP_FLOOR,
    ParseError,
    SurvivalProbabilityGrid,
    TimeGrid,
    ValidationError,
    load_dataset,
    load_grid,
    load_risks,
    load_surface,
    save_dataset,
    save_grid,
    save_risks,
    save_surface,
)
from .isotonic import ConvergenceError, DegenerateProblemError
from .metrics import DEFAULT_TAUS, MODES, CurvePredictor, EvalTarget, evaluate_methods
from .simgen import DEFAULT_SPLIT, SETTINGS, generate, load_truths, save_truths

logger = logging.getLogger("isocal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _int_list(text: str) -> tuple[int, ...]:
    """``"0-4,7"`` -> (0, 1, 2, 3, 4, 7)."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, sep, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if sep else [int(part)])
    return tuple(out)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip().lower() for p in text.split(",") if p.strip())


def _threads() -> int:
    raw = os.environ.get("ISOCAL_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ISOCAL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ISOCAL_THREADS must be a positive integer, got {raw!r}")
    return n


def _need_file(path, flag):
    if path is None:
        raise UsageError(f"{flag} is required")
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _write_json(doc, path):
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")


def _grid_predictor(pg: SurvivalProbabilityGrid, ids) -> CurvePredictor:
    return _pipe.array_predictor(pg.grid, pg.rows_for(ids).probs)


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    if args.setting not in SETTINGS:
        raise UsageError(f"--setting must be one of 1..6, got {args.setting}")
    split = _int_list(args.split) if args.split else None
    if split is not None and (len(split) != 3 or min(split) < 1):
        raise UsageError("--split needs three positive sizes, e.g. 2500,2500,5000")
    n = args.n if args.n is not None else (sum(split) if split else sum(DEFAULT_SPLIT))
    if n < 1:
        raise UsageError("--n must be >= 1")
    if split is not None and sum(split) != n:
        raise UsageError(f"--split sizes add up to {sum(split)}, not --n {n}")
    sample = generate(args.setting, n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if split is None:
        parts = {"data": sample}
    else:
        parts = dict(zip(("train", "cal", "test"), sample.split(split)))
    for name, part in parts.items():
        save_dataset(part.data, out / f"{name}.csv")
        save_truths(part, out / f"{name}_truths.csv")
    logger.info("setting %d, n=%d, seed %d -> %s", args.setting, n, args.seed, out)
    return EXIT_OK


# ---------------------------------------------------------------- fit

def cmd_fit(args) -> int:
    train = load_dataset(_need_file(args.data, "--data"))
    if train.covariates is None:
        raise ValidationError(f"{args.data}: dataset has no covariate columns")
    other = None
    if args.predict_on is not None:
        other = load_dataset(_need_file(args.predict_on, "--predict-on"))
        if other.p != train.p:
            raise ValidationError("--predict-on data has a different number of covariates")
    if args.grid_out is not None and other is None:
        raise UsageError("--grid-out needs --predict-on")
    if args.ridge < 0:
        raise UsageError("--ridge must be >= 0")
    cfg = CoxConfig(max_iter=args.max_iter, tol=args.tol, ridge=args.ridge)
    started = _time.perf_counter()
    model = fit_cox(train, cfg) if args.role == "event" else fit_censoring(train, cfg)
    logger.info("%s model converged in %d iterations (gradient %.2e, %.2fs)", args.role,
                model.iterations, model.grad_norm, _time.perf_counter() - started)
    grid_pg = None
    if args.grid_out is not None:
        grid_pg = survival_grid(model, other, _grid_times(args, train, other), args.clip_floor)
    save_model(model, args.out)
    if args.risks_out is not None:
        save_risks(model.risk_scores(train), args.risks_out)
    if other is not None and args.predict_risks_out is not None:
        save_risks(model.risk_scores(other), args.predict_risks_out)
    if grid_pg is not None:
        save_grid(grid_pg, args.grid_out)
    print(f"{args.role} model: {model.iterations} iterations, coef {model.coefficients.tolist()}")
    return EXIT_OK


def _grid_times(args, train, other) -> TimeGrid:
    if args.times_from is not None:
        doc = json.loads(Path(_need_file(args.times_from, "--times-from")).read_text())
        if "times" not in doc:
            raise ParseError(f"{args.times_from}: no 'times' entry")
        return TimeGrid(doc["times"])
    if args.grid_density < 1:
        raise UsageError("--grid-density must be >= 1")
    return _cal.build_time_grid(train, other, args.grid_density)


# ---------------------------------------------------------------- calibrate

def cmd_calibrate(args) -> int:
    method = args.method.upper()
    if method not in ("RW", "RW+", "HT", "HT+", "DR"):
        raise UsageError(f"unknown --method {args.method!r}")
    if method == "DR" and args.s_hat is None:
        raise UsageError("--method dr needs the survival grid: pass --s-hat")
    cal = load_dataset(_need_file(args.data, "--data"))
    risks = load_risks(_need_file(args.risks, "--risks"))
    G = load_grid(_need_file(args.g_hat, "--g-hat"), clip_floor=None)
    S = load_grid(_need_file(args.s_hat, "--s-hat")) if method == "DR" else None
    inputs = _cal.CalibrationInputs(cal, risks, G, S, G.grid, args.clip_floor)
    started = _time.perf_counter()
    kw = {"interpolation": args.interpolation, "tol": args.tol, "check_every": args.check_every}
    if method in ("HT", "HT+", "DR"):
        kw["snap_to_grid"] = args.snap_to_grid
    surface = _cal.fit_surface(inputs, method, **kw)
    logger.info("%s surface: %d subjects x %d grid times in %.2fs", method, surface.n,
                surface.grid.K, _time.perf_counter() - started)
    save_surface(surface, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def _parse_surface_args(items):
    out = {}
    for item in items or ():
        name, _, path = item.rpartition("=")
        surface = load_surface(_need_file(path, "--surface"))
        name = name or surface.method.lower()
        if name in out:
            raise UsageError(f"two surfaces named {name!r}; use NAME=PATH")
        out[name] = surface
    return out


def cmd_evaluate(args) -> int:
    modes = _str_list(args.modes)
    bad = [m for m in modes if m not in MODES]
    if not modes or bad:
        raise UsageError(f"--modes must be a subset of {','.join(MODES)}")
    taus = _float_list(args.taus)
    if not taus or any(not 0 < t < 1 for t in taus):
        raise UsageError("--taus must be levels in (0, 1)")
    surfaces = _parse_surface_args(args.surface)
    model = load_model(_need_file(args.model, "--model")) if args.model else None
    if not surfaces and model is None:
        raise UsageError("nothing to evaluate: pass --surface and/or --model")
    test = load_dataset(_need_file(args.test, "--test"))
    ids = test.subject_id
    if args.test_risks is not None:
        risk = load_risks(_need_file(args.test_risks, "--test-risks")).aligned_to(ids)
    elif model is not None:
        risk = model.risk_scores(test).risk
    else:
        raise UsageError("--test-risks is required without --model")

    G = censor_model = None
    if "ipcw" in modes:
        if args.g_hat is not None:
            G = load_grid(_need_file(args.g_hat, "--g-hat"))
            if G.role != "censoring":
                raise ValidationError("--g-hat must hold censoring probabilities")
            G.rows_for(ids)
        elif args.censor_model is not None:
            censor_model = load_model(_need_file(args.censor_model, "--censor-model"))
            censor_risk = censor_model.risk_scores(test).risk
        else:
            raise UsageError("ipcw mode needs --g-hat or --censor-model")
    truths = None
    if "oracle" in modes:
        truths = load_truths(_need_file(args.truths, "--truths"))
        lookup = {s: i for i, s in enumerate(truths["id"])}
        missing = [s for s in ids if s not in lookup]
        if missing:
            raise ValidationError(f"truths CSV has no row for subject {missing[0]!r}")
        true_time = truths["true_time"][[lookup[s] for s in ids]]

    grids = [s.grid for s in surfaces.values()]
    if G is not None:
        grids.append(G.grid)
    grid = grids[0] if grids else None
    if any(g != grid for g in grids):
        raise ValidationError("surfaces and --g-hat must share one time grid")
    if grid is None:
        grid = TimeGrid(model.baseline.jump_times[model.baseline.jump_times > 0])
    t_max = args.t_max
    if t_max is None:
        if not surfaces:
            raise UsageError("--t-max is required when no surface is given")
        t_max = next(iter(surfaces.values())).t_max
    if not (t_max > 0 and np.isfinite(t_max)):
        raise UsageError("--t-max must be positive")

    predictors = {}
    if model is not None:
        predictors["cox"] = _pipe.cox_predictor(model, risk, grid, args.clip_floor)
    for name, s in surfaces.items():
        predictors[name] = _pipe.surface_predictor(s, risk)
    reports = []
    for mode in modes:
        if mode == "oracle":
            target = EvalTarget.oracle(true_time)
        elif mode == "naive":
            target = EvalTarget.naive(test.observed_time, test.event)
        else:
            if G is not None:
                Gp = _grid_predictor(G, ids)
            else:
                Gp = _pipe.cox_predictor(censor_model, censor_risk, grid, args.clip_floor)
            target = EvalTarget.ipcw(test.observed_time, test.event, Gp, args.clip_floor)
        reports.extend(evaluate_methods(predictors, risk, target, t_max, taus,
                                        seed=args.seed, dataset=args.dataset))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in predictors:
        _write_json([r.to_dict() for r in reports if r.method == name], out / f"{name}.json")
    _pipe.write_metric_csv(reports, out / "metrics.csv")
    for r in reports:
        print(f"{r.method:6s} {r.mode:7s} ibs={_show(r.ibs)} aupit={_show(r.aupit)} "
              f"c={_show(r.c_index)}")
    return EXIT_OK


def _show(v):
    return "null" if v is None else f"{v:.4f}"


# ---------------------------------------------------------------- report

def cmd_report(args) -> int:
    root = Path(args.results)
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    out = Path(args.out) if args.out else root
    paths = sorted(p for p in root.rglob("*.csv") if p.name != "summary.csv")
    if not paths:
        raise UsageError(f"no metric CSV files under {root}")
    rows = _pipe.read_metric_csvs(paths)
    if not rows:
        raise UsageError(f"metric CSV files under {root} have no rows")
    summary = _pipe.summarize(rows)
    table = _pipe.format_table(summary)
    out.mkdir(parents=True, exist_ok=True)
    _pipe.write_summary_csv(summary, out / "summary.csv")
    (out / "summary.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------- experiment

def cmd_experiment(args) -> int:
    settings = _int_list(args.setting)
    if not settings or any(s not in SETTINGS for s in settings):
        raise UsageError("--setting must list values in 1..6")
    try:
        seeds = _int_list(args.seeds)
        cfgs = [_pipe.ExperimentConfig(
            setting=s, split=_int_list(args.split), seeds=seeds,
            estimators=_str_list(args.estimators), modes=_str_list(args.modes),
            grid_density=args.grid_density, clip_floor=args.clip_floor,
            taus=_float_list(args.taus), ridge=args.ridge, tol=args.tol,
            check_every=args.check_every) for s in settings]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bad = [m for m in cfgs[0].modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown modes {bad}")
    workers = _threads()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cfg in cfgs:
        started = _time.perf_counter()
        reports = _pipe.run_experiment(cfg, workers=workers)
        for seed in cfg.seeds:
            mine = [r for r in reports if r.seed == seed]
            _pipe.write_metric_csv(mine, out / f"setting{cfg.setting}_seed{seed}.csv")
        logger.info("setting %d: %d seeds in %.1fs", cfg.setting, len(cfg.seeds),
                    _time.perf_counter() - started)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="isocal", description="Isotonic recalibration of survival predictions.")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, out_help):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--grid-density", type=int, default=_cal.DEFAULT_GRID_DENSITY)
        sp.add_argument("--clip-floor", type=float, default=DEFAULT_CLIP_FLOOR)
        sp.add_argument("--out", required=True, help=out_help)

    s = sub.add_parser("simulate", help="draw a synthetic dataset")
    common(s, "output directory")
    s.add_argument("--setting", type=int, required=True)
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--split", default=None, help="train,cal,test sizes, e.g. 2500,2500,5000")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a Cox model")
    common(s, "model JSON path")
    s.add_argument("--data", required=True, help="training dataset CSV")
    s.add_argument("--role", choices=("event", "censoring"), default="event")
    s.add_argument("--ridge", type=float, default=0.0)
    s.add_argument("--max-iter", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--risks-out", default=None, help="risk CSV for the training set")
    s.add_argument("--predict-on", default=None, help="dataset to predict for (calibration set)")
    s.add_argument("--predict-risks-out", default=None, help="risk CSV for --predict-on")
    s.add_argument("--grid-out", default=None, help="probability grid JSON for --predict-on")
    s.add_argument("--times-from", default=None, help="take grid times from this JSON")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("calibrate", help="fit a calibrated surface")
    common(s, "surface JSON path")
    s.add_argument("--method", required=True, help="rw, rw+, ht, ht+ or dr")
    s.add_argument("--data", required=True, help="calibration dataset CSV")
    s.add_argument("--risks", required=True, help="calibration risk CSV")
    s.add_argument("--g-hat", required=True, help="censoring probability grid JSON")
    s.add_argument("--s-hat", default=None, help="survival probability grid JSON (dr)")
    s.add_argument("--interpolation", choices=("bilinear", "step"), default="bilinear")
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--check-every", type=int, default=1)
    s.add_argument("--snap-to-grid", action="store_true")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("evaluate", help="score surfaces and a Cox model on test data")
    common(s, "output directory")
    s.add_argument("--surface", action="append", help="[NAME=]surface JSON; repeatable")
    s.add_argument("--model", default=None, help="event Cox model JSON (scored as 'cox')")
    s.add_argument("--test", required=True, help="test dataset CSV")
    s.add_argument("--test-risks", default=None, help="test risk CSV")
    s.add_argument("--g-hat", default=None, help="censoring grid JSON for test subjects")
    s.add_argument("--censor-model", default=None, help="censoring Cox model JSON")
    s.add_argument("--truths", default=None, help="truths CSV (oracle mode)")
    s.add_argument("--modes", default="ipcw")
    s.add_argument("--taus", default=",".join(f"{t:g}" for t in DEFAULT_TAUS))
    s.add_argument("--t-max", type=float, default=None)
    s.add_argument("--dataset", default=None, help="label written to the CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="aggregate per-seed metric CSVs")
    s.add_argument("results", help="directory of metric CSVs (searched recursively)")
    s.add_argument("--out", default=None, help="output directory (default: results)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("experiment", help="simulation study over settings and seeds")
    common(s, "output directory for per-seed CSVs")
    s.add_argument("--setting", default="2", help="settings, e.g. 1-6")
    s.add_argument("--seeds", default="0")
    s.add_argument("--split", default=",".join(map(str, DEFAULT_SPLIT)))
    s.add_argument("--estimators", default="cox,dr")
    s.add_argument("--modes", default="oracle")
    s.add_argument("--taus", default=",".join(f"{t:g}" for t in DEFAULT_TAUS))
    s.add_argument("--ridge", type=float, default=0.0)
    s.add_argument("--tol", type=float, default=_pipe.ExperimentConfig.tol)
    s.add_argument("--check-every", type=int, default=_pipe.ExperimentConfig.check_every)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"isocal {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NoEventsError, ValidationError, ParseError, _cal.GridAlignmentError) as exc:
        print(f"isocal {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (CoxFitError, ConvergenceError, DegenerateProblemError, FloatingPointError) as exc:
        print(f"isocal {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"isocal {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"isocal {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
