"""Command-line front end.

Subcommands::

    robfplm fit         fit one model (fixed dimensions or --select)
    robfplm select      RBIC selection over a grid, then fit
    robfplm predict     predict from a saved fit, or train/test comparison
    robfplm simulate    write one simulated sample as CSV files
    robfplm montecarlo  run a Monte Carlo study and write the metric report

Data come as two CSV files. The curves file has a header row of grid points
and one row per observation. The scalars file has a header naming its
columns: ``y``, ``z``, optionally ``v`` and ``w_1 .. w_m``; rows are matched
to curves by position.

Any option may also be given in a flat ``key = value`` file passed with
``--config``; options on the command line take precedence. Errors are
reported as a JSON object ``{"error": code, "message": ...}`` on stderr with
a nonzero exit status.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .bspline import FunctionalSample
from .errors import ConfigError, FplmError, ParseError
from .model import (Dataset, FplmFit, canonical_estimator, fit, flag_outliers, predict,
                    prediction_metrics)
from .rho import B_SCALE, C0_TUKEY, C1_TUKEY, C_HUBER, huber, tukey
from .selection import RULES, SelectionGrid, select_dimensions
from .simulation import SCENARIOS, SimulationConfig, run_study, simulate
from .solver import SolverControl

EXIT_INPUT = 2
EXIT_MODEL = 1
SCALAR_COLUMNS = ("y", "z", "v")


# ---------------------------------------------------------------------------
# ingestion and serialization

def _read_rows(path):
    try:
        with open(path, newline="") as fh:
            rows = [(i, row) for i, row in enumerate(csv.reader(fh), start=1)
                    if row and any(cell.strip() for cell in row)]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise ParseError(f"{path} is empty")
    return rows


def _floats(path, line, cells, what):
    out = []
    for col, cell in enumerate(cells, start=1):
        try:
            val = float(cell)
        except ValueError:
            raise ParseError(f"{path}, line {line}, column {col}: cannot parse "
                             f"{cell.strip()!r} as a number ({what})") from None
        if not math.isfinite(val):
            raise ParseError(f"{path}, line {line}, column {col}: non-finite {what}")
        out.append(val)
    return out


def read_curves(path) -> FunctionalSample:
    rows = _read_rows(path)
    head_line, head = rows[0]
    grid = np.array(_floats(path, head_line, head, "grid point"))
    if grid.size < 2:
        raise ParseError(f"{path}, line {head_line}: need at least 2 grid points")
    bad = np.flatnonzero(np.diff(grid) <= 0)
    if bad.size:
        raise ParseError(f"{path}, line {head_line}: grid is not strictly increasing "
                         f"at column {bad[0] + 2}")
    if len(rows) == 1:
        raise ParseError(f"{path} has a grid header but no observations")
    values = np.empty((len(rows) - 1, grid.size))
    for k, (line, row) in enumerate(rows[1:]):
        if len(row) != grid.size:
            raise ParseError(f"{path}, line {line}: expected {grid.size} values, "
                             f"found {len(row)}")
        values[k] = _floats(path, line, row, "curve value")
    return FunctionalSample(grid, values)


def read_scalars(path) -> dict:
    rows = _read_rows(path)
    head_line, head = rows[0]
    names = [h.strip().lower() for h in head]
    for name in names:
        if name not in SCALAR_COLUMNS and not (name.startswith("w_") and name[2:].isdigit()):
            raise ParseError(f"{path}, line {head_line}: unknown column {name!r}; "
                             f"expected y, z, v or w_1..w_m")
    if len(set(names)) != len(names):
        raise ParseError(f"{path}, line {head_line}: duplicate column names")
    for req in ("y", "z"):
        if req not in names:
            raise ParseError(f"{path}, line {head_line}: missing required column {req!r}")
    if len(rows) == 1:
        raise ParseError(f"{path} has a header but no observations")
    data = np.empty((len(rows) - 1, len(names)))
    for k, (line, row) in enumerate(rows[1:]):
        if len(row) != len(names):
            raise ParseError(f"{path}, line {line}: expected {len(names)} values, "
                             f"found {len(row)}")
        data[k] = _floats(path, line, row, "scalar")
    cols = {name: data[:, j] for j, name in enumerate(names)}
    w_names = sorted((n for n in names if n.startswith("w_")), key=lambda n: int(n[2:]))
    return {"y": cols["y"], "z": cols["z"], "v": cols.get("v"),
            "w": np.column_stack([cols[n] for n in w_names]) if w_names else None}


def ingest(curves_path, scalars_path, *, z_domain=None, t_domain=None,
           include_intercept=None) -> Dataset:
    """Read a curves CSV and a scalars CSV into a validated :class:`Dataset`.

    Raises
    ------
    ParseError
        On unreadable or empty files, malformed numbers, a non-increasing
        grid, or row counts that differ between the two files.
    """
    curves = read_curves(curves_path)
    scalars = read_scalars(scalars_path)
    n_curves, n_scalars = curves.n, scalars["y"].size
    if n_curves != n_scalars:
        raise ParseError(f"row count mismatch: {curves_path} has {n_curves} "
                         f"observations, {scalars_path} has {n_scalars}")
    try:
        return Dataset(scalars["y"], curves, scalars["z"], scalars["v"], scalars["w"],
                       include_intercept=include_intercept, t_domain=t_domain,
                       z_domain=z_domain)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def serialize(ds: Dataset, curves_path, scalars_path) -> None:
    """Write ``ds`` in the format read by :func:`ingest` (exact float round trip)."""
    with open(curves_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([repr(float(g)) for g in ds.curves.grid])
        for row in ds.curves.values:
            writer.writerow([repr(float(x)) for x in row])
    names = ["y", "z"] + (["v"] if ds.v is not None else [])
    names += [f"w_{j + 1}" for j in range(ds.n_extra)]
    cols = [ds.y, ds.z] + ([ds.v] if ds.v is not None else [])
    if ds.w is not None:
        cols += list(ds.w.T)
    with open(scalars_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*cols):
            writer.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# configuration

def _range(text):
    try:
        lo, hi = (int(p) for p in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi with integers, got {text!r}")
    return lo, hi


def _interval(text):
    try:
        lo, hi = (float(p) for p in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}")
    return lo, hi


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for i, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}, line {i}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def _add_model_options(p):
    p.add_argument("--estimator", default="mm", choices=["ls", "m", "mm"])
    p.add_argument("--p1", type=int)
    p.add_argument("--p2", type=int)
    p.add_argument("--select", action="store_true",
                   help="choose p1, p2 by RBIC over --grid")
    p.add_argument("--grid", type=_range, default=(4, 13), help="dimension range lo:hi")
    p.add_argument("--rule", default="global", choices=list(RULES))
    p.add_argument("--order", type=int, default=4)
    p.add_argument("--eta-knots", default="equispaced", choices=["equispaced", "quantile"])
    p.add_argument("--c0", type=float, default=C0_TUKEY)
    p.add_argument("--b", type=float, default=B_SCALE)
    p.add_argument("--c1", type=float, default=C1_TUKEY)
    p.add_argument("--huber-c", type=float, default=C_HUBER)
    p.add_argument("--n-subsamples", type=int, default=SolverControl.n_subsamples)
    p.add_argument("--max-iter", type=int, default=SolverControl.max_irwls_iter)
    p.add_argument("--seed", type=int, default=0)


def _add_data_options(p, required=True):
    p.add_argument("--curves", required=required)
    p.add_argument("--scalars", required=required)
    p.add_argument("--z-domain", type=_interval)
    p.add_argument("--t-domain", type=_interval)
    p.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None)


def _add_common(p):
    p.add_argument("--config", help="flat key = value file with default options")
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robfplm", description="Robust semi-functional linear regression.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one model")
    _add_common(p)
    _add_data_options(p)
    _add_model_options(p)
    p.add_argument("--monotone", action="store_true", help="also write the monotone eta")
    p.add_argument("--points", type=int, default=100, help="evaluation grid size")

    p = sub.add_parser("select", help="RBIC selection over the grid, then fit")
    _add_common(p)
    _add_data_options(p)
    _add_model_options(p)
    p.add_argument("--monotone", action="store_true")
    p.add_argument("--points", type=int, default=100)

    p = sub.add_parser("predict", help="predict from a fit, or train/test comparison")
    _add_common(p)
    _add_data_options(p)
    _add_model_options(p)
    p.add_argument("--fit", dest="fit_path", help="fit JSON written by the fit command")
    p.add_argument("--train-size", type=int,
                   help="fit ls, m and mm on the first N rows and evaluate on the rest")

    p = sub.add_parser("simulate", help="write one simulated sample")
    _add_common(p)
    p.add_argument("--scenario", default="clean", choices=list(SCENARIOS))
    p.add_argument("--mu", type=float)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--seed", type=int, default=SimulationConfig.seed)

    p = sub.add_parser("montecarlo", help="run a Monte Carlo study")
    _add_common(p)
    p.add_argument("--scenario", default="clean", choices=list(SCENARIOS))
    p.add_argument("--mu", type=float)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=SimulationConfig.seed)
    p.add_argument("--estimator", action="append", choices=["ls", "m", "mm"],
                   help="repeat to run several; default all three")
    p.add_argument("--grid", type=_range, default=(4, 13))
    p.add_argument("--rule", default="global", choices=list(RULES))
    p.add_argument("--n-subsamples", type=int, default=SolverControl.n_subsamples)
    p.add_argument("--solver-seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--write-grids", action="store_true",
                   help="also write per-replicate curve estimates")
    return parser


def _apply_config(parser, argv):
    """Parse ``argv``; values from ``--config`` fill in options not given on the line."""
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    if known.command not in choices:
        parser.parse_args(argv)  # reports unknown commands and options
        raise ConfigError("a subcommand is required: fit, select, predict, simulate "
                          "or montecarlo")
    if not known.config:
        return parser.parse_args(argv)
    sub = choices[known.command]
    actions = {a.dest: a for a in sub._actions}
    defaults, appended = {}, {}
    for key, value in read_config(known.config).items():
        if key == "fit":
            key = "fit_path"
        if key not in actions or key in ("config", "help"):
            raise ConfigError(f"unknown config key {key!r} for {known.command}")
        action = actions[key]
        if action.nargs == 0 or isinstance(action, argparse.BooleanOptionalAction):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"config key {key!r} expects true or false")
            defaults[key] = low in ("true", "1", "yes")
        elif isinstance(action, argparse._AppendAction):
            appended[key] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for key, values in appended.items():
        if any(v not in actions[key].choices for v in values):
            raise ConfigError(f"invalid values for config key {key!r}")
        if getattr(args, key) is None:
            setattr(args, key, values)
    for key, value in defaults.items():
        action = actions[key]
        if action.choices is not None and getattr(args, key) not in action.choices:
            raise ConfigError(f"invalid value {value!r} for config key {key!r}")
    return args


def _validate(args) -> None:
    """Check numeric options against the library preconditions up front."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    cmd = args.command
    if cmd in ("fit", "select", "predict"):
        need(args.order >= 1, "--order must be positive")
        for name in ("c0", "c1", "huber_c"):
            v = getattr(args, name)
            need(math.isfinite(v) and v > 0, f"--{name.replace('_', '-')} must be positive")
        need(0 < args.b < 1, "--b must lie in (0, 1)")
        need(args.n_subsamples >= 1, "--n-subsamples must be positive")
        need(args.max_iter >= 1, "--max-iter must be positive")
        if cmd == "select":
            args.select = True
        lo, hi = args.grid
        need(args.order <= lo <= hi, f"--grid must satisfy {args.order} <= lo <= hi")
        need_dims = not args.select and not (cmd == "predict" and args.fit_path)
        if need_dims:
            need(args.p1 is not None and args.p2 is not None,
                 "give --p1 and --p2, or --select")
        for name in ("p1", "p2"):
            v = getattr(args, name)
            need(v is None or v >= args.order, f"--{name} must be at least the order")
    if cmd in ("fit", "select"):
        need(args.points >= 2, "--points must be at least 2")
    if cmd == "predict":
        need((args.fit_path is None) != (args.train_size is None),
             "predict needs exactly one of --fit or --train-size")
        need(args.train_size is None or args.train_size >= 2, "--train-size too small")
    if cmd in ("simulate", "montecarlo"):
        need(args.n >= 2, "--n must be at least 2")
        contaminated = args.scenario != "clean"
        need(contaminated == (args.mu is not None),
             "--mu is required for c1/c2 and not allowed for clean")
        need(args.mu is None or math.isfinite(args.mu), "--mu must be finite")
    if cmd == "montecarlo":
        need(args.reps >= 1, "--reps must be positive")
        need(args.jobs >= 1, "--jobs must be positive")
        need(args.n_subsamples >= 1, "--n-subsamples must be positive")
        lo, hi = args.grid
        need(4 <= lo <= hi, "--grid must satisfy 4 <= lo <= hi")


# ---------------------------------------------------------------------------
# commands

def _ctrl(args) -> SolverControl:
    return SolverControl(n_subsamples=args.n_subsamples, max_irwls_iter=args.max_iter,
                         seed=args.seed)


def _fit_kwargs(args) -> dict:
    return {"order": args.order, "rho0": tukey(args.c0), "b": args.b,
            "rho1": tukey(args.c1), "rho_huber": huber(args.huber_c),
            "eta_knots": args.eta_knots}


def _load(args) -> Dataset:
    return ingest(args.curves, args.scalars, z_domain=args.z_domain,
                  t_domain=args.t_domain, include_intercept=args.intercept)


def _fit_or_select(ds, args, estimator):
    """Returns the fit and, when selecting, the selection result."""
    kwargs = _fit_kwargs(args)
    if args.select:
        lo, hi = args.grid
        grid = SelectionGrid((lo, hi), (lo, hi), args.order)
        kwargs.pop("order")
        sel = select_dimensions(ds, grid, estimator, _ctrl(args), args.rule, **kwargs)
        return sel.fit, sel
    return fit(ds, args.p1, args.p2, estimator, _ctrl(args), **kwargs), None


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _write_table(path, header, columns):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([repr(float(x)) for x in row])


def _write_curves(out, f: FplmFit, points, monotone):
    t = np.linspace(f.t_map.lo, f.t_map.hi, points)
    z = np.linspace(f.z_map.lo, f.z_map.hi, points)
    _write_table(os.path.join(out, "beta.csv"), ["t", "beta"], [t, f.beta(t)])
    cols, header = [z, f.eta(z)], ["z", "eta"]
    if monotone:
        cols.append(f.eta_mod(z))
        header.append("eta_mod")
    _write_table(os.path.join(out, "eta.csv"), header, cols)


def _selection_payload(sel, rule):
    return {"rule": rule,
            "table": [{"p1": p1, "p2": p2, "rbic": (v if math.isfinite(v) else None)}
                      for p1, p2, v in sel.table_rows()],
            "failures": {f"{k[0]},{k[1]}": v for k, v in sel.failures.items()}}


def cmd_fit(args) -> dict:
    ds = _load(args)
    estimator = canonical_estimator(args.estimator)
    f, sel = _fit_or_select(ds, args, estimator)
    out = args.out
    os.makedirs(out, exist_ok=True)
    flags = flag_outliers(f.residuals)
    payload = {"estimator": f.estimator, "n": f.n, "p1": f.p1, "p2": f.p2,
               "sigma": f.sigma, "rbic": f.rbic,
               "flagged_outliers": np.flatnonzero(flags).tolist(),
               "fit": f.to_dict()}
    if sel is not None:
        payload["selection"] = _selection_payload(sel, args.rule)
        with open(os.path.join(out, "rbic_table.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p1", "p2", "rbic"])
            for p1, p2, v in sel.table_rows():
                writer.writerow([p1, p2, repr(v)])
    _write_json(os.path.join(out, "fit.json"), payload)
    _write_curves(out, f, args.points, args.monotone)
    return {"status": "ok", "p1": f.p1, "p2": f.p2, "sigma": f.sigma, "rbic": f.rbic}


def cmd_predict(args) -> dict:
    out = args.out
    os.makedirs(out, exist_ok=True)
    if args.fit_path:
        try:
            with open(args.fit_path) as fh:
                saved = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot load fit {args.fit_path}: {exc}") from None
        f = FplmFit.from_dict(saved.get("fit", saved))
        ds = ingest(args.curves, args.scalars, z_domain=(f.z_map.lo, f.z_map.hi),
                    t_domain=(f.t_map.lo, f.t_map.hi),
                    include_intercept=f.intercept is not None)
        y_hat = predict(f, ds)
        _write_table(os.path.join(out, "predictions.csv"), ["y", "y_hat"], [ds.y, y_hat])
        payload = {"estimator": f.estimator, "n": ds.n, "predictions": y_hat.tolist()}
        _write_json(os.path.join(out, "predict.json"), payload)
        return {"status": "ok", "n": ds.n}

    # domains come from the whole sample so train and test share one map
    ds = _load(args)
    n_train = args.train_size
    if not n_train < ds.n:
        raise ConfigError(f"--train-size {n_train} leaves no test rows (n={ds.n})")
    train, test = ds.subset(np.arange(n_train)), ds.subset(np.arange(n_train, ds.n))
    fits, preds = {}, {}
    for est in ("ls", "m_huber", "mm"):
        fits[est], _ = _fit_or_select(train, args, est)
        preds[est] = predict(fits[est], test)
    train_flags = flag_outliers(fits["mm"].residuals)
    test_flags = flag_outliers(test.y - preds["mm"])
    metrics = {est: prediction_metrics(test.y, preds[est], test_flags) for est in fits}
    # least squares refitted without the training points flagged by mm
    keep = np.flatnonzero(~train_flags)
    ls_out, _ = _fit_or_select(train.subset(keep), args, "ls")
    metrics["ls_minus_out"] = prediction_metrics(test.y, predict(ls_out, test), test_flags)
    payload = {
        "n_train": train.n, "n_test": test.n,
        "dims": {est: [f.p1, f.p2] for est, f in fits.items()},
        "metrics": metrics,
        "flagged_train": np.flatnonzero(train_flags).tolist(),
        "flagged_test": (np.flatnonzero(test_flags) + n_train).tolist(),
        "predictions": {est: p.tolist() for est, p in preds.items()},
    }
    _write_json(os.path.join(out, "predict.json"), payload)
    return {"status": "ok", "metrics": metrics}


def cmd_simulate(args) -> dict:
    cfg = SimulationConfig(n=args.n, n_rep=1, scenario=args.scenario, mu=args.mu,
                           seed=args.seed)
    ds, truth = simulate(cfg, args.replicate)
    out = args.out
    os.makedirs(out, exist_ok=True)
    serialize(ds, os.path.join(out, "curves.csv"), os.path.join(out, "scalars.csv"))
    _write_json(os.path.join(out, "truth.json"), {
        "scenario": args.scenario, "mu": args.mu, "seed": args.seed,
        "replicate": args.replicate, "z_domain": list(ds.z_domain),
        "contaminated": np.flatnonzero(truth.contaminated).tolist()})
    return {"status": "ok", "n": ds.n, "contaminated": int(truth.contaminated.sum())}


def cmd_montecarlo(args) -> dict:
    cfg = SimulationConfig(n=args.n, n_rep=args.reps, scenario=args.scenario,
                           mu=args.mu, seed=args.seed)
    estimators = tuple(dict.fromkeys(canonical_estimator(e)
                                     for e in (args.estimator or ["ls", "m", "mm"])))
    lo, hi = args.grid
    ctrl = SolverControl(n_subsamples=args.n_subsamples, seed=args.solver_seed)
    report = run_study(cfg, estimators, args.rule, SelectionGrid((lo, hi), (lo, hi)),
                       ctrl, n_jobs=args.jobs)
    out = args.out
    os.makedirs(out, exist_ok=True)
    report.to_json(os.path.join(out, "report.json"))
    report.to_csv(os.path.join(out, "metrics.csv"))
    if args.write_grids:
        report.write_grids(os.path.join(out, "grids"))
    return {"status": "ok", "replicates": cfg.n_rep,
            "failures": {e: len(f) for e, f in report.failures.items()}}


COMMANDS = {"fit": cmd_fit, "select": cmd_fit, "predict": cmd_predict,
            "simulate": cmd_simulate, "montecarlo": cmd_montecarlo}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        _validate(args)
        result = COMMANDS[args.command](args)
    except FplmError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return EXIT_INPUT if isinstance(exc, (ConfigError, ParseError)) else EXIT_MODEL
    except ValueError as exc:
        print(json.dumps({"error": "invalid_argument", "message": str(exc)}), file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
