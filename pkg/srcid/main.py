"""
Command-line driver.

    srcid scenario space_dependent --levels 4 --out out/space
    srcid scenario --config scenarios/source_condition.toml --check --jobs 4
    srcid solve general --h 0.2
    srcid eoc out/space/table.csv
    srcid gradient-check --h 0.5 --M 4 --seed 1
    srcid probe time_dependent --variant step --h 0.1 --point -0.1 -0.5
"""
from __future__ import annotations
import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from srcid import __version__
from srcid.config import settings
from srcid.errors import ConfigError, OutputError, SourceIdError
from srcid.logger import logger as app_logger, attach_to_logger_names
from srcid.schemas import SCENARIO_NAMES, ExperimentSpec
from srcid.services import save_outputs
from srcid.services.assembly import SpaceTimeField
from srcid.services.config_parser import load_config, spec_from_dict
from srcid.services.experiments import (
    ERROR_COLUMNS,
    EocTable,
    ScenarioResult,
    compute_eoc,
    probe_point,
    run_level,
    run_scenario,
    toy_problem,
)
from srcid.services.inverse import gradient_check
from srcid.services.mesh import closest_node
from srcid.services.scenarios import build_scenario

attach_to_logger_names(["srcid.main", "py.warnings"])

EXIT_OK = 0
EXIT_OUTPUT = 1
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CHECK = 4

GRADIENT_TOLERANCE = 1e-6


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------
def _spec_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("name", nargs="?", choices=SCENARIO_NAMES, help="bundled scenario (or use --config)")
    p.add_argument("--config", type=Path, help="experiment file (TOML)")
    p.add_argument("--variant", help="time_dependent source: sine, hat or step")
    p.add_argument("--prior", help="informed, zero, exact, given, a number or an expression")
    p.add_argument("--levels", type=int, help="run levels 1..N")
    p.add_argument("--h", type=float, help="single run with this mesh size")
    p.add_argument("--seed", type=int, help="noise seed (level l uses seed + l)")
    p.add_argument("--inverse-crime", action="store_true", help="generate data on the working mesh")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--format", default="csv", choices=save_outputs.FORMATS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srcid", description="Parabolic source identification from boundary data")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("scenario", help="run a scenario over refinement levels and write the EOC report")
    _spec_arguments(p)
    p.add_argument("--jobs", type=int, default=settings.jobs, help="levels solved in parallel")
    p.add_argument("--check", action="store_true", help="compare mean EOCs with the reference windows")

    p = sub.add_parser("solve", help="run one level and export state, source and CG trace")
    _spec_arguments(p)
    p.add_argument("--level", type=int, default=1)

    p = sub.add_parser("eoc", help="experimental orders of convergence")
    p.add_argument("table", nargs="?", type=Path, help="table.csv written by `scenario`")
    p.add_argument("--errors", type=float, nargs="+", help="error values of successive levels")
    p.add_argument("--hs", type=float, nargs="+", help="mesh sizes (default: halving)")

    p = sub.add_parser("gradient-check", help="adjoint gradient against central differences")
    p.add_argument("--h", type=float, default=0.5)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--directions", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--rho", type=float, default=0.01)

    p = sub.add_parser("probe", help="recovered and exact source through a point")
    _spec_arguments(p)
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--point", type=float, nargs=2, default=(-0.1, -0.5), metavar=("X", "Y"))
    p.add_argument("--axis", choices=("t", "x", "y"), default="t")
    p.add_argument("--time", type=float, help="time of x/y slices (default T/2)")
    return parser


def _number_or_text(value: str):
    try:
        return float(value)
    except ValueError:
        return value


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    """Experiment file or bundled scenario name, with command-line overrides applied."""
    if args.config is not None:
        data = load_config(args.config).model_dump(mode="json", exclude_unset=True)
    elif args.name:
        data = {"experiment": {"scenario": args.name}}
    else:
        raise ConfigError("give a scenario name or --config")
    exp = data.setdefault("experiment", {})
    num = data.setdefault("numeric", {})
    if args.config is not None and args.name:
        exp["scenario"] = args.name
    if args.variant:
        exp["variant"] = args.variant
    if args.prior is not None:
        exp["prior"] = _number_or_text(args.prior)
    if args.inverse_crime:
        exp["inverse_crime"] = True
    if args.levels is not None:
        num["levels"] = args.levels
    if args.h is not None:
        num["h1"] = args.h
        num["levels"] = [1]
    if args.seed is not None:
        num["seed"] = args.seed
    return spec_from_dict(data)


def _out_dir(args: argparse.Namespace, spec: ExperimentSpec) -> Path:
    if args.out is not None:
        return args.out
    if spec.experiment.output_dir:
        return Path(spec.experiment.output_dir)
    return settings.output_dir / save_outputs.safe_name(spec.name)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_scenario(args: argparse.Namespace) -> int:
    spec = spec_from_args(args)
    scenario = build_scenario(spec)
    result = run_scenario(scenario, spec.numeric.level_list, jobs=max(1, args.jobs))
    out = _out_dir(args, spec)
    problems = result.table.check(scenario.check_windows) if args.check else []
    save_outputs.emit_report(result, out, spec=spec, fmt=args.format,
                             extra={"check": {"windows": scenario.check_windows, "problems": problems}}
                             if args.check else None)
    print(result.table.to_frame()[["level", "h", "delta", "rho", *ERROR_COLUMNS, "status"]].to_string(index=False))
    print(result.table.eoc_frame().to_string(index=False))
    if args.check:
        if not scenario.check_windows:
            app_logger.warning("scenario %s has no reference windows; nothing to check", scenario.name)
        for msg in problems:
            print(f"CHECK FAILED {msg}")
        if problems:
            return EXIT_CHECK
        print("CHECK OK")
    if result.table.failed:
        app_logger.error("failed levels: %s", result.table.failed)
        return EXIT_SOLVER
    return EXIT_OK


def _single_level(args: argparse.Namespace):
    spec = spec_from_args(args)
    scenario = build_scenario(spec)
    level = 1 if args.h is not None else args.level
    return spec, scenario, level, run_level(scenario, level)


def cmd_solve(args: argparse.Namespace) -> int:
    spec, scenario, level, res = _single_level(args)
    out = _out_dir(args, spec)
    result = ScenarioResult(scenario=scenario.name, table=EocTable([res]), levels=[res], elapsed=res.elapsed)
    save_outputs.emit_report(result, out, spec=spec, fmt=args.format)
    res.report.trajectory.save_csv(out / "state.csv")
    _source_frame(res.report.minimizer).to_csv(out / "source.csv", index=False,
                                                  float_format=save_outputs.FLOAT_FORMAT, lineterminator="\n")
    rep = res.report
    print(f"level {level}: h={res.h:g} nodes={res.n_nodes} M={res.M} iterations={rep.iterations} "
          f"stop={rep.stop_reason}")
    for col in ERROR_COLUMNS:
        print(f"  {col:12s} {res.errors[col]:.6e}")
    return EXIT_OK


def _source_frame(f: SpaceTimeField) -> pd.DataFrame:
    M, N = f.values.shape
    return pd.DataFrame({
        "n": np.repeat(np.arange(1, M + 1), N),
        "t": np.repeat(f.grid.levels[1:], N),
        "node": np.tile(np.arange(N), M),
        "value": f.values.ravel(),
    })


def cmd_eoc(args: argparse.Namespace) -> int:
    if args.table is not None:
        frame = save_outputs.read_csv(args.table)
        frame = frame[frame["status"] == "ok"] if "status" in frame else frame
        hs = frame["h"].tolist()
        for col in ERROR_COLUMNS:
            if col not in frame:
                continue
            orders, mean = compute_eoc(frame[col].tolist(), hs)
            print(f"{col:12s} " + " ".join(f"{v:.4f}" for v in orders) + f"  mean {mean:.4f}")
        return EXIT_OK
    if not args.errors:
        raise ConfigError("give a table.csv or --errors")
    if args.hs is not None and len(args.hs) != len(args.errors):
        raise ConfigError("--hs needs one value per error", key="hs")
    try:
        orders, mean = compute_eoc(args.errors, args.hs)
    except ValueError as exc:
        raise ConfigError(str(exc), key="errors") from exc
    print(" ".join(f"{v:.4f}" for v in orders) + f"  mean {mean:.4f}")
    return EXIT_OK


def cmd_gradient_check(args: argparse.Namespace) -> int:
    if args.h <= 0 or args.M < 1 or args.directions < 1 or args.eps <= 0 or args.rho <= 0:
        raise ConfigError("h, M, directions, eps and rho must be positive")
    problem, _ = toy_problem(args.h, args.M, args.seed, rho=args.rho)
    rng = np.random.default_rng(args.seed + 1000)
    shape = (problem.disc.grid.M, problem.disc.n_nodes)
    f = SpaceTimeField(rng.standard_normal(shape), problem.disc.grid)
    directions = [SpaceTimeField(rng.standard_normal(shape), problem.disc.grid) for _ in range(args.directions)]
    errors = gradient_check(problem, f, directions, args.eps)
    worst = max(errors)
    print(f"nodes={problem.disc.n_nodes} M={args.M} directions={len(errors)} max relative error {worst:.3e}")
    return EXIT_OK if worst <= GRADIENT_TOLERANCE else EXIT_CHECK


def cmd_probe(args: argparse.Namespace) -> int:
    spec, scenario, level, res = _single_level(args)
    disc = scenario.discretization(level)
    node = closest_node(disc.mesh, args.point)
    exact = probe_point(scenario.exact_source(disc), disc.mesh, node, args.axis, args.time)
    recovered = probe_point(res.report.minimizer, disc.mesh, node, args.axis, args.time)
    frame = pd.DataFrame({"coordinate": exact["coordinate"], "exact": exact["value"],
                          "recovered": recovered["value"]})
    if args.out is not None:
        save_outputs.ensure_dir(args.out)
        save_outputs.write_csv(frame, args.out / f"probe_{args.axis}.csv")
    print(f"# node {node} at {tuple(disc.mesh.nodes[node])}, axis {args.axis}")
    print(frame.to_csv(index=False, float_format="%.10g"), end="")
    return EXIT_OK


COMMANDS = {
    "scenario": cmd_scenario,
    "solve": cmd_solve,
    "eoc": cmd_eoc,
    "gradient-check": cmd_gradient_check,
    "probe": cmd_probe,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"srcid: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"srcid: output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except SourceIdError as exc:
        app_logger.exception("%s failed", args.command)
        print(f"srcid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"srcid: invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
