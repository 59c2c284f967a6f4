# app/cli.py

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.config import settings
from app.services.experiment_services import COMMANDS, ExperimentConfig, observable_input, process_experiment
from app.utils import (
    generate_run_id,
    log_run_start,
    parse_grid,
    parse_int_list,
    setup_logging,
    write_csv,
    write_json,
    write_manifest,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERDICT = 2

GLOBAL_FLAGS = ("seed", "threads", "out", "tol", "instrument", "command", "config")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message: str) -> None:
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=settings.threads)
    common.add_argument("--out", default=None, help="run directory (default: <output_dir>/<command>-<id>)")
    common.add_argument("--tol", type=float, default=settings.tol)
    return common


def _instrument(parser: argparse.ArgumentParser, required: bool = True) -> None:
    parser.add_argument("--instrument", required=required, help="instrument file or builtin:NAME[:k=v,...]")


def _simulation(parser: argparse.ArgumentParser, steps: int, traj: int) -> None:
    parser.add_argument("--steps", type=int, default=steps)
    parser.add_argument("--traj", type=int, default=traj)
    parser.add_argument("--burn-in", type=int, default=0)
    parser.add_argument("--initial-basis", type=int, default=None, help="start every trajectory at basis vector j")


def _mesh(parser: argparse.ArgumentParser, size: int) -> None:
    parser.add_argument("--mesh-size", type=int, default=size)
    parser.add_argument("--mesh-kind", choices=["fibonacci", "haar"], default=None)


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="qtraj", description=settings.app_name)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("validate", parents=[common], help="stochasticity defect of an instrument")
    _instrument(p)

    p = sub.add_parser("analyze-channel", parents=[common], help="(Erg), period and cyclic decomposition")
    _instrument(p)

    p = sub.add_parser("purification", parents=[common], help="g(n) series and (Pur) diagnostic")
    _instrument(p)
    p.add_argument("--nmax", type=int, default=10)
    p.add_argument("--mc-samples", type=int, default=0)

    p = sub.add_parser("simulate", parents=[common], help="trajectory ensemble")
    _instrument(p)
    _simulation(p, 1000, 1000)
    p.add_argument("--track-product", action="store_true")
    p.add_argument("--observable", default=None, help="quad:FILE, diag:a,b,... or const:c")

    p = sub.add_parser("spectrum", parents=[common], help="leading eigenvalues of the discretized kernel")
    _instrument(p)
    _mesh(p, 1500)
    p.add_argument("--count", type=int, default=6)

    p = sub.add_parser("scgf", parents=[common], help="tilted log spectral radius on a grid")
    _instrument(p)
    _mesh(p, 400)
    p.add_argument("--tilt", choices=["obs", "lyap"], default="obs")
    p.add_argument("--grid", type=parse_grid, default="-1:1:0.1")
    p.add_argument("--observable", default=None)

    p = sub.add_parser("clt", parents=[common], help="KS test of the normalized statistic")
    _instrument(p)
    _simulation(p, 10000, 10000)
    p.add_argument("--mode", choices=["observable", "lyapunov"], default="observable")
    p.add_argument("--observable", default=None)
    p.add_argument("--alpha", type=float, default=0.01)

    p = sub.add_parser("berry-esseen", parents=[common], help="scaled sup-CDF distances across n")
    _instrument(p, required=False)
    p.add_argument("--mode", choices=["observable", "lyapunov", "lyapunov_norm", "coin"], default="observable")
    p.add_argument("--n-list", type=parse_int_list, default="100,400,1600,6400")
    p.add_argument("--traj", type=int, default=2000)
    p.add_argument("--observable", default=None)

    p = sub.add_parser("ldp", parents=[common], help="empirical decay rates against the Legendre rate")
    _instrument(p)
    _mesh(p, 400)
    p.add_argument("--mode", choices=["observable", "lyapunov"], default="observable")
    p.add_argument("--a", type=float, default=None)
    p.add_argument("--a-sigma", type=float, default=None)
    p.add_argument("--exponent", type=float, default=5.0, help="n_max * I(a) for the default threshold")
    p.add_argument("--n-list", type=parse_int_list, default="50,100,200")
    p.add_argument("--traj", type=int, default=100000)
    p.add_argument("--grid", type=parse_grid, default=None, help="tilt grid; derived from the threshold when omitted")
    p.add_argument("--tolerance", type=float, default=0.15)
    p.add_argument("--observable", default=None)

    p = sub.add_parser("lyapunov", parents=[common], help="gamma three ways")
    _instrument(p)
    _simulation(p, 10000, 1000)
    _mesh(p, 400)
    p.add_argument("--grid", type=parse_grid, default="-0.2:0.2:0.1")

    p = sub.add_parser("scalar-checks", parents=[common], help="F_{n,z} bounds and the IneqLog scan")
    p.add_argument("--n-max", type=int, default=12)
    p.add_argument("--z", default="1.5+0.5j")
    p.add_argument("--theta", type=float, default=0.5)
    p.add_argument("--t-max", type=float, default=2.0)
    p.add_argument("--t-points", type=int, default=400)
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--ineqlog-dim", type=int, default=2)
    p.add_argument("--s-list", type=parse_grid, default="-1,1")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--sample-size", type=int, default=2000)

    p = sub.add_parser("replay", help="rerun a previously written config.json")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    params = {k: v for k, v in vars(args).items() if k not in GLOBAL_FLAGS}
    return ExperimentConfig(
        command=args.command,
        instrument=getattr(args, "instrument", None),
        params=params,
        seed=args.seed,
        threads=args.threads,
        tol=args.tol,
        out=args.out,
    )


def execute(cfg: ExperimentConfig, out: Optional[str] = None) -> int:
    """Run one experiment and write config.json, its outputs and manifest.json into the run directory."""
    run_id = generate_run_id()
    log_run_start(run_id, cfg.command)
    out_dir = Path(out or cfg.out or Path(settings.output_dir) / f"{cfg.command}-{run_id[:8]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "config.json", cfg.model_dump())

    result = process_experiment(cfg, run_id)
    if result["status"] != "success":
        print(f"error: {result['message']}", file=sys.stderr)
        return EXIT_ERROR

    outputs: List[Path] = []
    for name, rows in result["tables"].items():
        outputs.append(write_csv(out_dir / f"{name}.csv", rows))
    report: Dict[str, Any] = dict(result["report"])
    if "pass" in result:
        report = {"pass": result["pass"], "details": report}
    outputs.append(write_json(out_dir / f"{result['report_name']}.json", report))

    inputs = [cfg.instrument] if cfg.instrument and not cfg.instrument.startswith("builtin:") else []
    inputs += observable_input(cfg.params.get("observable"))
    write_manifest(out_dir, run_id, cfg.command, inputs, [out_dir / "config.json", *outputs])
    logging.info(f"Run {run_id}: outputs written to {out_dir}")

    if result.get("pass") is False:
        print(f"{cfg.command}: verdict failed (see {out_dir})", file=sys.stderr)
        return EXIT_VERDICT
    return EXIT_OK


def replay(path: str, out: Optional[str] = None) -> int:
    """
    Rerun a config.json written by dispatch.

    Outputs go to `out`, or to a sibling '<run dir>-replay' directory so the
    original run is left untouched.
    """
    config_path = Path(path)
    try:
        cfg = ExperimentConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    except (OSError, ValidationError, ValueError) as e:
        logging.error(f"Replay of {path} failed - {str(e)}")
        print(f"error: cannot replay {path}: {e}", file=sys.stderr)
        return EXIT_ERROR
    if cfg.command not in COMMANDS:
        print(f"error: unknown command '{cfg.command}' in {path}", file=sys.stderr)
        return EXIT_ERROR
    target = out or str(config_path.parent.with_name(config_path.parent.name + "-replay"))
    return execute(cfg, target)


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run the subcommand and return the exit code (0 pass, 2 verdict failure, 1 error)."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as e:
        return int(e.code or 0)
    if args.command == "replay":
        return replay(args.config, args.out)
    try:
        cfg = config_from_args(args)
    except ValidationError as e:
        print(f"{parser.format_usage()}error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return execute(cfg)


def main() -> int:
    setup_logging()
    return dispatch()


if __name__ == "__main__":
    sys.exit(main())
