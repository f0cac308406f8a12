"""Command line entry point: ``fedfa run|compare|sweep|replay``.

Exit codes: 0 success, 1 replay mismatch, 2 configuration error,
3 one or more runs diverged.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from pydantic import ValidationError

from . import experiment as ex
from .config import SWEEP_AXES, ExperimentConfig, format_validation_error, load_config
from .errors import ConfigError

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedfa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment document")
        sp.add_argument("--out", help=f"output directory (default: ${ex.OUT_ROOT_ENV}/<name>)")
        sp.add_argument("--seed", type=int, action="append",
                        help="override the config's seed list (repeatable)")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--recompute", action="store_true",
                        help="rebuild tables from stored run logs without simulating")

    common(sub.add_parser("run", help="run every strategy x seed"))
    common(sub.add_parser("compare", help="run and build comparison tables"))
    sw = sub.add_parser("sweep", help="repeat the comparison across one parameter axis")
    common(sw)
    sw.add_argument("axis", choices=SWEEP_AXES)
    sw.add_argument("--values", type=float, nargs="+", help="override the config's sweep values")
    rp = sub.add_parser("replay", help="re-run a stored log and check it reproduces exactly")
    rp.add_argument("log", help="path to a run .ndjson file")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed:
        cfg = cfg.model_copy(update={"seeds": list(args.seed)})
    out = Path(args.out) if args.out else (
        Path(cfg.output_dir) if cfg.output_dir else ex.default_output_dir(cfg.name))
    return cfg, out


def _prepare_out(out: Path, force: bool, recompute: bool) -> None:
    if recompute:
        if not (out / "runs").is_dir():
            raise ConfigError(f"--recompute: no stored runs under {out}")
        return
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _report_aborted(aborted: list[str]) -> int:
    if aborted:
        print("diverged runs: " + ", ".join(aborted), file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _aborted_in(out: Path) -> list[str]:
    return [f"{label}__seed{lg.header.get('seed')}"
            for label, logs in ex.load_runs(out).items() for lg in logs if lg.aborted]


def cmd_run(args, compare: bool = False) -> int:
    cfg, out = _resolve(args)
    if compare and len(cfg.strategies) < 2:
        raise ConfigError("strategies: compare needs at least two strategies")
    _prepare_out(out, args.force, args.recompute)
    if not args.recompute:
        ex.run_all(cfg.runs(), out, jobs=args.jobs)
    tables = ex.write_tables(out, cfg.targets, cfg.budget, compare=compare)
    for name, rows in tables.items():
        if name != "summary" or not compare:
            print(f"== {name}")
            print(ex.table_to_text(rows))
    return _report_aborted(_aborted_in(out))


def cmd_sweep(args) -> int:
    cfg, out = _resolve(args)
    values = args.values if args.values else cfg.sweep.get(args.axis)
    if not values:
        raise ConfigError(f"sweep.{args.axis}: no values to sweep")
    _prepare_out(out, args.force, args.recompute)
    aborted = []
    for v in values:
        vdir = ex.sweep_value_dir(out, args.axis, v)
        if not args.recompute:
            ex.run_all(cfg.runs({args.axis: v}), vdir, jobs=args.jobs)
        ex.write_tables(vdir, cfg.targets, cfg.budget, compare=len(cfg.strategies) > 1)
        aborted += [f"{args.axis}={v:g}/{a}" for a in _aborted_in(vdir)]
    rows = ex.write_sweep_tables(out, args.axis, values, cfg.targets, cfg.budget)
    print(ex.table_to_text(rows))
    return _report_aborted(aborted)


def cmd_replay(args) -> int:
    same, stored, _ = ex.replay(args.log)
    if same:
        print(f"{args.log}: reproduced byte-for-byte")
        return EXIT_OK
    print(f"{args.log}: replay differs from stored log", file=sys.stderr)
    return EXIT_MISMATCH


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "compare":
            return cmd_run(args, compare=True)
        if args.command == "sweep":
            return cmd_sweep(args)
        return cmd_replay(args)
    except ValidationError as exc:
        print(format_validation_error(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
