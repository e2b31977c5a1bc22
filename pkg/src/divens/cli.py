"""``divens`` command line: run, sweep, report, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 training divergence in at least one seed (partial results are written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import SWEEP_AXES, load_config
from .errors import ConfigurationError, FormatError, UsageError

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="divens", description="Ensemble diversity regularization experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def replicate_flags(sp):
        sp.add_argument("config", type=Path)
        sp.add_argument("--seed-offset", type=int, default=0, help="add this to every configured seed")
        sp.add_argument("--jobs", type=int, default=1, help="seed replicates run concurrently")
        sp.add_argument("--force", action="store_true", help="recompute seeds whose results are up to date")

    replicate_flags(sub.add_parser("run", help="train and evaluate every seed of a config"))
    sw = sub.add_parser("sweep", help="one run per value of a sweep axis")
    replicate_flags(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)

    rp = sub.add_parser("report", help="comparison table over all runs below a directory")
    rp.add_argument("results_dir", type=Path)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args) -> int:
    from .experiment import run

    cfg = load_config(args.config)
    result = run(cfg, seed_offset=args.seed_offset, jobs=args.jobs, force=args.force)
    print(f"{cfg.name}: {len(result.computed)} seed(s) computed, {len(result.outcomes) - len(result.computed)} up to date -> {cfg.output_dir}")
    if result.diverged:
        print(f"diverged seeds: {', '.join(map(str, result.diverged))}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .experiment import sweep

    cfg = load_config(args.config)
    path, results = sweep(cfg, args.axis, seed_offset=args.seed_offset, jobs=args.jobs, force=args.force)
    print(f"{cfg.name}: {len(results)} {args.axis} value(s) -> {path}")
    diverged = [(r.config.name, s) for r in results for s in r.diverged]
    if diverged:
        print("diverged: " + ", ".join(f"{n} seed {s}" for n, s in diverged), file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_report(args) -> int:
    from .experiment import report

    _, text = report(args.results_dir)
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(instances=args.instances, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  max rel err {r.max_rel_err:.2e}  ({r.instances} instances, {r.seconds:.1f}s)  {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "report": _cmd_report, "gradcheck": _cmd_gradcheck}[args.command]
    try:
        return handler(args)
    except (ConfigurationError, FormatError, UsageError) as exc:
        print(f"divens: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
