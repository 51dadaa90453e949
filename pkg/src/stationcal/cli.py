"""Command line entry points.

calibrate run     --config FILE --out DIR [--mode robust|gaussian]
                  [--mono | --multi] [--seed N] [--trials N]
calibrate compare --a mse_a.csv --b mse_b.csv

Exit codes: 0 success, 2 configuration error, 3 solver failure rate
above 50% in some cell. CAL_THREADS caps trial parallelism.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import CalibrationError, ConfigError
from .harness import (
    emit_outputs,
    load_mse_csv,
    match_records,
    parse_config,
    ratio_with_ci,
    run_experiment,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="calibrate",
        description="Simulate and calibrate compact-station observations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a Monte-Carlo experiment")
    run_p.add_argument("--config", required=True, help="flat key=value config file")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--mode", choices=("robust", "gaussian"))
    group = run_p.add_mutually_exclusive_group()
    group.add_argument(
        "--mono", action="store_true", help="only the single-frequency cell"
    )
    group.add_argument(
        "--multi", action="store_true", help="only multi-frequency cells"
    )
    run_p.add_argument("--seed", type=int)
    run_p.add_argument("--trials", type=int)

    cmp_p = sub.add_parser("compare", help="compare two mse.csv files cell by cell")
    cmp_p.add_argument("--a", required=True)
    cmp_p.add_argument("--b", required=True)
    return parser


def _cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.mode:
            cfg = replace(cfg, modes=(args.mode,))
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.trials is not None:
            cfg = replace(cfg, trials=args.trials)
        if args.mono:
            if 1 not in cfg.f_counts:
                raise ConfigError("--mono requested but f_counts has no 1")
            cfg = replace(cfg, f_counts=(1,))
        if args.multi:
            multi = tuple(c for c in cfg.f_counts if c > 1)
            if not multi:
                raise ConfigError("--multi requested but f_counts has no F > 1")
            cfg = replace(cfg, f_counts=multi)
        warnings = cfg.validate()
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)

    records, stats, traces = run_experiment(cfg)
    paths = emit_outputs(records, args.out, traces)
    print(f"wrote {paths['mse']} ({len(records)} records)")

    bad = {
        cell: s for cell, s in stats.items() if s.failure_rate > 0.5
    }
    for cell, s in sorted(stats.items()):
        if s.failed:
            print(
                f"cell snr={cell[0]:g} mode={cell[1]} F={cell[2]}: "
                f"{s.failed}/{s.attempted} trials failed"
            )
    if bad:
        print(
            f"solver failure rate above 50% in {len(bad)} cell(s)",
            file=sys.stderr,
        )
        return 3
    return 0


def _cmd_compare(args) -> int:
    try:
        rec_a = load_mse_csv(args.a)
        rec_b = load_mse_csv(args.b)
        pairs = match_records(rec_a, rec_b)
    except (CalibrationError, OSError) as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return 2
    wins_a = wins_b = 0
    print(f"{'parameter':<12} {'snr':>6} {'F':>3} {'mse_a':>12} {'mse_b':>12} "
          f"{'ratio':>9} {'95% interval':>22}")
    for ra, rb in pairs:
        ratio, lo, hi = ratio_with_ci(ra, rb)
        if ratio < 1.0:
            wins_a += 1
        elif ratio > 1.0:
            wins_b += 1
        print(
            f"{ra.parameter:<12} {ra.snr_db:>6g} {ra.n_freq:>3d} "
            f"{ra.mse:>12.4e} {rb.mse:>12.4e} {ratio:>9.4f} "
            f"[{lo:>9.4f}, {hi:>9.4f}]"
        )
    print(f"wins: a={wins_a} b={wins_b} ties={len(pairs) - wins_a - wins_b}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    return _cmd_compare(args)


if __name__ == "__main__":
    sys.exit(main())
