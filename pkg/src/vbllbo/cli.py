"""Command-line interface.

Verbs::

    vbllbo run CONFIG [--seed S ...] [--out DIR] [--jobs N] [--resume]
    vbllbo sweep CONFIG --axis NAME --values V [V ...] [--seed ...] [--out DIR] [--jobs N]
    vbllbo export RUN_DIR --metric {best,hv,logdiff_hv} [--max-hv X] [--out FILE]
    vbllbo list-problems

Exit status is 0 when every seed succeeded and 2 when any seed failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .benchmarks import list_problems, reference_points
from .harness import SWEEP_AXES, export_curves, load_config, load_records, run_experiment, sweep

EXIT_OK = 0
EXIT_SEED_FAILED = 2


def _parse_value(text: str):
    return yaml.safe_load(text)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbllbo", description="VBLL Bayesian-optimization experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--seed", type=int, nargs="+", help="override the seed list")
        p.add_argument("--out", help="override the output root")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--resume", action="store_true", help="skip seeds already finished")

    common(sub.add_parser("run", help="run one experiment"))
    p = sub.add_parser("sweep", help="run an experiment across values of one hyperparameter")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, nargs="+")

    p = sub.add_parser("export", help="write mean and 10/90 percentile curves")
    p.add_argument("run_dir")
    p.add_argument("--metric", choices=["best", "hv", "logdiff_hv"], default="best")
    p.add_argument("--max-hv", type=float, help="maximum HV (defaults to the recorded value)")
    p.add_argument("--out", help="CSV destination (default: RUN_DIR/curves_<metric>.csv)")

    sub.add_parser("list-problems", help="print registered problem names")
    return parser


def _status(records) -> int:
    failed = [s for s, r in records.items() if r.status != "ok"]
    if failed:
        print(f"failed seeds: {failed}", file=sys.stderr)
        return EXIT_SEED_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "list-problems":
        for name in list_problems():
            print(name)
        return EXIT_OK

    if args.verb == "export":
        run_dir = Path(args.run_dir)
        records = load_records(run_dir)
        max_hv = args.max_hv
        if args.metric == "logdiff_hv" and max_hv is None:
            meta = yaml.safe_load((run_dir / "meta.json").read_text())
            entry = reference_points().get(meta["config"]["problem"], {})
            max_hv = entry.get("max_hv")
        out = args.out or run_dir / f"curves_{args.metric}.csv"
        export_curves(records, args.metric, max_hv=max_hv, path=out)
        print(out)
        return EXIT_OK

    cfg = load_config(args.config, seeds=args.seed, out_dir=args.out)
    if args.verb == "run":
        records = run_experiment(cfg, jobs=args.jobs, resume=args.resume)
        print(cfg.run_dir())
        return _status(records)

    results = sweep(cfg, args.axis, [_parse_value(v) for v in args.values], jobs=args.jobs, resume=args.resume)
    code = EXIT_OK
    for records in results.values():
        code = max(code, _status(records))
    print(cfg.run_dir())
    return code


if __name__ == "__main__":
    sys.exit(main())
