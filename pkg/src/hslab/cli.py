"""Command-line surface: one subcommand per reproducible experiment.

Every run is fully determined by (config, seed); artifacts are a CSV with a
deterministic body plus a JSON manifest echoing the merged configuration
(including every default). The exit code is zero iff every acceptance
predicate of the subcommand held, so CI can gate directly on experiments.
"""

import argparse
import json
import sys

from .experiments import default_jobs, run_experiment

SUBCOMMANDS = [
    "flow-validate",
    "duality-check",
    "hat-probe",
    "singular-scaling",
    "jacobian-check",
    "chaos-run",
]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hslab",
        description="hard-sphere kinetic theory laboratory",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", default=None,
                       help="JSON config file overriding defaults")
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--out", default=f"out-{name}",
                       help="output directory for CSV and manifest")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker processes (default from HSLAB_JOBS or 1)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="inline config override, e.g. --set cells=8")
    return parser


def parse_overrides(pairs):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise SystemExit(f"bad override {item!r}; expected KEY=JSON")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
    config.update(parse_overrides(args.set))
    jobs = args.jobs if args.jobs is not None else default_jobs()
    try:
        result = run_experiment(args.subcommand, config, args.seed,
                                args.out, jobs=jobs)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    status = "PASS" if result.passed else "FAIL"
    print(f"{args.subcommand}: {status} ({len(result.rows)} rows) -> {args.out}")
    for key, val in result.summary.items():
        print(f"  {key}: {val}")
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
