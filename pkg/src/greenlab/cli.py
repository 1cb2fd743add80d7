"""Command line entry point: ``greenlab run | verify | report``."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, validate
from .lattice import DomainError

EXIT_PASS, EXIT_BAND, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _jobs(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("GREENLAB_JOBS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("GREENLAB_JOBS", f"not an integer: {env!r}")
    return 1


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def cmd_run(args) -> int:
    from .experiments import run_experiment

    cfg = validate(load_config(args.config), args.seed)
    jobs = _jobs(args.jobs)
    result, csv_path, json_path = run_experiment(cfg, args.out, jobs)
    for r in result.rows:
        if r["pass"] is not None:
            print(f"{r['inequality_id']:10s} {r['quantity']:36s} {'PASS' if r['pass'] else 'FAIL'}")
    for msg in result.failures:
        print(f"failure: {msg}", file=sys.stderr)
    print(f"wrote {csv_path} and {json_path}")
    return result.exit_code


def cmd_verify(args) -> int:
    from .experiments import verify_suite

    raw = load_config(args.config) if args.config else {}
    verdicts = verify_suite(raw)
    for v in verdicts:
        print(v.line())
    return EXIT_PASS if all(v.passed for v in verdicts) else EXIT_BAND


def _cell(v: str) -> str:
    try:
        f = float(v)
    except ValueError:
        return v
    return v if v.lstrip("-").isdigit() else f"{f:.4g}"


def cmd_report(args) -> int:
    root = Path(args.inp)
    if not root.exists():
        raise ConfigError("--in", f"{root} does not exist")
    files = sorted(root.glob("*.csv")) if root.is_dir() else [root]
    if not files:
        raise ConfigError("--in", f"no CSV reports under {root}")
    cols = ("inequality_id", "radius", "quantity", "value", "slope", "slope_target", "band", "r2", "pass")
    status = EXIT_PASS
    for path in files:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        print(f"== {path.name} ({len(rows)} rows)")
        table = [cols] + [tuple(_cell(r.get(c, "")) for c in cols) for r in rows]
        widths = [max(len(t[i]) for t in table) for i in range(len(cols))]
        for t in table:
            print("  ".join(s.ljust(w) for s, w in zip(t, widths)).rstrip())
        if any(r.get("pass") == "false" for r in rows):
            status = EXIT_BAND
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="greenlab", description="Green function estimates on lattice domains")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=_seed)
    r.add_argument("--jobs", type=int)
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("verify", help="oracle-scale property battery")
    v.add_argument("--config")
    v.set_defaults(func=cmd_verify)
    rep = sub.add_parser("report", help="pretty-print CSV reports")
    rep.add_argument("--in", dest="inp", required=True)
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
