"""
Command-line entry point.

    certismooth certify --config run.cfg --smoothing.sigma=0.5
    certismooth recompute report.json

Exit codes: 0 success, 1 recompute mismatch, 2 config error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

from . import experiments
from .config import load_config
from .errors import ConfigError, DataError, TrainingDivergence

RUNNERS = {
    "certify": experiments.run_certify,
    "attack": experiments.run_attack,
    "ablate-k": experiments.run_ablate_k,
    "adapt": None,  # needs the checkpoint directory
    "pretrain-denoiser": experiments.run_pretrain_denoiser,
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certismooth", description="Denoised randomized smoothing experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run {name}; extra --section.key=value flags override the config")
        p.add_argument("--config", help="plain-text 'section.key = value' file")
        p.add_argument("--output", help="report path (same as --runtime.output)")
    p = sub.add_parser("recompute", help="check a report's aggregates against its records")
    p.add_argument("report")
    return parser


def table_rows(report: dict) -> list[dict]:
    """Flatten a report's aggregates into CSV rows."""
    agg = report["aggregates"]
    if "rows" in agg:
        rows = agg["rows"]
    elif "mse" in agg:
        return agg["mse"]
    elif report["command"] == "attack":
        rows = list(agg.values())
    else:
        rows = [agg]
    flat = []
    for row in rows:
        out = dict(row)
        curve = out.pop("certified_accuracy", None)
        if isinstance(curve, dict):
            out.update({f"certified_accuracy@{eps}": acc for eps, acc in curve.items()})
        elif curve is not None:
            out["certified_accuracy"] = curve
        flat.append(out)
    return flat


def write_table(rows: list[dict], path) -> None:
    if not rows:
        return
    fields = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _close(a, b) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k]) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_close(x, y) for x, y in zip(a, b))
    if isinstance(a, float) or isinstance(b, float):
        return a == b or (isinstance(a, (int, float)) and isinstance(b, (int, float))
                          and math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12))
    return a == b


def _recompute(path) -> int:
    try:
        report = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from None
    fresh = experiments.recompute(report)
    if _close(fresh, report["aggregates"]):
        print(f"{path}: aggregates match {len(report['records'])} records")
        return 0
    print(f"{path}: aggregates do not match records", file=sys.stderr)
    return 1


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    try:
        if args.command == "recompute":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            return _recompute(args.report)
        overrides = list(extra)
        if args.output:
            overrides.append(f"runtime.output={args.output}")
        cfg = load_config(args.config, overrides)
        if args.command == "adapt":
            report = experiments.run_adapt(cfg, cfg["runtime.checkpoint_dir"] or None)
        else:
            report = RUNNERS[args.command](cfg)
        out = Path(cfg["runtime.output"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(experiments.dumps(report))
        write_table(table_rows(report), out.with_suffix(".csv"))
        print(f"wrote {out}")
        return 0
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:  # ConfigError, DomainError and parameter checks
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
