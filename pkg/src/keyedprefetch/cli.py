"""Command line entry point: ``run``, ``sweep`` and ``scenario dynamic-lookahead``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench.config import ExperimentConfig
from .bench.harness import Backpressure, run_detailed, scenario_dynamic_lookahead, sustainable_throughput_search, sweep
from .stateful import MODES


def _load(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "mode", None):
        cfg = cfg.with_value("run.mode", args.mode)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_value("run.seed", args.seed)
        cfg = cfg.with_value("workload.seed", args.seed)
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        cfg = cfg.with_value(key, _parse_value(raw))
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(_load(args.config), args)
    out = Path(args.out)
    try:
        res = run_detailed(cfg)
    except Backpressure as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if exc.report is not None:
            exc.report.write(out)
        return 2
    path = res.report.write(out, res.latencies)
    r = res.report
    print(f"{r.mode}: p50={r.p50_ms:.3f} p99={r.p99_ms:.3f} p999={r.p999_ms:.3f} ms"
          f"{' (low confidence)' if r.p999_low_confidence else ''}  hit ratio {r.hit_ratio:.3f}  -> {path}")
    return 0


def cmd_throughput(args) -> int:
    cfg = _apply_overrides(_load(args.config), args)
    try:
        res = sustainable_throughput_search(cfg, lo=args.lo, hi=args.hi, resolution=args.resolution)
    except Backpressure as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"mode": cfg.run.mode, "sustainable_tps": res.rate, "probes": res.probes}, indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(_load(args.config), args)
    values = [_parse_value(v) for v in args.values]
    rows = sweep(cfg, args.param, values, args.modes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2))
    for row in rows:
        print(json.dumps(row))
    return 2 if any(not r.get("sustainable", False) for r in rows) else 0


def cmd_scenario(args) -> int:
    cfg = _apply_overrides(_load(args.config), args)
    report = scenario_dynamic_lookahead(cfg)
    report.write(Path(args.out), stem="dynamic_lookahead")
    for row in report.active_lookahead_timeline:
        print(f"{row['time_ms']:10.1f} ms  {row['kind']:<9} {row['active']}  {row['detail']}")
    return 0 if report.sustainable else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keyedprefetch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="experiment JSON file")
        sp.add_argument("--mode", choices=MODES)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        sp.add_argument("--out", default="results")

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.set_defaults(func=cmd_run)

    tp = sub.add_parser("throughput", help="search the highest sustainable input rate")
    common(tp)
    tp.add_argument("--lo", type=float, default=1_000.0)
    tp.add_argument("--hi", type=float, default=1_000_000.0)
    tp.add_argument("--resolution", type=float, default=0.05)
    tp.set_defaults(func=cmd_throughput)

    sw = sub.add_parser("sweep", help="run one experiment per parameter value")
    common(sw)
    sw.add_argument("--param", required=True, help="dotted key, e.g. workload.alpha")
    sw.add_argument("--values", nargs="+", required=True)
    sw.add_argument("--modes", nargs="+", choices=MODES)
    sw.set_defaults(func=cmd_sweep)

    sc = sub.add_parser("scenario", help="scripted scenarios")
    sc.add_argument("name", choices=["dynamic-lookahead"])
    common(sc, config_required=True)
    sc.set_defaults(func=cmd_scenario)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
