"""Command line entry point: ``pograph run|sweep|verify|progress|regime``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigError, InvalidArgument, InvalidParameter, PographError
from .executor import execute, measure_progress, trace_lines
from .harness import ExperimentConfig, build_components, regime_table, rows_to_csv, run, sweep
from .verify import SUITES, run_suites

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE, EXIT_INVARIANT = 0, 2, 3, 4


def _load(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})", path) from None


def _emit(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="") as fh:
            fh.write(text)


def _parse_values(raw: str) -> list:
    vals = []
    for tok in raw.split(","):
        tok = tok.strip()
        try:
            vals.append(int(tok))
        except ValueError:
            try:
                vals.append(float(tok))
            except ValueError:
                raise ConfigError(f"not a number: {tok!r}", "--values") from None
    return vals


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_dict(_load(args.config))
    res = run(cfg, timing=args.timing)
    _emit(rows_to_csv(res.rows), args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.from_dict(_load(args.config))
    axis = args.axis or (cfg.sweep or {}).get("axis")
    values = _parse_values(args.values) if args.values else (cfg.sweep or {}).get("values")
    if axis is None or values is None:
        raise ConfigError("sweep needs --axis and --values or a sweep block", "sweep")
    series, rows = sweep(cfg, axis, values)
    _emit(rows_to_csv(rows), args.output)
    lo, hi = series.slope_ci
    print(f"slope {series.slope:.4f}  95% CI [{lo:.4f}, {hi:.4f}]", file=sys.stderr)
    if any(series.clamped):
        print("warning: non-positive suboptimality clamped at "
              + ", ".join(str(p[0]) for p, c in zip(series.points, series.clamped) if c), file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(args.suite or None, seed=args.seed)
    bad = 0
    for r in results:
        if not r.ok or args.verbose:
            print(f"{'ok  ' if r.ok else 'FAIL'} {r.suite}: {r.name} {r.detail}".rstrip())
        bad += not r.ok
    print(f"{len(results) - bad}/{len(results)} checks passed")
    return EXIT_OK if bad == 0 else EXIT_INVARIANT


def cmd_progress(args) -> int:
    cfg = ExperimentConfig.from_dict(_load(args.config))
    g, inst, prog = build_components(cfg)
    trace = execute(g, prog, inst, seed=cfg.seeds[0])
    _emit("".join(line + "\n" for line in trace_lines(trace)), args.output)
    if inst.frame is not None:
        thr = inst.progress_threshold if args.threshold is None else args.threshold
        pt = measure_progress(trace, inst.frame, thr)
        print(f"flagged cells {int(np.sum(pt.flags))}/{pt.candidate_cells} "
              f"(fraction {pt.flagged_fraction:.4f}, threshold {thr:.4g})", file=sys.stderr)
    return EXIT_OK


def cmd_regime(args) -> int:
    raw = _load(args.config)
    configs = raw if isinstance(raw, list) else raw.get("cells")
    if not isinstance(configs, list):
        raise ConfigError("regime config must be a list of cells or {\"cells\": [...]}", "cells")
    rows = regime_table(configs)
    _emit("".join(json.dumps(r) + "\n" for r in rows), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pograph", description="Oracle-graph optimization experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every seed of a config and emit CSV")
    r.add_argument("-c", "--config", required=True)
    r.add_argument("-o", "--output")
    r.add_argument("--timing", action="store_true", help="fill the wall_ms column (output no longer reproducible)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep one parameter and fit a log-log slope")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("--axis", help="graph key (T, M, K, tau) or section.key, e.g. algorithm.batch")
    s.add_argument("--values", help="comma separated, e.g. 64,128,256")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--suite", action="append", choices=sorted(SUITES))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("-v", "--verbose", action="store_true")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("progress", help="export a JSON-lines trace and report progress flags")
    g.add_argument("-c", "--config", required=True)
    g.add_argument("-o", "--output")
    g.add_argument("--threshold", type=float)
    g.set_defaults(func=cmd_progress)

    t = sub.add_parser("regime", help="compare algorithms on intermittent-graph cells")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_regime)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidParameter, InvalidArgument) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PographError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
