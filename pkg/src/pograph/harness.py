"""Experiment configs, repeated runs, sweeps with slope fits, and regime tables."""
from __future__ import annotations

import copy
import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .algorithms import SVRG, AMBSGD, SequentialSGD, program_from_spec
from .errors import ConfigError, InvalidParameter, PographError
from .executor import execute
from .graphs import graph_from_spec
from .instances import instance_from_spec, true_suboptimality

CSV_COLUMNS = ["graph", "T", "M", "K", "tau", "algorithm", "instance", "L", "H", "B", "m", "seed",
               "reps", "subopt_mean", "subopt_se", "slope_tag", "wall_ms"]

_POS_INT = {"type": "integer", "minimum": 1}
_NUM_OR_AUTO = {"anyOf": [{"type": "number"}, {"const": "auto"}]}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["graph", "instance", "algorithm"],
    "additionalProperties": False,
    "properties": {
        "graph": {
            "type": "object",
            "required": ["topology"],
            "properties": {
                "topology": {"enum": ["path", "layer", "delay", "intermittent", "custom"]},
                "T": _POS_INT, "M": _POS_INT, "K": _POS_INT,
                "tau": {"anyOf": [_POS_INT, {"type": "array", "items": _POS_INT, "minItems": 1}]},
                "edges": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                                                     "minItems": 2, "maxItems": 2}},
                "nodes": _POS_INT,
            },
            "additionalProperties": False,
            "allOf": [
                {"if": {"properties": {"topology": {"enum": ["path", "layer", "delay", "intermittent"]}}},
                 "then": {"required": ["T"]}},
                {"if": {"properties": {"topology": {"const": "layer"}}}, "then": {"required": ["M"]}},
                {"if": {"properties": {"topology": {"const": "delay"}}}, "then": {"required": ["tau"]}},
                {"if": {"properties": {"topology": {"const": "intermittent"}}}, "then": {"required": ["K", "M"]}},
                {"if": {"properties": {"topology": {"const": "custom"}}}, "then": {"required": ["edges"]}},
            ],
        },
        "instance": {
            "type": "object",
            "required": ["instance"],
            "properties": {
                "instance": {"enum": ["moreau", "chain", "coinflip", "quadratic_chain", "zero"]},
                "L": {"type": "number", "exclusiveMinimum": 0},
                "H": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "inf"}]},
                "B": {"type": "number", "exclusiveMinimum": 0},
                "D": {"anyOf": [_POS_INT, {"const": "auto"}]},
                "m": {"anyOf": [_POS_INT, {"const": "auto"}]},
                "N": {"anyOf": [_POS_INT, {"const": "auto"}]},
                "seed": {"type": "integer", "minimum": 0},
                "a0": _NUM_OR_AUTO,
                "sigma": {"type": "number", "minimum": 0},
                "lam": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
            "allOf": [{"if": {"properties": {"instance": {"enum": ["moreau", "chain"]}}},
                       "then": {"required": ["D"]}}],
        },
        "algorithm": {
            "type": "object",
            "required": ["algorithm"],
            "properties": {
                "algorithm": {"enum": ["sequential_sgd", "amb_sgd", "smoothed_amb_sgd", "delayed_sgd",
                                       "wait_and_collect", "parallel_sgd", "svrg", "random_query"]},
                "steps": _POS_INT, "rounds": _POS_INT, "batch": _POS_INT, "tau": _POS_INT,
                "step": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"},
                                   {"type": "object", "properties": {"scale": {"type": "number",
                                                                             "exclusiveMinimum": 0}},
                                    "additionalProperties": False}]},
                "schedule": {"type": "object", "properties": {"scale": {"type": "number", "exclusiveMinimum": 0}},
                             "additionalProperties": False},
                "noise": {"type": "number", "minimum": 0},
                "period": {"enum": ["2tau", "2tau+1"]},
                "n": {"anyOf": [_POS_INT, {"const": "auto"}]},
                "lambda": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"}]},
                "I": {"anyOf": [_POS_INT, {"const": "auto"}]},
            },
            "additionalProperties": False,
        },
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "reps": _POS_INT,
        "sweep": {
            "type": "object",
            "required": ["axis", "values"],
            "properties": {"axis": {"type": "string"},
                           "values": {"type": "array", "items": {"type": "number"}, "minItems": 1}},
            "additionalProperties": False,
        },
    },
}


def _path_str(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


@dataclass
class ExperimentConfig:
    graph: dict
    instance: dict
    algorithm: dict
    seeds: list = field(default_factory=lambda: [0])
    reps: int = 1
    sweep: dict | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
        if errors:
            err = errors[-1]
            raise ConfigError(err.message, _path_str(err.absolute_path))
        cfg = cls(copy.deepcopy(raw["graph"]), copy.deepcopy(raw["instance"]), copy.deepcopy(raw["algorithm"]),
                  list(raw.get("seeds", [0])), int(raw.get("reps", 1)), copy.deepcopy(raw.get("sweep")))
        if cfg.instance.get("H") == "inf":
            cfg.instance["H"] = math.inf
        return cfg

    def to_dict(self) -> dict:
        out = {"graph": self.graph, "instance": self.instance, "algorithm": self.algorithm,
               "seeds": self.seeds, "reps": self.reps}
        if self.sweep:
            out["sweep"] = self.sweep
        return out

    def with_value(self, axis: str, value) -> "ExperimentConfig":
        """Copy with one parameter replaced; ``axis`` is a graph key or ``section.key``."""
        new = copy.deepcopy(self)
        section, _, key = axis.rpartition(".")
        section = section or "graph"
        if section not in ("graph", "instance", "algorithm"):
            raise ConfigError(f"unknown sweep section {section!r}", "sweep.axis")
        target = getattr(new, section)
        if isinstance(value, float) and value.is_integer() and key in ("T", "M", "K", "tau", "D", "m", "N",
                                                                        "batch", "rounds", "steps", "n", "I"):
            value = int(value)
        target[key] = value
        return new


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_seed(seed: int, rep: int) -> int:
    if rep == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), rep]).generate_state(1, dtype=np.uint32)[0])


def build_components(cfg: ExperimentConfig):
    try:
        g = graph_from_spec(cfg.graph)
    except PographError as exc:
        raise ConfigError(str(exc), "graph") from exc
    try:
        inst = instance_from_spec(cfg.instance, g)
    except PographError as exc:
        raise ConfigError(str(exc), "instance") from exc
    try:
        prog = program_from_spec(cfg.algorithm)
    except PographError as exc:
        raise ConfigError(str(exc), "algorithm") from exc
    return g, inst, prog


def _seed_cell(args):
    cfg, seed = args
    g, inst, prog = build_components(cfg)
    vals, ses = [], []
    t0 = time.perf_counter()
    for rep in range(cfg.reps):
        trace = execute(g, prog, inst, _run_seed(seed, rep))
        v, se = true_suboptimality(inst, trace.estimate, reps=1, seed=seed)
        vals.append(v)
        ses.append(se)
    wall = (time.perf_counter() - t0) * 1000.0
    vals = np.asarray(vals)
    if cfg.reps > 1:
        se = float(vals.std(ddof=1) / math.sqrt(cfg.reps))
    else:
        se = float(ses[0])
    return seed, float(vals.mean()), se, wall


def _threads() -> int:
    """Worker cap from POGRAPH_THREADS, defaulting to the CPU count."""
    raw = os.environ.get("POGRAPH_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"POGRAPH_THREADS must be an integer, got {raw!r}", "POGRAPH_THREADS") from None


def _map(fn, items):
    n = min(_threads(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * n))))


@dataclass
class RunResult:
    rows: list
    mean: float
    se: float
    per_seed: list


def _row(cfg, g, inst, seed, reps, mean, se, slope_tag="", wall=None) -> dict:
    p = g.params
    tau = ""
    if g.topology == "delay":
        tau = p.tau[0] if len(set(p.tau)) == 1 else "var"
    lsc = inst.lsc
    return {
        "graph": g.topology,
        "T": p.T if p is not None else "",
        "M": p.M if p is not None and g.topology in ("layer", "intermittent") else "",
        "K": p.K if p is not None and g.topology == "intermittent" else "",
        "tau": tau,
        "algorithm": cfg.algorithm["algorithm"],
        "instance": inst.name,
        "L": float(lsc.L), "H": float(lsc.H), "B": float(lsc.B), "m": inst.dim,
        "seed": seed, "reps": reps,
        "subopt_mean": float(mean), "subopt_se": float(se),
        "slope_tag": slope_tag,
        "wall_ms": "" if wall is None else float(round(wall, 3)),
    }


def run(config, timing: bool = False) -> RunResult:
    """Run every seed of a config; one row per seed plus a final aggregate row (seed "all")."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    g, inst, _ = build_components(cfg)
    cells = _map(_seed_cell, [(cfg, s) for s in cfg.seeds])
    cells.sort(key=lambda c: c[0])
    rows = [_row(cfg, g, inst, s, cfg.reps, m, se, wall=w if timing else None) for s, m, se, w in cells]
    means = np.array([c[1] for c in cells])
    if len(cells) > 1:
        agg_se = float(means.std(ddof=1) / math.sqrt(len(cells)))
    else:
        agg_se = cells[0][2]
    total_wall = sum(c[3] for c in cells)
    rows.append(_row(cfg, g, inst, "all", cfg.reps * len(cells), means.mean(), agg_se,
                     wall=total_wall if timing else None))
    return RunResult(rows, float(means.mean()), agg_se, [(c[0], c[1]) for c in cells])


def rows_to_csv(rows, fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


# ---------------------------------------------------------------------------
# rate fitting

_EPS = float(np.finfo(float).eps)


def fit_slope(scales, values) -> float:
    """Least-squares slope of log(value) against log(scale)."""
    x = np.log(np.asarray(scales, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


@dataclass
class RateSeries:
    axis: str
    points: list            # (scale, mean suboptimality, stderr)
    slope: float
    slope_ci: tuple
    clamped: list           # True where a non-positive mean was clamped to machine epsilon
    per_seed: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        s = [p[0] for p in self.points]
        if any(b <= a for a, b in zip(s, s[1:])):
            raise InvalidParameter("sweep scales must be strictly increasing")


def rate_series(axis, scales, per_seed: list[np.ndarray], n_boot: int = 1000, boot_seed: int = 0) -> RateSeries:
    """Build a RateSeries from per-seed suboptimalities at each scale."""
    if len(scales) < 3:
        raise InvalidParameter("a rate fit needs at least 3 sweep values")
    order = np.argsort(scales)
    scales = [float(scales[i]) for i in order]
    per_seed = [np.asarray(per_seed[i], dtype=float) for i in order]
    means, ses, clamped = [], [], []
    for v in per_seed:
        m = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        clamped.append(m <= 0)
        means.append(max(m, _EPS))
        ses.append(se)
    slope = fit_slope(scales, means)
    rng = np.random.default_rng(boot_seed)
    boots = []
    for _ in range(n_boot):
        ms = [max(float(v[rng.integers(len(v), size=len(v))].mean()), _EPS) for v in per_seed]
        boots.append(fit_slope(scales, ms))
    ci = (float(np.percentile(boots, 2.5)), float(np.percentile(boots, 97.5)))
    return RateSeries(axis, list(zip(scales, means, ses)), slope, ci, clamped, per_seed)


def sweep(config, axis: str | None = None, values=None) -> tuple[RateSeries, list]:
    """One run per sweep value; returns the fitted series and the aggregate rows."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    if axis is None or values is None:
        if not cfg.sweep:
            raise ConfigError("no sweep axis given", "sweep")
        axis, values = cfg.sweep["axis"], cfg.sweep["values"]
    values = list(values)
    if len(values) < 3:
        raise InvalidParameter("a sweep needs at least 3 values")
    cells = [(cfg.with_value(axis, v), s) for v in values for s in cfg.seeds]
    results = _map(_seed_cell, cells)
    per_value = []
    rows = []
    k = len(cfg.seeds)
    for i in range(len(values)):
        chunk = results[i * k:(i + 1) * k]
        per_value.append(np.array([c[1] for c in chunk]))
    series = rate_series(axis, values, per_value)
    tag = f"{axis}:{series.slope!r}"
    for v in sorted(values):
        sub = cfg.with_value(axis, v)
        g, inst, _ = build_components(sub)
        _, mean, se = next(p for p in series.points if p[0] == float(v))
        rows.append(_row(sub, g, inst, "all", k * cfg.reps, mean, se, slope_tag=tag))
    return series, rows


# ---------------------------------------------------------------------------
# regime comparison


def regime_table(configs) -> list[dict]:
    """For each intermittent-graph cell, compare single-chain SGD, A-MB-SGD with batch KM, and SVRG."""
    rows = []
    for raw in configs:
        raw = dict(raw)
        raw.setdefault("algorithm", {"algorithm": "sequential_sgd"})
        cfg = ExperimentConfig.from_dict(raw)
        if cfg.graph.get("topology") != "intermittent":
            raise ConfigError("regime cells need an intermittent graph", "graph.topology")
        results = {}
        for name, spec in (("sequential_sgd", {"algorithm": "sequential_sgd"}),
                           ("amb_sgd", {"algorithm": "amb_sgd"}),
                           ("svrg", {"algorithm": "svrg"})):
            sub = copy.deepcopy(cfg)
            sub.algorithm = spec
            try:
                results[name] = run(sub).mean
            except PographError:
                results[name] = math.inf
        ranked = sorted(results.items(), key=lambda kv: (kv[1], kv[0]))
        best, second = ranked[0], ranked[1]
        margin = second[1] / best[1] if best[1] > 0 else math.inf
        g = cfg.graph
        rows.append({"T": g["T"], "K": g["K"], "M": g["M"], "H": cfg.instance.get("H", math.inf),
                     **{f"subopt_{k}": v for k, v in results.items()},
                     "winner": best[0], "margin": margin})
    return rows
