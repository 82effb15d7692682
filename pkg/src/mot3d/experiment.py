"""Experiment grid: (operating point, order, lambda, subset) cells, reports and significance.

Configs are JSON objects with ``"schema_version": 1`` and optional sections
``scene`` (with nested ``path`` and ``noise``), ``operating_points``,
``tracker``, ``gate_calibration``, ``metric`` and ``experiment``. Missing
keys take the library defaults; unknown keys are an error.
"""
from __future__ import annotations

import csv
import dataclasses
import io as _io
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as recio
from .association import CHI2_3DOF_95, GateConfig, calibrate_feature_gate
from .core import DEFAULT_MEAS_SIGMA, DEFAULT_PROCESS_SIGMA, ValidationError, isotropic_cov
from .metrics import SimilarityConfig, TrajectorySet, evaluate, paired_t_test, stars
from .simgen import (
    NoiseSpec,
    OperatingPoint,
    PathSpec,
    SceneSpec,
    order_frames,
    simulate,
    subsample_viewpoints,
    validation_features,
)
from .tracker import TrackerConfig, run_sequence

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ORDERS = ("sequential", "random")
DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)
PCT_METRICS = ("hota", "det_re", "det_pr", "det_a", "ass_a", "mota")
COUNT_METRICS = ("fp", "fn", "idsw")
METRICS = PCT_METRICS + COUNT_METRICS
KEY_FIELDS = ("operating_point", "order", "lambda", "subset")
THREADS_ENV = "MOT3D_THREADS"


def default_config_path() -> Path:
    return Path(str(resources.files("mot3d") / "data" / "default_experiment.json"))


@dataclass(frozen=True)
class ExperimentSpec:
    scene: SceneSpec = field(default_factory=SceneSpec)
    presets: dict = field(default_factory=dict)
    lambda_grid: tuple = DEFAULT_LAMBDAS
    orders: tuple = ORDERS
    operating_points: tuple = ("mid",)
    n_subsets: int = 5
    subset_size: int = 80
    subset_seed: int = 1
    order_seed: int = 1
    compare_baseline: bool = True
    pos_gate: float = CHI2_3DOF_95
    # None: calibrate from held-out plants at each operating point
    feat_gate: Optional[float] = None
    gate_plant_seeds: tuple = (1001, 1002)
    gate_frames: int = 15
    meas_sigma: float = DEFAULT_MEAS_SIGMA
    process_sigma: float = DEFAULT_PROCESS_SIGMA
    feature_cap: Optional[int] = None
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    match_threshold: float = 0.5

    def __post_init__(self):
        grid = []
        for lam in self.lambda_grid:
            lam = float(lam)
            if not 0.0 <= lam <= 1.0:
                raise ValidationError(f"lambda {lam} outside [0, 1]")
            if lam in grid:
                warnings.warn(f"duplicate lambda {lam} dropped from the grid", stacklevel=3)
                continue
            grid.append(lam)
        if not grid:
            raise ValidationError("lambda_grid is empty")
        if self.compare_baseline and 0.0 not in grid:
            raise ValidationError("lambda_grid must include 0 when comparing against the baseline")
        object.__setattr__(self, "lambda_grid", tuple(sorted(grid)))
        for o in self.orders:
            if o not in ORDERS:
                raise ValidationError(f"unknown order {o!r}")
        object.__setattr__(self, "orders", tuple(self.orders))
        object.__setattr__(self, "operating_points", tuple(self.operating_points))
        for name in self.operating_points:
            if name not in self.presets:
                raise ValidationError(f"unknown operating point {name!r}; known: {sorted(self.presets)}")
        if self.n_subsets < 1 or self.subset_size < 1:
            raise ValidationError("n_subsets and subset_size must be positive")
        if self.compare_baseline and self.n_subsets < 2 and len(self.lambda_grid) > 1:
            raise ValidationError("significance tests need at least two subsets")
        object.__setattr__(self, "gate_plant_seeds", tuple(int(s) for s in self.gate_plant_seeds))

    def tracker_config(self, lam: float, feat_gate: float) -> TrackerConfig:
        return TrackerConfig(
            gate=GateConfig(pos_gate=self.pos_gate, feat_gate=feat_gate, lam=lam),
            meas_cov_default=isotropic_cov(self.meas_sigma),
            process_noise=isotropic_cov(self.process_sigma),
            feature_cap=self.feature_cap,
        )

    def scene_for(self, op_name: str) -> SceneSpec:
        return replace(self.scene, noise=self.presets[op_name].apply(self.scene.noise))


# ---------------------------------------------------------------- config parsing

def _build(cls, data, where: str, **nested):
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in nested:
            kwargs[k] = nested[k](v, f"{where}.{k}")
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def scene_from_dict(data: dict, where: str = "scene") -> SceneSpec:
    return _build(SceneSpec, data, where,
                  path=lambda v, w: _build(PathSpec, v, w),
                  noise=lambda v, w: _build(NoiseSpec, v, w))


def _presets(data: dict, where: str) -> dict:
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected an object")
    return {name: _build(OperatingPoint, {"name": name, **v}, f"{where}.{name}") for name, v in data.items()}


_TRACKER_KEYS = {"pos_gate", "feat_gate", "meas_sigma", "process_sigma", "feature_cap"}
_GATE_CAL_KEYS = {"plant_seeds": "gate_plant_seeds", "n_frames": "gate_frames"}
_EXPERIMENT_KEYS = {"lambda_grid", "orders", "operating_points", "n_subsets", "subset_size",
                    "subset_seed", "order_seed", "compare_baseline"}
_METRIC_KEYS = {"kind", "d_max", "alpha_grid", "match_threshold"}
_SECTIONS = {"schema_version", "scene", "operating_points", "tracker", "gate_calibration", "metric", "experiment"}


def _section(cfg: dict, name: str, allowed) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"{name}: expected an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ValidationError(f"{name}: unknown key(s) {sorted(unknown)}")
    return sec


def spec_from_dict(cfg: dict) -> ExperimentSpec:
    unknown = set(cfg) - _SECTIONS
    if unknown:
        raise ValidationError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    if "scene" in cfg:
        kwargs["scene"] = scene_from_dict(cfg["scene"])
    kwargs["presets"] = _presets(cfg.get("operating_points", {}), "operating_points")
    kwargs.update(_section(cfg, "tracker", _TRACKER_KEYS))
    for k, v in _section(cfg, "gate_calibration", _GATE_CAL_KEYS).items():
        kwargs[_GATE_CAL_KEYS[k]] = v
    metric = dict(_section(cfg, "metric", _METRIC_KEYS))
    if "match_threshold" in metric:
        kwargs["match_threshold"] = metric.pop("match_threshold")
    if "alpha_grid" in metric:
        metric["alpha_grid"] = tuple(metric["alpha_grid"])
    kwargs["similarity"] = SimilarityConfig(**metric)
    for k, v in _section(cfg, "experiment", _EXPERIMENT_KEYS).items():
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    if "presets" in kwargs and not kwargs["presets"]:
        kwargs.setdefault("operating_points", ())
    return ExperimentSpec(**kwargs)


def load_config(path=None) -> dict:
    path = default_config_path() if path is None else Path(path)
    return recio.load_json_config(path, SCHEMA_VERSION)


def load_spec(path=None, **overrides) -> ExperimentSpec:
    path = default_config_path() if path is None else Path(path)
    cfg = load_config(path)
    try:
        spec = spec_from_dict(cfg)
    except ValidationError as exc:
        raise recio.FormatError(str(exc), str(path)) from None
    return replace(spec, **overrides) if overrides else spec


# ---------------------------------------------------------------- results

@dataclass
class ResultTable:
    rows: list
    summary: list
    feature_gates: dict
    lambda_grid: tuple
    compare_baseline: bool = True

    @property
    def failures(self) -> list:
        return [r for r in self.rows if r["status"] != "ok"]

    def row(self, op, order, lam, subset) -> dict:
        for r in self.rows:
            if (r["operating_point"], r["order"], r["lambda"], r["subset"]) == (op, order, lam, subset):
                return r
        raise KeyError((op, order, lam, subset))

    def summary_row(self, op, order, lam) -> dict:
        for r in self.summary:
            if (r["operating_point"], r["order"], r["lambda"]) == (op, order, lam):
                return r
        raise KeyError((op, order, lam))

    def best_lambda(self, op, order, metric="hota") -> float:
        cands = [r for r in self.summary if r["operating_point"] == op and r["order"] == order and r["lambda"] > 0]
        return max(cands, key=lambda r: (r[metric], -r["lambda"]))["lambda"]

    def results_csv(self) -> str:
        cols = list(KEY_FIELDS) + list(METRICS) + ["status"]
        return _csv(cols, self.rows)

    def summary_csv(self) -> str:
        cols = ["operating_point", "order", "lambda", "n"] + list(METRICS)
        if self.compare_baseline and len(self.lambda_grid) > 1:
            for m in METRICS:
                cols += [f"{m}_t", f"{m}_p", f"{m}_stars"]
        cols.append("status")
        return _csv(cols, self.summary)

    def fig6_csv(self) -> str:
        long = [{**{k: r[k] for k in KEY_FIELDS}, "metric": m, "value": r[m]}
                for r in self.rows if r["status"] == "ok" for m in METRICS]
        return _csv(list(KEY_FIELDS) + ["metric", "value"], long)

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "feature_gates": self.feature_gates,
            "rows": self.rows,
            "summary": [{k: recio.finite_or_none(v) for k, v in r.items()} for r in self.summary],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(self.results_csv(), encoding="utf-8")
        (out / "summary.csv").write_text(self.summary_csv(), encoding="utf-8")
        (out / "fig6_long.csv").write_text(self.fig6_csv(), encoding="utf-8")
        (out / "results.json").write_text(self.to_json(), encoding="utf-8")


def _fmt_cell(v):
    if isinstance(v, float):
        if not math.isfinite(v):
            return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        return f"{v:.2f}"
    return "" if v is None else str(v)


def _csv(cols, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt_cell(r.get(c)) if not c.endswith(("_p", "_t")) else _fmt_stat(r.get(c)) for c in cols])
    return buf.getvalue()


def _fmt_stat(v):
    if v is None:
        return ""
    if not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    return f"{v:.6g}"


def summarize(rows, lambda_grid, compare_baseline: bool = True) -> list:
    """Mean rows per (operating point, order, lambda) with paired tests against lambda = 0.

    Tests run on the emitted (rounded) per-subset values, so stars can be
    recomputed from results.csv alone.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["operating_point"], r["order"], r["lambda"]), []).append(r)
    out = []
    for (op, order, lam), grp in groups.items():
        grp = sorted(grp, key=lambda r: r["subset"])
        ok = all(r["status"] == "ok" for r in grp)
        s = {"operating_point": op, "order": order, "lambda": lam, "n": len(grp),
             "status": "ok" if ok else "incomplete"}
        for m in METRICS:
            s[m] = round(float(np.mean([r[m] for r in grp])), 2) if ok else None
        base = groups.get((op, order, 0.0))
        if compare_baseline and len(lambda_grid) > 1:
            for m in METRICS:
                s[f"{m}_t"] = s[f"{m}_p"] = None
                s[f"{m}_stars"] = ""
            base_ok = base is not None and all(r["status"] == "ok" for r in base)
            if lam != 0.0 and ok and base_ok:
                base = sorted(base, key=lambda r: r["subset"])
                for m in METRICS:
                    res = paired_t_test([r[m] for r in grp], [r[m] for r in base])
                    s[f"{m}_t"], s[f"{m}_p"], s[f"{m}_stars"] = res.t, res.p, stars(res.p)
        out.append(s)
    return out


# ---------------------------------------------------------------- runner

def _threads(threads: Optional[int]) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            threads = os.cpu_count() or 1
    return max(1, threads)


def calibrate_gate_for(spec: ExperimentSpec, op_name: str) -> float:
    if spec.feat_gate is not None:
        return float(spec.feat_gate)
    return calibrate_feature_gate(validation_features(spec.scene_for(op_name), spec.gate_plant_seeds,
                                                      spec.gate_frames))


def _lam_tag(lam: float) -> str:
    return f"lam{lam:.2f}"


def run_experiment(spec: ExperimentSpec, out_dir=None, threads: Optional[int] = None,
                   write_trajectories: bool = True) -> ResultTable:
    """Run every (operating point, order, lambda, subset) cell and assemble the tables.

    A failing cell is recorded with an ``error: ...`` status instead of
    aborting the grid; summaries over incomplete groups carry no statistics.
    """
    traj_dir = Path(out_dir) / "trajectories" if (out_dir is not None and write_trajectories) else None
    prepared = {}
    gates = {}
    for op in spec.operating_points:
        scene = spec.scene_for(op)
        frames = simulate(scene)
        subsets = subsample_viewpoints(frames, spec.n_subsets, spec.subset_size, spec.subset_seed)
        gts = [TrajectorySet(recio.gt_records(sub)) for sub in subsets]
        gates[op] = calibrate_gate_for(spec, op)
        prepared[op] = (subsets, gts)
        log.info("operating point %s: feature gate %.4f", op, gates[op])
        if traj_dir is not None:
            for i, sub in enumerate(subsets):
                recio.write_detections(traj_dir / op / f"detections_subset{i}.jsonl", sub)
                recio.write_trajectories(traj_dir / op / f"gt_subset{i}.jsonl", recio.gt_records(sub))

    cells = [(op, order, lam, i) for op in spec.operating_points for order in spec.orders
             for lam in spec.lambda_grid for i in range(spec.n_subsets)]

    def run_cell(cell):
        op, order, lam, i = cell
        row = {"operating_point": op, "order": order, "lambda": lam, "subset": i}
        try:
            subsets, gts = prepared[op]
            seq = order_frames(subsets[i], order, spec.order_seed, index=i)
            cfg = spec.tracker_config(lam, gates[op])
            _, records, _ = run_sequence([(f.frame, f.detections) for f in seq], cfg)
            report = evaluate(gts[i], TrajectorySet(records), spec.similarity, spec.match_threshold)
            row.update(report.percentages())
            row["status"] = "ok"
            if traj_dir is not None:
                recio.write_trajectories(traj_dir / op / order / f"{_lam_tag(lam)}_subset{i}.jsonl", records)
        except Exception as exc:  # recorded per cell; the grid keeps going
            log.error("cell %s failed: %s", cell, exc)
            row.update({m: None for m in METRICS})
            row["status"] = f"error: {exc}"
        return row

    n = _threads(threads)
    if n == 1:
        rows = [run_cell(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(run_cell, cells))

    table = ResultTable(rows, summarize(rows, spec.lambda_grid, spec.compare_baseline), gates,
                        spec.lambda_grid, spec.compare_baseline)
    if out_dir is not None:
        table.write(out_dir)
    return table
