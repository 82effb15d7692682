"""Command-line entry point: simulate, track, eval, calibrate-gate, experiment."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import io as recio
from .association import QUANTILE, calibrate_feature_gate
from .core import ValidationError
from .experiment import ORDERS, load_spec, run_experiment
from .metrics import SimilarityConfig, TrajectorySet, evaluate
from .simgen import order_frames, simulate
from .tracker import run_sequence

log = logging.getLogger("mot3d")

EXIT_DATA_ERROR = 1


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", type=Path, help="JSON config (schema_version 1); defaults to the shipped config")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--strict", action="store_true", help="reject unknown record fields instead of warning")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mot3d", description="3D feature-augmented multi-object tracking")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic scene to detections and ground truth")
    _add_common(p)
    p.add_argument("--seed", type=int, help="scene seed (overrides the config)")
    p.add_argument("--operating-point", default="mid", help="detector preset name (default: mid)")
    p.add_argument("--no-cov", action="store_true", help="omit per-detection covariances")

    p = sub.add_parser("track", help="track a detections file")
    _add_common(p)
    p.add_argument("detections", type=Path)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="feature weight in [0, 1]")
    p.add_argument("--pos-gate", type=float)
    p.add_argument("--feat-gate", type=float)
    p.add_argument("--order", choices=ORDERS, default="sequential")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed for --order random")
    p.add_argument("--no-features", action="store_true", help="feature-free baseline path")

    p = sub.add_parser("eval", help="score predicted trajectories against ground truth")
    _add_common(p)
    p.add_argument("gt", type=Path)
    p.add_argument("pred", type=Path)
    p.add_argument("--d-max", type=float, help="distance at which 3D similarity reaches 0 (m)")

    p = sub.add_parser("calibrate-gate", help="feature gate from a detections file with gt_id labels")
    _add_common(p, config=False)
    p.add_argument("detections", type=Path)
    p.add_argument("--quantile", type=float, default=QUANTILE)

    p = sub.add_parser("experiment", help="run the (operating point, order, lambda, subset) grid")
    _add_common(p)
    p.add_argument("--seed", type=int, help="overrides scene, subset and order seeds")
    p.add_argument("--lambda", dest="lam", type=float, action="append", help="lambda grid value (repeatable)")
    p.add_argument("--order", choices=ORDERS, action="append", help="ordering (repeatable)")
    p.add_argument("--operating-point", action="append", help="preset name (repeatable)")
    p.add_argument("--pos-gate", type=float)
    p.add_argument("--feat-gate", type=float)
    p.add_argument("--threads", type=int, help="cell parallelism (default: MOT3D_THREADS or CPU count)")
    p.add_argument("--no-trajectories", action="store_true", help="skip per-run trajectory files")
    return parser


def _out_dir(args) -> Path:
    out = args.out if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    spec = load_spec(args.config)
    if args.operating_point not in spec.presets:
        raise ValidationError(f"unknown operating point {args.operating_point!r}; known: {sorted(spec.presets)}")
    scene = spec.scene_for(args.operating_point)
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    frames = simulate(scene)
    out = _out_dir(args)
    recio.write_detections(out / "detections.jsonl", frames, with_cov=not args.no_cov)
    recio.write_trajectories(out / "gt.jsonl", recio.gt_records(frames))
    print(f"wrote {sum(len(f.detections) for f in frames)} detections over {len(frames)} frames to {out}")
    return 0


def cmd_track(args) -> int:
    spec = load_spec(args.config)
    if args.pos_gate is not None:
        spec = replace(spec, pos_gate=args.pos_gate)
    feat_gate = args.feat_gate if args.feat_gate is not None else spec.feat_gate
    if feat_gate is None:
        if args.lam > 0 and not args.no_features:
            log.warning("no feature gate given; feature gating disabled (run calibrate-gate to obtain one)")
        feat_gate = 2.0
    cfg = replace(spec.tracker_config(args.lam, feat_gate), use_features=not args.no_features)
    frames = recio.read_detections(args.detections, cfg.meas_cov_default, strict=args.strict)
    frames = order_frames(frames, args.order, args.seed)
    _, records, _ = run_sequence([(f.frame, f.detections) for f in frames], cfg)
    out = _out_dir(args)
    recio.write_trajectories(out / "trajectories.jsonl", records)
    ids = {r.id for r in records}
    print(f"wrote {len(records)} records, {len(ids)} tracks to {out / 'trajectories.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    spec = load_spec(args.config)
    sim = spec.similarity
    if args.d_max is not None:
        sim = SimilarityConfig(kind=sim.kind, d_max=args.d_max, alpha_grid=sim.alpha_grid)
    gt = TrajectorySet(recio.read_trajectories(args.gt, strict=args.strict))
    pred = TrajectorySet(recio.read_trajectories(args.pred, strict=args.strict))
    report = evaluate(gt, pred, sim, spec.match_threshold).percentages()
    print(json.dumps(report, sort_keys=True))
    if args.out is not None:
        out = _out_dir(args)
        (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(report))
            w.writerow([f"{v:.2f}" if isinstance(v, float) else v for v in report.values()])
    return 0


def cmd_calibrate_gate(args) -> int:
    frames = recio.read_detections(args.detections, strict=args.strict)
    labeled = [(g, d.feature) for f in frames for d, g in zip(f.detections, f.gt_ids) if g is not None]
    gate = calibrate_feature_gate(labeled, args.quantile)
    print(f"{gate:.6f}")
    if args.out is not None:
        out = _out_dir(args)
        doc = {"feat_gate": gate, "quantile": args.quantile, "n_occurrences": len(labeled)}
        (out / "gate.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return 0


def cmd_experiment(args) -> int:
    overrides = {}
    if args.lam:
        overrides["lambda_grid"] = tuple(args.lam)
    if args.order:
        overrides["orders"] = tuple(args.order)
    if args.operating_point:
        overrides["operating_points"] = tuple(args.operating_point)
    if args.pos_gate is not None:
        overrides["pos_gate"] = args.pos_gate
    if args.feat_gate is not None:
        overrides["feat_gate"] = args.feat_gate
    if args.seed is not None:
        overrides["subset_seed"] = overrides["order_seed"] = args.seed
    spec = load_spec(args.config, **overrides)
    if args.seed is not None:
        spec = replace(spec, scene=replace(spec.scene, seed=args.seed))
    out = _out_dir(args)
    table = run_experiment(spec, out, threads=args.threads, write_trajectories=not args.no_trajectories)
    for row in table.summary:
        stars = row.get("hota_stars", "")
        print(f"{row['operating_point']:>5} {row['order']:<10} lambda={row['lambda']:.2f} "
              f"HOTA={_pct(row['hota'])}{stars} AssA={_pct(row['ass_a'])} IDSW={_pct(row['idsw'])}")
    if table.failures:
        print(f"{len(table.failures)} cell(s) failed; see results.csv", file=sys.stderr)
        return EXIT_DATA_ERROR
    return 0


def _pct(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "eval": cmd_eval,
    "calibrate-gate": cmd_calibrate_gate,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, OSError) as exc:
        print(f"mot3d {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
