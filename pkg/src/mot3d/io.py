"""JSONL record files for detections, ground truth and trajectories.

Detections, one object per line::

    {"frame": 3, "pos": [x, y, z], "pos_cov": [9 floats, row-major, optional],
     "feat": [d floats], "bbox": [u, v, w, h] (optional), "gt_id": 7 (optional)}

Ground-truth and predicted trajectories::

    {"frame": 3, "id": 7, "pos": [x, y, z], "bbox": [u, v, w, h] (optional)}

Floats are written with ``repr`` precision, so emit-then-parse is exact.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import Detection, Gaussian3, ValidationError, isotropic_cov, DEFAULT_MEAS_SIGMA
from .tracker import TrajectoryRecord

log = logging.getLogger(__name__)

DETECTION_FIELDS = {"frame", "pos", "pos_cov", "feat", "bbox", "gt_id"}
TRAJECTORY_FIELDS = {"frame", "id", "pos", "bbox"}


class FormatError(ValidationError):
    def __init__(self, msg: str, source: str = "<input>", line: Optional[int] = None):
        where = source if line is None else f"{source}:{line}"
        super().__init__(f"{where}: {msg}")
        self.source = source
        self.line = line


@dataclass
class DetectionFrame:
    frame: int
    detections: list = field(default_factory=list)
    gt_ids: list = field(default_factory=list)


def _lines(src):
    """(source name, iterator of raw lines) for a path or an iterable of strings."""
    if isinstance(src, (str, Path)):
        path = Path(src)
        return str(path), path.read_text(encoding="utf-8").splitlines()
    return "<input>", list(src)


def _records(src, allowed: set, required: set, strict: bool):
    name, lines = _lines(src)
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON ({exc.msg})", name, lineno) from None
        if not isinstance(rec, dict):
            raise FormatError("record must be a JSON object", name, lineno)
        missing = required - rec.keys()
        if missing:
            raise FormatError(f"missing field(s) {sorted(missing)}", name, lineno)
        extra = rec.keys() - allowed
        if extra:
            if strict:
                raise FormatError(f"unknown field(s) {sorted(extra)}", name, lineno)
            log.warning("%s:%d: ignoring unknown field(s) %s", name, lineno, sorted(extra))
        yield name, lineno, rec


def _vector(rec, key, n, name, lineno):
    v = rec[key]
    if not isinstance(v, list) or (n is not None and len(v) != n):
        want = "a list" if n is None else f"a list of {n} numbers"
        raise FormatError(f"field {key!r} must be {want}", name, lineno)
    try:
        arr = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise FormatError(f"field {key!r} must contain numbers", name, lineno) from None
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"field {key!r} has non-finite values", name, lineno)
    return arr


def _int(rec, key, name, lineno, minimum=None):
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(f"field {key!r} must be an integer", name, lineno)
    if minimum is not None and v < minimum:
        raise FormatError(f"field {key!r} must be >= {minimum}", name, lineno)
    return v


def read_detections(src, meas_cov_default=None, strict: bool = True) -> list:
    """Parse a detections file into DetectionFrames sorted by frame index."""
    cov_default = isotropic_cov(DEFAULT_MEAS_SIGMA) if meas_cov_default is None else np.asarray(meas_cov_default)
    frames: dict = {}
    dim = None
    for name, lineno, rec in _records(src, DETECTION_FIELDS, {"frame", "pos", "feat"}, strict):
        frame = _int(rec, "frame", name, lineno, minimum=0)
        pos = _vector(rec, "pos", 3, name, lineno)
        cov = _vector(rec, "pos_cov", 9, name, lineno).reshape(3, 3) if "pos_cov" in rec else cov_default
        feat = _vector(rec, "feat", None, name, lineno)
        if dim is None:
            dim = len(feat)
        elif len(feat) != dim:
            raise FormatError(f"feature length {len(feat)} differs from earlier records ({dim})", name, lineno)
        bbox = _vector(rec, "bbox", 4, name, lineno) if rec.get("bbox") is not None else None
        gt_id = _int(rec, "gt_id", name, lineno) if rec.get("gt_id") is not None else None
        try:
            det = Detection(Gaussian3(pos, cov), feat, frame, bbox)
        except ValidationError as exc:
            raise FormatError(str(exc), name, lineno) from None
        fr = frames.setdefault(frame, DetectionFrame(frame))
        fr.detections.append(det)
        fr.gt_ids.append(gt_id)
    return [frames[k] for k in sorted(frames)]


def _fmt(v):
    return [float(x) for x in np.asarray(v, dtype=float).ravel()]


def detection_to_dict(det: Detection, gt_id: Optional[int] = None, with_cov: bool = True) -> dict:
    rec = {"frame": det.frame, "pos": _fmt(det.position.mean)}
    if with_cov:
        rec["pos_cov"] = _fmt(det.position.cov)
    rec["feat"] = _fmt(det.feature)
    if det.bbox is not None:
        rec["bbox"] = _fmt(det.bbox)
    if gt_id is not None:
        rec["gt_id"] = int(gt_id)
    return rec


def write_detections(path, frames: Iterable, with_cov: bool = True) -> None:
    """Write DetectionFrame-like objects (``frame``, ``detections``, optional ``gt_ids``)."""
    lines = []
    for fr in frames:
        gt_ids = getattr(fr, "gt_ids", None) or getattr(fr, "det_gt_ids", None) or [None] * len(fr.detections)
        for det, g in zip(fr.detections, gt_ids):
            lines.append(json.dumps(detection_to_dict(det, g, with_cov)))
    _write_lines(path, lines)


def read_trajectories(src, strict: bool = True) -> list:
    out = []
    seen = set()
    for name, lineno, rec in _records(src, TRAJECTORY_FIELDS, {"frame", "id", "pos"}, strict):
        frame = _int(rec, "frame", name, lineno, minimum=0)
        tid = _int(rec, "id", name, lineno)
        if (frame, tid) in seen:
            raise FormatError(f"duplicate record for frame {frame}, id {tid}", name, lineno)
        seen.add((frame, tid))
        pos = tuple(_vector(rec, "pos", 3, name, lineno).tolist())
        bbox = tuple(_vector(rec, "bbox", 4, name, lineno).tolist()) if rec.get("bbox") is not None else None
        out.append(TrajectoryRecord(frame, tid, pos, bbox))
    return out


def trajectory_to_dict(rec) -> dict:
    d = {"frame": int(rec.frame), "id": int(rec.id), "pos": _fmt(rec.pos)}
    if getattr(rec, "bbox", None) is not None:
        d["bbox"] = _fmt(rec.bbox)
    return d


def write_trajectories(path, records: Iterable) -> None:
    _write_lines(path, [json.dumps(trajectory_to_dict(r)) for r in records])


def _write_lines(path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def gt_records(frames) -> list:
    """Ground-truth trajectory records from simulator frames."""
    return [TrajectoryRecord(f.frame, gid, tuple(float(x) for x in c)) for f in frames for gid, c in f.gt]


def load_json_config(path, expected_schema: int) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", str(path), exc.lineno) from None
    if not isinstance(cfg, dict):
        raise FormatError("config must be a JSON object", str(path))
    version = cfg.get("schema_version")
    if version != expected_schema:
        raise FormatError(f"unsupported schema_version {version!r} (expected {expected_schema})", str(path))
    return cfg


def finite_or_none(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x
