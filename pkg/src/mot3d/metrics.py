"""HOTA and CLEAR-MOTA evaluation plus the paired t-test used for significance stars."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .core import ValidationError

EPS = np.finfo(float).eps
DEFAULT_ALPHAS = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass(frozen=True)
class SimilarityConfig:
    kind: str = "distance3d"
    d_max: float = 0.05
    alpha_grid: tuple = DEFAULT_ALPHAS

    def __post_init__(self):
        if self.kind not in ("distance3d", "iou2d"):
            raise ValidationError(f"unknown similarity kind {self.kind!r}")
        if not self.d_max > 0:
            raise ValidationError("d_max must be positive")
        alphas = tuple(float(a) for a in self.alpha_grid)
        if not alphas or any(not 0 < a < 1 for a in alphas) or list(alphas) != sorted(alphas):
            raise ValidationError("alpha_grid must be ascending values in (0, 1)")
        object.__setattr__(self, "alpha_grid", alphas)


@dataclass
class MetricReport:
    hota: float = 0.0
    det_re: float = 0.0
    det_pr: float = 0.0
    det_a: float = 0.0
    ass_a: float = 0.0
    mota: float = 0.0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    per_alpha: Optional[dict] = field(default=None, repr=False)

    def as_dict(self, per_alpha: bool = False) -> dict:
        d = asdict(self)
        if not per_alpha:
            d.pop("per_alpha")
        return d

    def percentages(self) -> dict:
        out = {}
        for k in ("hota", "det_re", "det_pr", "det_a", "ass_a", "mota"):
            out[k] = round(100.0 * getattr(self, k), 2)
        for k in ("fp", "fn", "idsw"):
            out[k] = getattr(self, k)
        return out


class TrajectorySet:
    """Trajectory records grouped by frame.

    Accepts any iterable of objects with ``frame``, ``id``, ``pos`` and an
    optional ``bbox`` attribute, or of mappings with those keys.
    """

    def __init__(self, records: Iterable = ()):
        self.frames: dict = {}
        seen = set()
        for r in records:
            if isinstance(r, dict):
                frame, tid, pos, bbox = r["frame"], r["id"], r["pos"], r.get("bbox")
            else:
                frame, tid, pos, bbox = r.frame, r.id, r.pos, getattr(r, "bbox", None)
            key = (int(frame), int(tid))
            if key in seen:
                raise ValidationError(f"duplicate record for frame {key[0]}, id {key[1]}")
            seen.add(key)
            self.frames.setdefault(key[0], []).append(
                (key[1], np.asarray(pos, dtype=float), None if bbox is None else np.asarray(bbox, dtype=float))
            )
        self.n_records = len(seen)

    def __len__(self):
        return self.n_records

    def frame_ids(self):
        return sorted(self.frames)

    def ids(self):
        return sorted({tid for recs in self.frames.values() for tid, _, _ in recs})

    def arrays(self, frame):
        recs = self.frames.get(frame, [])
        ids = np.array([r[0] for r in recs], dtype=int)
        pos = np.array([r[1] for r in recs], dtype=float).reshape(-1, 3)
        boxes = [r[2] for r in recs]
        return ids, pos, boxes


def similarity(gt_record, pred_record, config: SimilarityConfig) -> float:
    """Similarity of one GT and one predicted record, in [0, 1]."""
    def get(r, k):
        return r[k] if isinstance(r, dict) else getattr(r, k, None)

    if get(gt_record, "frame") != get(pred_record, "frame"):
        raise ValidationError("similarity between records of different frames")
    if config.kind == "distance3d":
        d = np.linalg.norm(np.asarray(get(gt_record, "pos"), float) - np.asarray(get(pred_record, "pos"), float))
        return float(max(0.0, 1.0 - d / config.d_max))
    a, b = get(gt_record, "bbox"), get(pred_record, "bbox")
    if a is None or b is None:
        raise ValidationError("iou2d similarity needs boxes on both records")
    return float(box_iou(np.asarray(a, float)[None], np.asarray(b, float)[None])[0, 0])


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between (u, v, w, h) boxes; a is (n, 4), b is (m, 4)."""
    ax0, ay0 = a[:, 0:1], a[:, 1:2]
    ax1, ay1 = ax0 + a[:, 2:3], ay0 + a[:, 3:4]
    bx0, by0 = b[None, :, 0], b[None, :, 1]
    bx1, by1 = bx0 + b[None, :, 2], by0 + b[None, :, 3]
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[:, 2:3] * a[:, 3:4] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def similarity_matrix(gt_pos, gt_boxes, pr_pos, pr_boxes, config: SimilarityConfig) -> np.ndarray:
    if config.kind == "distance3d":
        if len(gt_pos) == 0 or len(pr_pos) == 0:
            return np.zeros((len(gt_pos), len(pr_pos)))
        d = np.linalg.norm(gt_pos[:, None, :] - pr_pos[None, :, :], axis=2)
        return np.maximum(0.0, 1.0 - d / config.d_max)
    if any(b is None for b in gt_boxes) or any(b is None for b in pr_boxes):
        raise ValidationError("iou2d similarity needs boxes on every record")
    if len(gt_boxes) == 0 or len(pr_boxes) == 0:
        return np.zeros((len(gt_boxes), len(pr_boxes)))
    return box_iou(np.stack(gt_boxes), np.stack(pr_boxes))


def _frames(gt: TrajectorySet, pred: TrajectorySet, config: SimilarityConfig):
    """Yield (gt_ids, pred_ids, similarity) per frame, frames in index order."""
    for f in sorted(set(gt.frames) | set(pred.frames)):
        g_ids, g_pos, g_box = gt.arrays(f)
        p_ids, p_pos, p_box = pred.arrays(f)
        yield g_ids, p_ids, similarity_matrix(g_pos, g_box, p_pos, p_box, config)


def mota(gt: TrajectorySet, pred: TrajectorySet, config: SimilarityConfig = SimilarityConfig(),
         match_threshold: float = 0.5) -> MetricReport:
    """CLEAR MOTA with correspondence carry-over between consecutive frames."""
    if len(gt) == 0:
        raise ValidationError("MOTA is undefined for an empty ground truth")
    tp = fp = fn = idsw = 0
    prev_tracker = {}   # gt id -> most recent matched pred id
    prev_step = {}      # gt id -> pred id matched in the previous frame only
    for g_ids, p_ids, sim in _frames(gt, pred, config):
        if len(g_ids) == 0 or len(p_ids) == 0:
            fn += len(g_ids)
            fp += len(p_ids)
            prev_step = {}
            continue
        carried = np.array([[prev_step.get(g) == p for p in p_ids] for g in g_ids], dtype=float)
        score = 1000.0 * carried + sim
        score[sim < match_threshold - EPS] = 0.0
        rows, cols = linear_sum_assignment(-score)
        keep = score[rows, cols] > EPS
        rows, cols = rows[keep], cols[keep]
        step_map = {}
        for r, c in zip(rows, cols):
            g, p = int(g_ids[r]), int(p_ids[c])
            if g in prev_tracker and prev_tracker[g] != p:
                idsw += 1
            prev_tracker[g] = p
            step_map[g] = p
        prev_step = step_map
        n = len(rows)
        tp += n
        fn += len(g_ids) - n
        fp += len(p_ids) - n
    score = 1.0 - (fp + fn + idsw) / len(gt)
    return MetricReport(mota=score, fp=fp, fn=fn, idsw=idsw)


def hota(gt: TrajectorySet, pred: TrajectorySet, config: SimilarityConfig = SimilarityConfig()) -> MetricReport:
    """HOTA and its detection/association sub-metrics, averaged over the alpha grid."""
    if len(gt) == 0:
        raise ValidationError("HOTA is undefined for an empty ground truth")
    alphas = np.asarray(config.alpha_grid)
    g_index = {g: k for k, g in enumerate(gt.ids())}
    p_index = {p: k for k, p in enumerate(pred.ids())}
    frames = []
    for g_ids, p_ids, sim in _frames(gt, pred, config):
        frames.append((np.array([g_index[g] for g in g_ids], dtype=int),
                       np.array([p_index[p] for p in p_ids], dtype=int), sim))

    ng, npr = len(g_index), len(p_index)
    potential = np.zeros((ng, npr))
    g_count = np.zeros((ng, 1))
    p_count = np.zeros((1, npr))
    for gi, pi, sim in frames:
        g_count[gi, 0] += 1
        p_count[0, pi] += 1
        if sim.size == 0:
            continue
        denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
        sim_iou = np.zeros_like(sim)
        mask = denom > EPS
        sim_iou[mask] = sim[mask] / denom[mask]
        potential[np.ix_(gi, pi)] += sim_iou
    global_score = potential / np.maximum(g_count + p_count - potential, EPS)

    n_a = len(alphas)
    tp = np.zeros(n_a)
    fn = np.zeros(n_a)
    fp = np.zeros(n_a)
    matches = np.zeros((n_a, ng, npr))
    for gi, pi, sim in frames:
        if len(gi) == 0 or len(pi) == 0:
            fn += len(gi)
            fp += len(pi)
            continue
        score = global_score[np.ix_(gi, pi)] * sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(alphas):
            ok = sim[rows, cols] >= alpha - EPS
            r, c = rows[ok], cols[ok]
            n = len(r)
            tp[a] += n
            fn[a] += len(gi) - n
            fp[a] += len(pi) - n
            if n:
                matches[a, gi[r], pi[c]] += 1

    det_re = tp / np.maximum(1.0, tp + fn)
    det_pr = tp / np.maximum(1.0, tp + fp)
    det_a = tp / np.maximum(1.0, tp + fn + fp)
    ass_a = np.zeros(n_a)
    for a in range(n_a):
        m = matches[a]
        ass = m / np.maximum(1.0, g_count + p_count - m)
        ass_a[a] = float((m * ass).sum()) / max(1.0, tp[a])
    hota_a = np.sqrt(det_a * ass_a)
    per_alpha = {
        "alpha": alphas.tolist(), "hota": hota_a.tolist(), "det_a": det_a.tolist(), "ass_a": ass_a.tolist(),
        "det_re": det_re.tolist(), "det_pr": det_pr.tolist(),
    }
    return MetricReport(
        hota=float(hota_a.mean()), det_re=float(det_re.mean()), det_pr=float(det_pr.mean()),
        det_a=float(det_a.mean()), ass_a=float(ass_a.mean()), per_alpha=per_alpha,
    )


def evaluate(gt: TrajectorySet, pred: TrajectorySet, config: SimilarityConfig = SimilarityConfig(),
             match_threshold: float = 0.5) -> MetricReport:
    """HOTA family and CLEAR counts in one report."""
    h = hota(gt, pred, config)
    c = mota(gt, pred, config, match_threshold)
    h.mota, h.fp, h.fn, h.idsw = c.mota, c.fp, c.fn, c.idsw
    return h


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_t_test(scores_a, scores_b) -> TTestResult:
    """Two-sided paired t-test on matched samples.

    Zero-variance differences are flagged as degenerate: p = 0 when the
    mean difference is nonzero, p = 1 otherwise.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired samples must be equal-length 1-D sequences")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0 or sd <= 1e-15 * max(1.0, abs(mean)):
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, degenerate=True)
        return TTestResult(t=math.copysign(math.inf, mean), p=0.0, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), df=n - 1)
    return TTestResult(t=float(t), p=float(min(1.0, p)))


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
