"""Synthetic greenhouse scenes: plant geometry, camera path, detections and embeddings.

Randomness comes from numpy's PCG64 generator. Every stream is seeded with
``SeedSequence([seed, stream_tag, *indices])`` (see ``stream``), so a frame's
detections depend only on the scene seed and the frame index, never on the
order in which frames are rendered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import DEFAULT_FEAT_DIM, DEFAULT_MEAS_SIGMA, Detection, Gaussian3, ValidationError, isotropic_cov

# stream tags for SeedSequence entropy
STREAM_SCENE = 0
STREAM_EMBEDDING = 1
STREAM_POSE = 2
STREAM_FRAME = 3
STREAM_ORDER = 4
STREAM_SUBSET = 5
STREAM_VIEW_FEAT = 6

N_LIMB_RAYS = 6
AZIMUTH_POSE_SHARE = 0.1
PACKING_RETRIES = 2000
EMBEDDING_RETRIES = 10000

FOCAL_PX = 600.0
IMAGE_SIZE = (640, 480)


def stream(seed: int, tag: int, *indices: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, tag, indices)."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(tag)] + [int(i) for i in indices]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class PathSpec:
    n_heights: int = 10
    n_azimuths: int = 10
    radius: float = 0.6
    azimuth_span: float = math.pi
    height_range: tuple = (0.3, 1.5)
    # boustrophedon sweep: each height row reverses the azimuth direction of the previous one
    serpentine: bool = True
    fov_half_angle: float = 0.6

    def __post_init__(self):
        if self.n_heights < 1 or self.n_azimuths < 1:
            raise ValidationError("path needs at least one height and one azimuth")
        if self.radius <= 0 or self.fov_half_angle <= 0:
            raise ValidationError("path radius and field of view must be positive")
        lo, hi = self.height_range
        if hi < lo:
            raise ValidationError("height_range must be (min, max)")
        object.__setattr__(self, "height_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class NoiseSpec:
    """Detector and embedding noise model.

    These parameters stand in for an unknown real detector; they are not
    measured values.
    """

    sigma_pos_lateral: float = 0.003
    sigma_pos_ray: float = 0.008
    # systematic center shift toward the camera (partial-cloud sphere fits)
    ray_bias: float = 0.0
    # amplitude of a smooth, viewpoint-dependent offset shared by a frame (arm pose error)
    pose_error: float = 0.0
    detect_prob_visible: float = 1.0
    clutter_rate: float = 0.0
    # share of false detections placed next to a visible tomato (leaf/calyx false positives)
    clutter_near_fraction: float = 0.0
    clutter_near_sigma: float = 0.02
    feat_dim: int = DEFAULT_FEAT_DIM
    sigma_feat: float = 0.0
    sigma_feat_view: float = 0.0
    min_center_angle: float = math.pi / 4
    meas_sigma: float = DEFAULT_MEAS_SIGMA
    with_bbox: bool = False

    def __post_init__(self):
        if not 0.0 <= self.detect_prob_visible <= 1.0:
            raise ValidationError("detect_prob_visible must lie in [0, 1]")
        for name in ("sigma_pos_lateral", "sigma_pos_ray", "ray_bias", "pose_error", "clutter_rate",
                     "clutter_near_sigma", "sigma_feat", "sigma_feat_view", "min_center_angle"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not 0.0 <= self.clutter_near_fraction <= 1.0:
            raise ValidationError("clutter_near_fraction must lie in [0, 1]")
        if self.feat_dim < 2:
            raise ValidationError("feat_dim must be at least 2")
        if self.meas_sigma <= 0:
            raise ValidationError("meas_sigma must be positive")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_trusses: int = 7
    tomatoes_per_truss: tuple = (5, 9)
    stem_height: float = 1.6
    truss_radius: float = 0.12
    tomato_radius: float = 0.03
    n_leaves: int = 30
    leaf_radius: float = 0.08
    leaf_density_gradient: float = 1.5
    path: PathSpec = field(default_factory=PathSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        lo, hi = self.tomatoes_per_truss
        if self.n_trusses < 0 or self.n_leaves < 0 or lo < 1 or hi < lo:
            raise ValidationError("invalid truss/leaf counts")
        for name in ("stem_height", "truss_radius", "tomato_radius", "leaf_radius"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        object.__setattr__(self, "tomatoes_per_truss", (int(lo), int(hi)))


@dataclass(frozen=True)
class OperatingPoint:
    """Detector regime with the (DetRe, DetPr) pair it is tuned toward, in percent."""

    name: str
    target_det_re: float
    target_det_pr: float
    detect_prob_visible: float
    clutter_rate: float

    def apply(self, noise: NoiseSpec) -> NoiseSpec:
        return replace(noise, detect_prob_visible=self.detect_prob_visible, clutter_rate=self.clutter_rate)


@dataclass(frozen=True)
class Scene:
    ids: np.ndarray        # (n,) int
    centers: np.ndarray    # (n, 3)
    radius: float
    leaf_centers: np.ndarray  # (k, 3)
    leaf_normals: np.ndarray  # (k, 3)
    leaf_radius: float

    @property
    def objects(self):
        return [(int(i), c, self.radius) for i, c in zip(self.ids, self.centers)]

    @property
    def occluders(self):
        return [(c, n, self.leaf_radius) for c, n in zip(self.leaf_centers, self.leaf_normals)]

    def without_leaf(self, k: int) -> "Scene":
        keep = np.arange(len(self.leaf_centers)) != k
        return replace(self, leaf_centers=self.leaf_centers[keep], leaf_normals=self.leaf_normals[keep])


@dataclass(frozen=True)
class Viewpoint:
    index: int
    position: np.ndarray
    look_at: np.ndarray
    azimuth: float
    height: float


@dataclass
class RenderedFrame:
    frame: int
    detections: list
    det_gt_ids: list       # gt id per detection, None for clutter
    gt: list               # (id, center) of every visible tomato, in frame coordinates
    viewpoint: Optional[Viewpoint] = None


def generate_scene(spec: SceneSpec) -> Scene:
    """Tomato spheres grouped in trusses along a vertical stem, plus leaf discs."""
    rng = stream(spec.seed, STREAM_SCENE)
    r = spec.tomato_radius
    min_sep = 1.5 * r
    centers = []
    if spec.n_trusses:
        lo = 0.15 * spec.stem_height
        hi = 0.92 * spec.stem_height
        truss_heights = np.linspace(lo, hi, spec.n_trusses)
        truss_heights += rng.uniform(-0.02, 0.02, spec.n_trusses) * spec.stem_height
    for t in range(spec.n_trusses):
        count = int(rng.integers(spec.tomatoes_per_truss[0], spec.tomatoes_per_truss[1] + 1))
        az = math.pi / 2 + rng.uniform(-1.0, 1.0)
        hub = np.array([spec.truss_radius * math.cos(az), spec.truss_radius * math.sin(az), truss_heights[t]])
        spread = max(2.2 * r, r * 1.2 * math.sqrt(count))
        placed = 0
        tries = 0
        while placed < count:
            tries += 1
            if tries > PACKING_RETRIES * count:
                raise ValidationError(
                    f"could not pack {count} tomatoes in truss {t}; try fewer tomatoes per truss"
                )
            off = rng.normal(size=3) * np.array([spread, spread, 0.6 * spread])
            c = hub + off
            if centers and np.min(np.linalg.norm(np.asarray(centers) - c, axis=1)) < min_sep:
                continue
            centers.append(c)
            placed += 1

    n_leaves = spec.n_leaves
    u = rng.uniform(size=n_leaves)
    g = spec.leaf_density_gradient
    # inverse CDF of a density proportional to exp(g * h / H) on [0, H]
    if abs(g) < 1e-12:
        hn = u
    else:
        hn = np.log1p(u * np.expm1(g)) / g
    heights = hn * spec.stem_height
    leaf_az = rng.uniform(0, 2 * math.pi, n_leaves)
    leaf_rad = rng.uniform(0.05, 0.3, n_leaves)
    leaf_centers = np.stack([leaf_rad * np.cos(leaf_az), leaf_rad * np.sin(leaf_az), heights], axis=1)
    tilt = rng.uniform(0, math.radians(60), n_leaves)
    phi = rng.uniform(0, 2 * math.pi, n_leaves)
    normals = np.stack([np.sin(tilt) * np.cos(phi), np.sin(tilt) * np.sin(phi), np.cos(tilt)], axis=1)

    return Scene(
        ids=np.arange(len(centers), dtype=int),
        centers=np.asarray(centers, dtype=float).reshape(-1, 3),
        radius=r,
        leaf_centers=leaf_centers.reshape(-1, 3),
        leaf_normals=normals.reshape(-1, 3),
        leaf_radius=spec.leaf_radius,
    )


def camera_path(path: PathSpec) -> list:
    """Viewpoints on a semi-cylinder around the stem, each aimed at the stem axis.

    Azimuths include both endpoints of the span. Rows are visited bottom to
    top; with ``serpentine`` every other row runs backwards.
    """
    heights = np.linspace(path.height_range[0], path.height_range[1], path.n_heights)
    if path.n_azimuths == 1:
        azimuths = np.array([path.azimuth_span / 2])
    else:
        azimuths = np.linspace(0.0, path.azimuth_span, path.n_azimuths)
    views = []
    for i, h in enumerate(heights):
        row = azimuths[::-1] if (path.serpentine and i % 2 == 1) else azimuths
        for th in row:
            pos = np.array([path.radius * math.cos(th), path.radius * math.sin(th), h])
            views.append(Viewpoint(len(views), pos, np.array([0.0, 0.0, h]), float(th), float(h)))
    return views


def embedding_centers(n_ids: int, feat_dim: int, min_center_angle: float, seed: int) -> np.ndarray:
    """Unit vectors with pairwise angles of at least ``min_center_angle``."""
    rng = stream(seed, STREAM_EMBEDDING)
    if n_ids == 0:
        return np.zeros((0, feat_dim))
    if n_ids == 2 and min_center_angle >= math.pi - 1e-12:
        v = rng.normal(size=feat_dim)
        v /= np.linalg.norm(v)
        return np.stack([v, -v])
    if min_center_angle > math.pi:
        raise ValidationError("min_center_angle cannot exceed pi")
    max_cos = math.cos(min_center_angle)
    out = np.zeros((n_ids, feat_dim))
    k = 0
    tries = 0
    while k < n_ids:
        tries += 1
        if tries > EMBEDDING_RETRIES * n_ids:
            raise ValidationError(
                f"cannot place {n_ids} embedding centers {min_center_angle:.3f} rad apart in {feat_dim} dimensions"
            )
        v = rng.normal(size=feat_dim)
        v /= np.linalg.norm(v)
        if k and np.max(out[:k] @ v) > max_cos + 1e-12:
            continue
        out[k] = v
        k += 1
    return out


def _segment_hits_spheres(p0, p1, centers, radius):
    """Boolean per sphere: does the open segment p0->p1 pass through it?"""
    if len(centers) == 0:
        return np.zeros(0, dtype=bool)
    d = p1 - p0
    dd = d @ d
    t = np.clip(((centers - p0) @ d) / dd, 0.0, 1.0)
    closest = p0 + t[:, None] * d
    dist2 = np.sum((centers - closest) ** 2, axis=1)
    return (dist2 < radius * radius) & (t > 0.0) & (t < 1.0)


def _segment_hits_discs(p0, p1, centers, normals, radius):
    if len(centers) == 0:
        return np.zeros(0, dtype=bool)
    d = p1 - p0
    denom = normals @ d
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("ij,ij->i", centers - p0, normals) / denom
    ok = np.abs(denom) > 1e-12
    t = np.where(ok, t, -1.0)
    inside = (t > 1e-9) & (t < 1.0 - 1e-9)
    hit = p0 + t[:, None] * d
    dist2 = np.sum((hit - centers) ** 2, axis=1)
    return inside & (dist2 <= radius * radius)


def _ray_clear(cam, target, scene: Scene, skip: int) -> bool:
    others = np.ones(len(scene.centers), dtype=bool)
    others[skip] = False
    if np.any(_segment_hits_spheres(cam, target, scene.centers[others], scene.radius)):
        return False
    return not np.any(_segment_hits_discs(cam, target, scene.leaf_centers, scene.leaf_normals, scene.leaf_radius))


def _orthobasis(u):
    a = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def in_view(view: Viewpoint, point, fov_half_angle: float) -> bool:
    fwd = view.look_at - view.position
    fwd /= np.linalg.norm(fwd)
    ray = point - view.position
    n = np.linalg.norm(ray)
    return n > 0 and (ray @ fwd) / n >= math.cos(fov_half_angle)


def visibility(scene: Scene, view: Viewpoint, fov_half_angle: float) -> np.ndarray:
    """Per-tomato visible fraction in [0, 1].

    Zero when the center is outside the field of view or its center ray is
    blocked; otherwise the fraction of clear limb rays.
    """
    cam = view.position
    out = np.zeros(len(scene.centers))
    for k, c in enumerate(scene.centers):
        if not in_view(view, c, fov_half_angle):
            continue
        if not _ray_clear(cam, c, scene, k):
            continue
        u = (cam - c) / np.linalg.norm(cam - c)
        e1, e2 = _orthobasis(u)
        clear = 0
        for m in range(N_LIMB_RAYS):
            ang = 2 * math.pi * m / N_LIMB_RAYS
            limb = c + scene.radius * (math.cos(ang) * e1 + math.sin(ang) * e2)
            clear += _ray_clear(cam, limb, scene, k)
        out[k] = clear / N_LIMB_RAYS
    return out


def pose_offsets(views, pose_error: float, seed: int) -> np.ndarray:
    """Per-viewpoint translation error, one 3-vector per view.

    The error drifts linearly with camera height, reaching ``pose_error``
    in magnitude at both ends of the height range, plus a smaller term that
    varies smoothly with azimuth. Neighbouring viewpoints therefore share
    nearly the same error while distant ones do not.
    """
    out = np.zeros((len(views), 3))
    if pose_error == 0 or not views:
        return out
    rng = stream(seed, STREAM_POSE)
    drift = rng.normal(size=3)
    drift *= pose_error / np.linalg.norm(drift)
    coef = rng.normal(size=(3, 2)) * AZIMUTH_POSE_SHARE * pose_error / math.sqrt(3.0)
    hs = np.array([v.height for v in views])
    lo, span = hs.min(), max(hs.max() - hs.min(), 1e-9)
    for k, v in enumerate(views):
        hn = 2.0 * (v.height - lo) / span - 1.0
        out[k] = hn * drift + coef @ np.array([math.cos(v.azimuth), math.sin(v.azimuth)])
    return out


def _project_bbox(view: Viewpoint, center, radius):
    fwd = view.look_at - view.position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    rel = center - view.position
    depth = max(rel @ fwd, 1e-3)
    u = IMAGE_SIZE[0] / 2 + FOCAL_PX * (rel @ right) / depth
    v = IMAGE_SIZE[1] / 2 - FOCAL_PX * (rel @ up) / depth
    half = FOCAL_PX * radius / depth
    return np.array([u - half, v - half, 2 * half, 2 * half])


def _clutter_point(rng, view: Viewpoint, spec: SceneSpec, fov_half_angle: float):
    for _ in range(200):
        rr = 0.35 * math.sqrt(rng.uniform())
        az = rng.uniform(0, 2 * math.pi)
        p = np.array([rr * math.cos(az), rr * math.sin(az), rng.uniform(0, spec.stem_height)])
        if in_view(view, p, fov_half_angle):
            return p
    return view.look_at.copy()


def render_frame(scene: Scene, view: Viewpoint, spec: SceneSpec, centers_emb: np.ndarray,
                 frame: Optional[int] = None, offset=None, view_dirs=None) -> RenderedFrame:
    """Emit the detections one viewpoint produces.

    The frame's random stream is derived from ``(spec.seed, frame)``.
    """
    noise = spec.noise
    fov = spec.path.fov_half_angle
    frame = view.index if frame is None else frame
    rng = stream(spec.seed, STREAM_FRAME, frame)
    vis = visibility(scene, view, fov)
    cov = isotropic_cov(noise.meas_sigma)
    offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=float)
    cam = view.position

    detections, det_ids, gt = [], [], []
    for k in range(len(scene.centers)):
        # draws are made for every tomato so streams stay aligned across noise settings
        u_det = rng.uniform()
        z = rng.normal(size=3)
        fz = rng.normal(size=noise.feat_dim + 1)
        if vis[k] <= 0.0:
            continue
        c = scene.centers[k]
        # labels live in the frame's own (registered) coordinates, like image annotations
        gt.append((int(scene.ids[k]), c + offset))
        if u_det >= noise.detect_prob_visible * vis[k]:
            continue
        u = (cam - c) / np.linalg.norm(cam - c)
        e1, e2 = _orthobasis(u)
        pos = (c + noise.ray_bias * u + offset
               + noise.sigma_pos_ray * z[0] * u + noise.sigma_pos_lateral * (z[1] * e1 + z[2] * e2))
        center = centers_emb[k]
        f = center.copy()
        if noise.sigma_feat > 0:
            # rotate away from the center by a half-normal angle in a random tangent direction
            tang = fz[1:] - (fz[1:] @ center) * center
            tang /= np.linalg.norm(tang)
            ang = noise.sigma_feat * abs(fz[0])
            f = math.cos(ang) * center + math.sin(ang) * tang
        if noise.sigma_feat_view > 0 and view_dirs is not None:
            w1, w2 = view_dirs[k]
            f = f + noise.sigma_feat_view * (math.cos(view.azimuth) * w1 + math.sin(view.azimuth) * w2)
        bbox = _project_bbox(view, pos, scene.radius) if noise.with_bbox else None
        detections.append(Detection(Gaussian3(pos, cov), f, frame, bbox))
        det_ids.append(int(scene.ids[k]))

    n_clutter = int(rng.poisson(noise.clutter_rate)) if noise.clutter_rate > 0 else 0
    visible = np.flatnonzero(vis > 0.0)
    for _ in range(n_clutter):
        near = rng.uniform() < noise.clutter_near_fraction
        if near and len(visible):
            k = visible[rng.integers(len(visible))]
            p = scene.centers[k] + offset + rng.normal(size=3) * noise.clutter_near_sigma
        else:
            p = _clutter_point(rng, view, spec, fov)
        f = rng.normal(size=noise.feat_dim)
        bbox = _project_bbox(view, p, scene.radius) if noise.with_bbox else None
        detections.append(Detection(Gaussian3(p, cov), f, frame, bbox))
        det_ids.append(None)
    return RenderedFrame(frame, detections, det_ids, gt, view)


def _view_feature_dirs(centers_emb: np.ndarray, seed: int):
    rng = stream(seed, STREAM_VIEW_FEAT)
    dirs = []
    for c in centers_emb:
        w = rng.normal(size=(2, len(c)))
        w -= np.outer(w @ c, c)
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        dirs.append((w[0], w[1]))
    return dirs


def simulate(spec: SceneSpec) -> list:
    """Render every viewpoint of the camera path; returns RenderedFrame per view in path order."""
    scene = generate_scene(spec)
    views = camera_path(spec.path)
    noise = spec.noise
    emb = embedding_centers(len(scene.centers), noise.feat_dim, noise.min_center_angle, spec.seed)
    offsets = pose_offsets(views, noise.pose_error, spec.seed)
    view_dirs = _view_feature_dirs(emb, spec.seed) if noise.sigma_feat_view > 0 else None
    return [render_frame(scene, v, spec, emb, v.index, offsets[v.index], view_dirs) for v in views]


def detection_stats(frames) -> tuple:
    """Frame-level detection (recall, precision) in percent, pooled over frames."""
    n_gt = sum(len(f.gt) for f in frames)
    n_det = sum(len(f.detections) for f in frames)
    n_tp = sum(sum(1 for g in f.det_gt_ids if g is not None) for f in frames)
    recall = 100.0 * n_tp / n_gt if n_gt else 0.0
    precision = 100.0 * n_tp / n_det if n_det else 0.0
    return recall, precision


def order_frames(frames, mode: str = "sequential", seed: int = 0, index: int = 0):
    """Presentation order; ``index`` selects an independent shuffle per subset."""
    if mode == "sequential":
        return list(frames)
    if mode != "random":
        raise ValidationError(f"unknown order mode {mode!r}")
    frames = list(frames)
    perm = stream(seed, STREAM_ORDER, index).permutation(len(frames))
    return [frames[i] for i in perm]


def subsample_viewpoints(frames, k: int = 5, size: int = 80, seed: int = 0) -> list:
    """``k`` seeded subsets of ``size`` frames, each keeping the input order."""
    frames = list(frames)
    if size > len(frames):
        raise ValidationError(f"subset size {size} exceeds the {len(frames)} available frames")
    rng = stream(seed, STREAM_SUBSET)
    out = []
    for _ in range(k):
        idx = np.sort(rng.choice(len(frames), size=size, replace=False))
        out.append([frames[i] for i in idx])
    return out


def validation_features(spec: SceneSpec, plant_seeds=(1001, 1002), n_frames: int = 15) -> list:
    """Labelled ``((plant, id), feature)`` pairs from a few random frames of held-out plants."""
    labeled = []
    for s in plant_seeds:
        frames = simulate(replace(spec, seed=s))
        pick = stream(s, STREAM_SUBSET, 1).choice(len(frames), size=min(n_frames, len(frames)), replace=False)
        for i in np.sort(pick):
            for det, g in zip(frames[i].detections, frames[i].det_gt_ids):
                if g is not None:
                    labeled.append(((s, g), det.feature))
    return labeled


def calibrate_operating_point(spec: SceneSpec, name: str, target_re: float, target_pr: float,
                              seeds=(0,), iterations: int = 8) -> OperatingPoint:
    """Fit detect probability and clutter rate to a (recall, precision) target by fixed-point search."""
    p, clutter = target_re / 100.0, 1.0
    for _ in range(iterations):
        frames = []
        for s in seeds:
            noise = replace(spec.noise, detect_prob_visible=p, clutter_rate=clutter)
            frames += simulate(replace(spec, seed=s, noise=noise))
        n_gt = sum(len(f.gt) for f in frames)
        n_tp = sum(sum(1 for g in f.det_gt_ids if g is not None) for f in frames)
        re = n_tp / n_gt
        p = min(1.0, p * (target_re / 100.0) / max(re, 1e-9))
        # clutter needed for the target precision at the current TP rate
        tp_per_frame = n_tp / len(frames)
        clutter = max(0.0, tp_per_frame * (100.0 / target_pr - 1.0) * (target_re / 100.0) / max(re, 1e-9))
    return OperatingPoint(name, target_re, target_pr, round(p, 4), round(clutter, 4))
