"""Desk-scale training: synthetic scenes, label baking, dynamic filtering, optimization, TTA."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .camera import Camera, load_rig, make_surround_rig, pixel_centers, pixel_rays, save_rig
from .grid import (GridGeometry, LabelGrid, SemanticSchema, VisibilityMask, VoxelGrid, check_same_geometry,
                   grid_to_label, grid_to_occ_logits, load_labels, load_mask, save_labels, save_mask)
from .losses import LossReport, PixelLabels, combine, grid_occ3d_ce, semantic_ce, silog_loss
from .metrics import IoUReport, iou
from .render import GridGradient, RayBatch, SamplerConfig, backward, forward, prepare_rays
from .sampling import ray_aabb_batch

MODES = ("render_only", "occ3d_only", "combined")


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# --- scene description -----------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box in meters; ``motion`` is the per-frame translation."""

    class_id: int
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    motion: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def at_frame(self, frame: int) -> tuple[np.ndarray, np.ndarray]:
        shift = frame * np.asarray(self.motion, dtype=np.float64)
        return np.asarray(self.lo) + shift, np.asarray(self.hi) + shift


@dataclass(frozen=True)
class RigSpec:
    n_cams: int = 6
    radius: float = 0.2
    height: float = 0.0
    fx: float = 48.0
    fy: float = 48.0
    width: int = 64
    image_height: int = 40
    center: tuple[float, float] = (0.0, 0.0)
    ego_motion: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pitch_deg: float = 0.0

    def at_frame(self, frame: int) -> list[Camera]:
        cams = make_surround_rig(self.n_cams, self.radius, self.height, self.fx, self.fy,
                                 self.width, self.image_height, center=self.center,
                                 pitch_deg=self.pitch_deg)
        offset = frame * np.asarray(self.ego_motion, dtype=np.float64)
        return [c.translated(offset) for c in cams]


@dataclass(frozen=True)
class SceneSpec:
    geometry: GridGeometry
    schema: SemanticSchema
    primitives: tuple[Primitive, ...]
    rig: RigSpec
    n_frames: int = 1
    labeled: bool = True

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        geometry = GridGeometry.from_json(d["grid"])
        schema = SemanticSchema(tuple(d["classes"]), tuple(d.get("dynamic_classes", ())))
        prims = []
        for p in d.get("primitives", []):
            kind = p.get("kind", "box")
            if kind == "ground":
                lo = geometry.lo.copy()
                hi = geometry.hi.copy()
                hi[2] = lo[2] + float(p.get("thickness", geometry.voxel_size))
                prims.append(Primitive(int(p["class"]), tuple(lo), tuple(hi)))
            elif kind == "box":
                prims.append(Primitive(int(p["class"]), tuple(p["min"]), tuple(p["max"]),
                                       tuple(p.get("motion", (0.0, 0.0, 0.0)))))
            else:
                raise ValueError(f"unknown primitive kind {kind!r}")
        rig_d = dict(d.get("rig", {}))
        for key in ("center", "ego_motion"):
            if key in rig_d:
                rig_d[key] = tuple(rig_d[key])
        rig = RigSpec(**rig_d)
        spec = cls(geometry, schema, tuple(prims), rig, int(d.get("frames", 1)), bool(d.get("labeled", True)))
        spec.validate()
        return spec

    def validate(self) -> None:
        if self.n_frames < 1:
            raise ValueError("scene needs at least one frame")
        lo, hi = self.geometry.lo, self.geometry.hi
        for n, p in enumerate(self.primitives):
            if not 0 <= p.class_id < self.schema.num_classes:
                raise ValueError(f"primitive {n}: class {p.class_id} not in schema")
            for f in range(self.n_frames):
                plo, phi = p.at_frame(f)
                if np.any(plo >= phi):
                    raise ValueError(f"primitive {n}: empty box")
                if np.any(plo < lo - 1e-9) or np.any(phi > hi + 1e-9):
                    raise ValueError(f"primitive {n} leaves the grid bounds at frame {f}")


def rasterize(spec: SceneSpec, frame: int) -> LabelGrid:
    """Label voxels whose centers fall inside a primitive; later primitives overwrite earlier ones."""
    geo = spec.geometry
    labels = np.full(geo.dims, spec.schema.free_id, dtype=np.int64)
    centers = geo.centers()
    for p in spec.primitives:
        lo, hi = p.at_frame(frame)
        inside = np.all((centers >= lo) & (centers < hi), axis=-1)
        labels[inside] = p.class_id
    return LabelGrid(geo, spec.schema, labels)


def synth_scene(spec: SceneSpec) -> tuple[list[LabelGrid], list[list[Camera]]]:
    """Ground-truth labels and camera rig for every frame (frame 0 is the key frame)."""
    spec.validate()
    return ([rasterize(spec, f) for f in range(spec.n_frames)],
            [spec.rig.at_frame(f) for f in range(spec.n_frames)])


# --- label baking ----------------------------------------------------------


@dataclass
class BakeResult:
    hit: np.ndarray  # per ray, True when a non-free voxel was hit at positive distance
    depth: np.ndarray  # NaN without hit
    cls: np.ndarray  # -1 without hit
    visible: np.ndarray  # per voxel


def cast_rays(gt: LabelGrid, origins: np.ndarray, dirs: np.ndarray) -> BakeResult:
    """Exact voxel traversal of many rays at once.

    The first non-free voxel gives the depth (distance at which the ray enters
    it) and class. Traversed free voxels and the hit voxel become visible.
    """
    geo = gt.geometry
    dims = np.asarray(geo.dims)
    lo = geo.lo
    vs = geo.voxel_size
    R = origins.shape[0]
    depth = np.full(R, np.nan)
    cls = np.full(R, -1, dtype=np.int64)
    hit = np.zeros(R, dtype=bool)
    visible = np.zeros(geo.dims, dtype=bool)
    if R == 0:
        return BakeResult(hit, depth, cls, visible)
    t_near, t_far, inside = ray_aabb_batch(origins, dirs, lo, geo.hi)
    start = origins + (t_near + 1e-9)[:, None] * dirs
    idx = np.clip(np.floor((start - lo) / vs).astype(np.int64), 0, dims - 1)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = lo + (idx + (step > 0)) * vs
        t_max = np.where(step != 0, (boundary - origins) / dirs, np.inf)
        t_delta = np.where(step != 0, vs / np.abs(dirs), np.inf)
    t_cur = t_near.copy()
    active = inside.copy()
    free = gt.schema.free_id
    while active.any():
        a = np.flatnonzero(active)
        i, j, k = idx[a, 0], idx[a, 1], idx[a, 2]
        visible[i, j, k] = True
        lab = gt.class_id[i, j, k]
        occ = lab != free
        stop = a[occ]
        good = stop[t_cur[stop] > 1e-6]
        depth[good] = t_cur[good]
        cls[good] = gt.class_id[idx[good, 0], idx[good, 1], idx[good, 2]]
        hit[good] = True
        active[stop] = False
        a = a[~occ]
        if a.size == 0:
            break
        axis = np.argmin(t_max[a], axis=1)
        t_cur[a] = t_max[a, axis]
        idx[a, axis] += step[a, axis]
        t_max[a, axis] += t_delta[a, axis]
        out = np.any((idx[a] < 0) | (idx[a] >= dims), axis=1) | (t_cur[a] >= t_far[a])
        active[a[out]] = False
    return BakeResult(hit, depth, cls, visible)


def bake_labels(gt: LabelGrid, cam: Camera, cam_id: int = 0, frame: int = 0) -> tuple[PixelLabels, np.ndarray]:
    """Per-pixel depth/class labels for every pixel center, plus this camera's visibility contribution."""
    u, v = pixel_centers(cam)
    origins, dirs = pixel_rays(cam, u, v)
    res = cast_rays(gt, origins, dirs)
    sel = res.hit
    n = int(sel.sum())
    labels = PixelLabels(np.full(n, cam_id), u[sel], v[sel], res.depth[sel], res.cls[sel], np.full(n, frame))
    return labels, res.visible


def dynamic_drop_mask(labels: PixelLabels, schema: SemanticSchema, frame_kind: Optional[str] = None,
                      baked_cls: Optional[np.ndarray] = None) -> np.ndarray:
    """True for labels that :func:`filter_dynamic_rays` removes."""
    if frame_kind not in (None, "key", "temporal"):
        raise ValueError(f"unknown frame kind {frame_kind!r}")
    if frame_kind == "key" or not schema.dynamic_class_ids:
        return np.zeros(len(labels), dtype=bool)
    temporal = np.ones(len(labels), dtype=bool) if frame_kind == "temporal" else labels.frame != 0
    seen = labels.cls if baked_cls is None else np.where(labels.cls >= 0, labels.cls, baked_cls)
    return temporal & np.isin(seen, schema.dynamic_class_ids)


def filter_dynamic_rays(labels: PixelLabels, schema: SemanticSchema, frame_kind: Optional[str] = None,
                        baked_cls: Optional[np.ndarray] = None) -> PixelLabels:
    """Drop labels of dynamic classes from temporal (non-key) frames.

    ``frame_kind`` forces every label to be treated as ``"key"`` or
    ``"temporal"``; by default a label is temporal when its frame is not 0.
    ``baked_cls`` supplies the class seen at each pixel so depth-only labels on
    dynamic objects are dropped too.
    """
    return labels.take(~dynamic_drop_mask(labels, schema, frame_kind, baked_cls))


# --- scene data on disk and in memory --------------------------------------


@dataclass
class SceneData:
    geometry: GridGeometry
    schema: SemanticSchema
    rigs: list[list[Camera]]
    pixels: PixelLabels
    labels: list[LabelGrid] = field(default_factory=list)
    visibility: Optional[VisibilityMask] = None
    origins: np.ndarray = None
    dirs: np.ndarray = None

    def __post_init__(self):
        if self.origins is None:
            self.origins, self.dirs = label_rays(self.rigs, self.pixels)

    @property
    def key_labels(self) -> Optional[LabelGrid]:
        return self.labels[0] if self.labels else None


def label_rays(rigs: Sequence[Sequence[Camera]], pixels: PixelLabels) -> tuple[np.ndarray, np.ndarray]:
    origins = np.zeros((len(pixels), 3))
    dirs = np.zeros((len(pixels), 3))
    for f, rig in enumerate(rigs):
        for c, cam in enumerate(rig):
            sel = np.flatnonzero((pixels.frame == f) & (pixels.cam == c))
            if sel.size:
                origins[sel], dirs[sel] = pixel_rays(cam, pixels.u[sel], pixels.v[sel])
    return origins, dirs


def build_scene(spec: SceneSpec) -> SceneData:
    """Rasterize, bake pixel labels for every frame, and compute key-frame visibility."""
    labels, rigs = synth_scene(spec)
    parts = []
    visible = np.zeros(spec.geometry.dims, dtype=bool)
    for f, (gt, rig) in enumerate(zip(labels, rigs)):
        for c, cam in enumerate(rig):
            px, vis = bake_labels(gt, cam, c, f)
            parts.append(px)
            if f == 0:
                visible |= vis
    pixels = PixelLabels.concat(parts)
    if not spec.labeled:
        pixels = PixelLabels(pixels.cam, pixels.u, pixels.v, pixels.depth, np.full(len(pixels), -1), pixels.frame)
        return SceneData(spec.geometry, spec.schema, rigs, pixels)
    return SceneData(spec.geometry, spec.schema, rigs, pixels, labels, VisibilityMask(spec.geometry, visible))


SCENE_SPEC = "spec.json"
SCENE_PIXELS = "pixels.npy"
SCENE_VISIBILITY = "visibility.u8"


def frame_dir(root: Path, frame: int) -> Path:
    return Path(root) / f"frame_{frame:03d}"


def save_scene(scene: SceneData, spec: dict, path) -> list[Path]:
    """Write a scene directory; returns the files written.

    Layout: ``spec.json``, ``frame_XXX/cameras.json`` and (for labeled scenes)
    ``frame_XXX/labels/``, ``pixels.npy`` with the baked pixel labels, and
    ``visibility.u8`` with the key-frame visibility mask.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = [root / SCENE_SPEC]
    written[0].write_text(json.dumps(spec, indent=2, sort_keys=True) + "\n")
    for f, rig in enumerate(scene.rigs):
        fd = frame_dir(root, f)
        fd.mkdir(exist_ok=True)
        save_rig(rig, fd / "cameras.json")
        written.append(fd / "cameras.json")
        if scene.labels:
            save_labels(scene.labels[f], fd / "labels", {"frame": f})
            written.append(fd / "labels")
    scene.pixels.save(root / SCENE_PIXELS)
    written.append(root / SCENE_PIXELS)
    if scene.visibility is not None:
        save_mask(scene.visibility, root / SCENE_VISIBILITY)
        written.append(root / SCENE_VISIBILITY)
    return written


def missing_scene_files(path) -> list[str]:
    root = Path(path)
    need = [root / SCENE_SPEC, root / SCENE_PIXELS]
    missing = [str(p) for p in need if not p.is_file()]
    if (root / SCENE_SPEC).is_file():
        try:
            spec = json.loads((root / SCENE_SPEC).read_text())
            frames = int(spec.get("frames", 1))
            labeled = bool(spec.get("labeled", True))
        except (ValueError, TypeError) as e:
            return missing + [f"{root / SCENE_SPEC} (unreadable: {e})"]
        for f in range(frames):
            fd = frame_dir(root, f)
            if not (fd / "cameras.json").is_file():
                missing.append(str(fd / "cameras.json"))
            if labeled and not (fd / "labels" / "meta.json").is_file():
                missing.append(str(fd / "labels" / "meta.json"))
        if labeled and not (root / SCENE_VISIBILITY).is_file():
            missing.append(str(root / SCENE_VISIBILITY))
    return missing


def load_scene(path) -> SceneData:
    root = Path(path)
    missing = missing_scene_files(root)
    if missing:
        raise FileNotFoundError("scene directory is incomplete; missing: " + ", ".join(missing))
    spec = SceneSpec.from_json(json.loads((root / SCENE_SPEC).read_text()))
    rigs = [load_rig(frame_dir(root, f) / "cameras.json") for f in range(spec.n_frames)]
    pixels = PixelLabels.load(root / SCENE_PIXELS)
    if not spec.labeled:
        return SceneData(spec.geometry, spec.schema, rigs, pixels)
    labels = [load_labels(frame_dir(root, f) / "labels") for f in range(spec.n_frames)]
    for lab in labels:
        check_same_geometry(lab.geometry, spec.geometry)
    visibility = load_mask(root / SCENE_VISIBILITY, spec.geometry)
    return SceneData(spec.geometry, spec.schema, rigs, pixels, labels, visibility)


# --- configuration ---------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "render_only"
    lr: float = 1e-2
    lr_final_ratio: float = 1.0
    density_lr_scale: float = 1.0
    iterations: int = 2000
    batch_rays: int = 25600
    sampler: str = "disparity"
    n_samples: int = 96
    jitter: bool = False
    interp: str = "trilinear"
    w_render: float = 0.1
    silog_lambda: float = 0.85
    depth_clamp: float = 1e-3
    min_opacity: float = 0.05
    seed: int = 0
    temporal: bool = True
    use_mask: bool = True
    init_density_raw: float = -2.5
    init_logit_scale: float = 0.0
    occ_threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threads: int = 1
    eval_every: int = 100
    # teacher-student fine-tuning
    dts_iterations: int = 100
    dts_lr: float = 2e-3
    ema_momentum: float = 0.999
    tau_occ: float = 0.5
    tau_conf: float = 0.7
    w_consistency: float = 1.0
    depth_injection: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr < 0 or self.dts_lr < 0 or not 0 < self.lr_final_ratio <= 1 or self.density_lr_scale <= 0:
            raise ValueError("learning rates must be nonnegative, lr_final_ratio in (0, 1], density_lr_scale > 0")
        if self.iterations < 0 or self.dts_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.batch_rays < 1 or self.n_samples < 1 or self.threads < 1 or self.eval_every < 1:
            raise ValueError("batch_rays, n_samples, threads and eval_every must be positive")
        if self.interp not in ("nearest", "trilinear"):
            raise ValueError(f"unknown interpolation {self.interp!r}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        SamplerConfig(self.sampler, self.n_samples, self.jitter)

    @property
    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler, self.n_samples, self.jitter)

    @property
    def render_weight(self) -> float:
        return 1.0 if self.mode == "render_only" else self.w_render

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(load_config_dict(path))


def load_config_dict(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    # allow a [train] table / "train" object
    return dict(data.get("train", data))


# --- optimization ----------------------------------------------------------


class Adam:
    """First/second-moment optimizer over the grid's two parameter arrays.

    ``density_scale`` multiplies the step size of the density parameters only.
    """

    def __init__(self, grid: VoxelGrid, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 density_scale: float = 1.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.density_scale = density_scale
        self.t = 0
        self.m = [np.zeros_like(grid.density_raw), np.zeros_like(grid.sem_logits)]
        self.v = [np.zeros_like(grid.density_raw), np.zeros_like(grid.sem_logits)]

    def step(self, grid: VoxelGrid, grad: GridGradient) -> None:
        self.t += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        groups = zip((grid.density_raw, grid.sem_logits), (grad.density, grad.logits), self.m, self.v,
                     (self.density_scale, 1.0))
        for param, g, m, v, scale in groups:
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param -= scale * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def init_grid(geometry: GridGeometry, schema: SemanticSchema, cfg: TrainConfig) -> VoxelGrid:
    rng = np.random.default_rng(cfg.seed)
    grid = VoxelGrid.filled(geometry, schema, cfg.init_density_raw)
    if cfg.init_logit_scale:
        grid.sem_logits += cfg.init_logit_scale * rng.standard_normal(grid.sem_logits.shape)
    return grid


@dataclass
class RayTargets:
    """A batch of supervised rays; ``depth`` NaN / ``cls`` -1 where absent.

    ``rays`` optionally carries samples prepared in advance (deterministic samplers only).
    """

    origins: np.ndarray
    dirs: np.ndarray
    depth: np.ndarray
    cls: np.ndarray
    rays: Optional[RayBatch] = None

    def __len__(self) -> int:
        return self.depth.size


def targets_for(scene: SceneData, sel: np.ndarray) -> RayTargets:
    return RayTargets(scene.origins[sel], scene.dirs[sel], scene.pixels.depth[sel], scene.pixels.cls[sel])


def rendering_loss(grid: VoxelGrid, targets: RayTargets, cfg: TrainConfig, weight: float,
                   rng: Optional[np.random.Generator] = None) -> tuple[float, float, GridGradient]:
    """SILog + semantic CE on rendered rays, returning ``(silog, sem_ce, weighted gradient)``."""
    rays = targets.rays
    if rays is None:
        rays = prepare_rays(grid, targets.origins, targets.dirs, cfg.sampler_config, rng)
    D, S, O = forward(grid, rays, cfg.interp, cfg.threads)
    dD = np.zeros_like(D)
    dS = np.zeros_like(S)
    silog = sem = 0.0
    depth_sel = np.flatnonzero(~np.isnan(targets.depth) & (O >= cfg.min_opacity))
    if depth_sel.size:
        silog, g = silog_loss(D[depth_sel], targets.depth[depth_sel], cfg.silog_lambda, cfg.depth_clamp)
        dD[depth_sel] = weight * g
    cls_sel = np.flatnonzero(targets.cls >= 0)
    if cls_sel.size:
        sem, g = semantic_ce(S[cls_sel], targets.cls[cls_sel])
        dS[cls_sel] = weight * g
    grad = backward(grid, rays, dD, dS, np.zeros_like(O), cfg.interp, cfg.threads)
    return silog, sem, grad


def train_step(grid: VoxelGrid, opt: Adam, targets: Optional[RayTargets], cfg: TrainConfig,
               occ_labels: Optional[LabelGrid] = None, occ_mask: Optional[VisibilityMask] = None,
               rng: Optional[np.random.Generator] = None) -> LossReport:
    """One forward/backward pass and optimizer update; mutates ``grid`` in place."""
    use_render = cfg.mode in ("render_only", "combined")
    use_occ = cfg.mode in ("occ3d_only", "combined")
    grad = GridGradient(np.zeros(grid.dims), np.zeros(grid.sem_logits.shape))
    silog = sem = occ = None
    n_rays = 0
    if use_render:
        if targets is None or len(targets) == 0:
            raise ValueError("rendering supervision needs a non-empty ray batch")
        silog, sem, g = rendering_loss(grid, targets, cfg, cfg.render_weight, rng)
        grad.density += g.density
        grad.logits += g.logits
        n_rays = len(targets)
    if use_occ:
        if occ_labels is None:
            raise ValueError("3D supervision needs occupancy labels")
        occ, gd, gl = grid_occ3d_ce(grid, occ_labels, occ_mask if cfg.use_mask else None)
        grad.density += gd
        grad.logits += gl
    total = combine(occ, silog, sem, cfg.render_weight)
    report = LossReport(silog or 0.0, sem or 0.0, occ or 0.0, total, n_rays)
    if not (math.isfinite(total) and np.isfinite(grad.density).all() and np.isfinite(grad.logits).all()):
        raise NumericalError(f"non-finite loss or gradient: {report.to_json()}")
    opt.step(grid, grad)
    return report


def training_pool(scene: SceneData, cfg: TrainConfig) -> np.ndarray:
    """Indices of pixel labels used for rendering supervision (key + filtered temporal frames)."""
    px = scene.pixels
    keep = np.ones(len(px), dtype=bool) if cfg.temporal else px.frame == 0
    return np.flatnonzero(keep & ~dynamic_drop_mask(px, scene.schema))


def evaluate(grid: VoxelGrid, scene: SceneData, threshold: float = 0.5, masked: bool = True) -> IoUReport:
    return iou(grid_to_label(grid, threshold), scene.key_labels, scene.visibility if masked else None)


def train(scene: SceneData, cfg: TrainConfig, grid: Optional[VoxelGrid] = None,
          log: Optional[Callable[[dict], None]] = None) -> VoxelGrid:
    """Run ``cfg.iterations`` steps from ``grid`` (or a fresh initialization) and return the result."""
    if grid is None:
        grid = init_grid(scene.geometry, scene.schema, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(grid, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.density_lr_scale)
    pool = training_pool(scene, cfg)
    if cfg.mode != "occ3d_only" and pool.size == 0:
        raise ValueError("scene has no pixel labels for rendering supervision")
    start = time.perf_counter()
    # deterministic samples depend on geometry only: sample the whole pool once
    cached = None
    if cfg.mode != "occ3d_only" and not cfg.jitter and cfg.iterations:
        cached = prepare_rays(grid, scene.origins[pool], scene.dirs[pool], cfg.sampler_config)
    decay = cfg.lr_final_ratio ** (1.0 / max(cfg.iterations - 1, 1))
    for step in range(1, cfg.iterations + 1):
        opt.lr = cfg.lr * decay ** (step - 1)
        targets = None
        if cfg.mode != "occ3d_only":
            pick = np.arange(pool.size)
            if pool.size > cfg.batch_rays:
                pick = np.sort(rng.choice(pool.size, cfg.batch_rays, replace=False))
            targets = targets_for(scene, pool[pick])
            if cached is not None:
                targets.rays = cached.take(pick)
        report = train_step(grid, opt, targets, cfg, scene.key_labels, scene.visibility, rng)
        if log is not None:
            entry = {"step": step, **report.to_json(), "elapsed": round(time.perf_counter() - start, 6)}
            if step % cfg.eval_every == 0 or step == cfg.iterations:
                if scene.key_labels is not None:
                    entry["miou"] = evaluate(grid, scene, cfg.occ_threshold, cfg.use_mask).miou
            log(entry)
    return grid


# --- test-time augmentation ------------------------------------------------

FLIP_AXES = {"flip_x": 0, "flip_y": 1}


def tta_average(producer: Callable[[np.ndarray], np.ndarray], inputs: np.ndarray,
                flips: Iterable[str] = ()) -> np.ndarray:
    """Average ``producer`` over BEV flips of ``inputs``, each mapped back to the original frame.

    ``inputs`` and the producer's output are voxel arrays indexed ``(x, y, ...)``.
    """
    outputs = [np.asarray(producer(inputs), dtype=np.float64)]
    for name in flips:
        if name not in FLIP_AXES:
            raise ValueError(f"unknown flip {name!r}")
        axis = FLIP_AXES[name]
        out = np.asarray(producer(np.flip(inputs, axis=axis)), dtype=np.float64)
        outputs.append(np.flip(out, axis=axis))
    return np.mean(outputs, axis=0)


def grid_tta_logits(grid: VoxelGrid, flips: Iterable[str] = ()) -> np.ndarray:
    """``K+1`` occupancy logits of a grid averaged over BEV flips."""
    params = np.concatenate([grid.density_raw[..., None], grid.sem_logits], axis=-1)

    def producer(p: np.ndarray) -> np.ndarray:
        g = VoxelGrid(grid.geometry, grid.schema, p[..., 0], p[..., 1:])
        return grid_to_occ_logits(g)

    return tta_average(producer, params, flips)
