"""Teacher-student fine-tuning: EMA teacher, depth-bin injection, pseudo labels, 1:1 batch mixing.

The teacher is never differentiated. It follows the student through
:func:`ema_update` and supplies occupancy pseudo labels on which the student
is trained with the masked 3D cross-entropy, alongside ordinary rendering
supervision from labeled and unlabeled rays.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .grid import LabelGrid, VisibilityMask, VoxelGrid, check_same_geometry, grid_to_label, softplus
from .losses import grid_occ3d_ce
from .render import SamplerConfig, prepare_rays
from .train import (Adam, NumericalError, RayTargets, SceneData, TrainConfig, evaluate, rendering_loss,
                    targets_for, training_pool)


@dataclass
class EmaState:
    teacher: VoxelGrid
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("EMA momentum must lie in [0, 1]")

    @classmethod
    def from_student(cls, student: VoxelGrid, momentum: float) -> "EmaState":
        return cls(student.copy(), momentum)

    def update(self, student: VoxelGrid) -> None:
        self.teacher = ema_update(self.teacher, student, self.momentum)


def _ema(t: np.ndarray, s: np.ndarray, m: float) -> np.ndarray:
    if t.shape != s.shape:
        raise ValueError(f"teacher shape {t.shape} != student shape {s.shape}")
    if m == 1.0:
        return t.copy()
    if m == 0.0:
        return s.copy()
    return m * t + (1.0 - m) * s


def ema_update(teacher, student, m: float):
    """``m * teacher + (1 - m) * student`` on arrays or on both parameter sets of a grid."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    if isinstance(teacher, VoxelGrid):
        if not isinstance(student, VoxelGrid):
            raise TypeError("student must be a VoxelGrid when teacher is")
        check_same_geometry(teacher.geometry, student.geometry)
        return VoxelGrid(teacher.geometry, teacher.schema,
                         _ema(teacher.density_raw, student.density_raw, m),
                         _ema(teacher.sem_logits, student.sem_logits, m))
    return _ema(np.asarray(teacher, dtype=np.float64), np.asarray(student, dtype=np.float64), m)


@dataclass(frozen=True)
class DepthDistribution:
    bins: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        probs = np.asarray(self.probs, dtype=np.float64)
        if bins.ndim != 1 or bins.shape != probs.shape or bins.size == 0:
            raise ValueError("bins and probs must be equal-length non-empty vectors")
        if np.any(np.diff(bins) <= 0):
            raise ValueError("bins must be strictly increasing")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError("probs must be nonnegative and sum to 1")
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_weights(cls, bins, weights) -> "DepthDistribution":
        w = np.asarray(weights, dtype=np.float64)
        total = w.sum()
        probs = w / total if total > 0 else np.full(w.size, 1.0 / w.size)
        return cls(bins, probs)


def nearest_bin(bins: np.ndarray, depth: float) -> int:
    """Index of the bin closest to ``depth``; an exact midpoint goes to the lower index."""
    return int(np.argmin(np.abs(np.asarray(bins) - depth)))  # argmin keeps the first of equal minima


def inject_depth_gt(dist: DepthDistribution, depth_gt: float) -> DepthDistribution:
    """One-hot at the bin nearest to ``depth_gt``; unchanged when the depth is outside the bin range."""
    if not (dist.bins[0] <= depth_gt <= dist.bins[-1]):
        return dist
    probs = np.zeros_like(dist.probs)
    probs[nearest_bin(dist.bins, depth_gt)] = 1.0
    return DepthDistribution(dist.bins, probs)


def occupancy_probability(grid: VoxelGrid) -> np.ndarray:
    return -np.expm1(-softplus(grid.density_raw) * grid.geometry.voxel_size)


def pseudo_label(teacher: VoxelGrid, tau_occ: float = 0.5, tau_conf: float = 0.7) -> tuple[LabelGrid, VisibilityMask]:
    """Teacher labels and the mask of voxels whose confidence reaches ``tau_conf``.

    Confidence is the top softmax probability for occupied voxels and
    ``1 - p_occ`` for free ones.
    """
    if not 0.0 < tau_occ < 1.0:
        raise ValueError("tau_occ must lie in (0, 1)")
    if not 0.0 <= tau_conf < 1.0:
        raise ValueError("tau_conf must lie in [0, 1)")
    labels = grid_to_label(teacher, tau_occ)
    s = teacher.sem_logits
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    top = e.max(axis=-1) / e.sum(axis=-1)
    occ = labels.occupied()
    conf = np.where(occ, top, 1.0 - occupancy_probability(teacher))
    return labels, VisibilityMask(teacher.geometry, conf >= tau_conf)


def inject_along_rays(teacher: VoxelGrid, labels: LabelGrid, mask: VisibilityMask, origins: np.ndarray,
                      dirs: np.ndarray, depth: np.ndarray) -> tuple[LabelGrid, VisibilityMask]:
    """Sharpen pseudo labels with measured depth along teacher rays.

    For each ray with a depth, the teacher's compositing weights over the
    traversed voxels form a depth distribution whose bins are the voxel entry
    distances. Injecting the measured depth makes it one-hot; the voxels before
    that bin become free and the bin's voxel occupied with the teacher's class.
    Touched voxels become confident. Rays whose depth lies outside the
    traversed range are left alone. When rays disagree, occupied wins over free.
    """
    out = labels.class_id.copy()
    conf = mask.visible.copy()
    have = np.flatnonzero(~np.isnan(depth))
    rays = prepare_rays(teacher, origins[have], dirs[have], SamplerConfig("voxel")) if have.size else None
    if rays is None or not rays.n_valid.any():
        return LabelGrid(labels.geometry, labels.schema, out), VisibilityMask(labels.geometry, conf)
    geo = teacher.geometry
    valid = np.arange(rays.z.shape[1])[None, :] < rays.n_valid[:, None]
    mid = rays.z + 0.5 * rays.beta
    pts = rays.origins[:, None, :] + mid[..., None] * rays.dirs[:, None, :]
    idx = np.clip(np.floor((pts - geo.lo) / geo.voxel_size).astype(np.int64), 0, np.asarray(geo.dims) - 1)
    d = depth[have][:, None]
    last = np.take_along_axis(rays.z, np.maximum(rays.n_valid - 1, 0)[:, None], axis=1)
    in_range = (rays.n_valid > 0) & (d[:, 0] >= rays.z[:, 0]) & (d[:, 0] <= last[:, 0])
    # nearest bin; argmin keeps the lower index on ties
    k = np.argmin(np.where(valid, np.abs(rays.z - d), np.inf), axis=1)
    before = valid & (np.arange(rays.z.shape[1])[None, :] < k[:, None]) & in_range[:, None]
    free_idx = idx[before]
    out[tuple(free_idx.T)] = teacher.schema.free_id
    conf[tuple(free_idx.T)] = True
    hit_idx = idx[np.flatnonzero(in_range), k[in_range]]
    cls = teacher.sem_logits.argmax(axis=-1)
    out[tuple(hit_idx.T)] = cls[tuple(hit_idx.T)]
    conf[tuple(hit_idx.T)] = True
    return LabelGrid(labels.geometry, labels.schema, out), VisibilityMask(labels.geometry, conf)


def consistency_loss(student: VoxelGrid, pseudo: LabelGrid, mask: VisibilityMask) -> tuple[float, np.ndarray, np.ndarray]:
    """Masked 3D cross-entropy of the student against teacher pseudo labels."""
    check_same_geometry(student.geometry, pseudo.geometry)
    if not mask.visible.any():
        raise ValueError("consistency mask selects no voxels")
    return grid_occ3d_ce(student, pseudo, mask)


def mixed_batch(labeled: np.ndarray, unlabeled: np.ndarray, size: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``ceil(size/2)`` labeled and ``floor(size/2)`` unlabeled items without replacement (if possible)."""
    labeled = np.asarray(labeled)
    unlabeled = np.asarray(unlabeled)
    if labeled.size == 0 or unlabeled.size == 0:
        raise ValueError("both pools must be non-empty")
    if size < 0:
        raise ValueError("batch size must be nonnegative")
    n_lab = (size + 1) // 2
    n_unl = size // 2

    def draw(pool, n):
        return np.sort(rng.choice(pool, n, replace=n > pool.size))

    return draw(labeled, n_lab), draw(unlabeled, n_unl)


@dataclass
class DtsResult:
    student: VoxelGrid
    teacher: VoxelGrid
    before: float
    after: float


def run_dts(labeled: SceneData, unlabeled: SceneData, student: VoxelGrid, cfg: TrainConfig,
            log: Optional[Callable[[dict], None]] = None) -> DtsResult:
    """Fine-tune ``student`` (in place on a copy) with an EMA teacher for ``cfg.dts_iterations`` steps.

    Each step renders a 1:1 mix of labeled rays (depth and class targets) and
    unlabeled rays (depth only), and adds the consistency loss against the
    teacher's current pseudo labels. The teacher is updated after every
    student step. mIoU is measured on the labeled scene's key frame.
    """
    check_same_geometry(labeled.geometry, unlabeled.geometry)
    check_same_geometry(labeled.geometry, student.geometry)
    student = student.copy()
    ema = EmaState.from_student(student, cfg.ema_momentum)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(student, cfg.dts_lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.density_lr_scale)
    lab_pool = training_pool(labeled, cfg)
    unl_pool = training_pool(unlabeled, cfg)
    before = evaluate(student, labeled, cfg.occ_threshold, cfg.use_mask).miou
    weight = cfg.render_weight
    start = time.perf_counter()
    for step in range(1, cfg.dts_iterations + 1):
        lab_sel, unl_sel = mixed_batch(lab_pool, unl_pool, cfg.batch_rays, rng)
        a = targets_for(labeled, lab_sel)
        b = targets_for(unlabeled, unl_sel)
        unl_targets = RayTargets(b.origins, b.dirs, b.depth, np.full(len(b), -1))
        targets = RayTargets(np.concatenate([a.origins, b.origins]), np.concatenate([a.dirs, b.dirs]),
                             np.concatenate([a.depth, b.depth]), np.concatenate([a.cls, unl_targets.cls]))
        silog, sem, grad = rendering_loss(student, targets, cfg, weight, rng)
        pseudo, mask = pseudo_label(ema.teacher, cfg.tau_occ, cfg.tau_conf)
        if cfg.depth_injection:
            pseudo, mask = inject_along_rays(ema.teacher, pseudo, mask, b.origins, b.dirs, b.depth)
        cons = 0.0
        if mask.visible.any():
            cons, gd, gl = consistency_loss(student, pseudo, mask)
            grad.density += cfg.w_consistency * gd
            grad.logits += cfg.w_consistency * gl
        total = cfg.w_consistency * cons + weight * (silog + sem)
        if not (np.isfinite(total) and np.isfinite(grad.density).all() and np.isfinite(grad.logits).all()):
            raise NumericalError(f"non-finite loss at teacher-student step {step}")
        opt.step(student, grad)
        ema.update(student)
        if log is not None:
            rec = {"step": step, "silog": silog, "sem_ce": sem, "consistency": cons, "total": total,
                   "rays": len(targets), "elapsed": round(time.perf_counter() - start, 6)}
            if step % cfg.eval_every == 0 or step == cfg.dts_iterations:
                rec["student_miou"] = evaluate(student, labeled, cfg.occ_threshold, cfg.use_mask).miou
                rec["teacher_miou"] = evaluate(ema.teacher, labeled, cfg.occ_threshold, cfg.use_mask).miou
            log(rec)
    after = evaluate(student, labeled, cfg.occ_threshold, cfg.use_mask).miou
    return DtsResult(student, ema.teacher, before, after)
