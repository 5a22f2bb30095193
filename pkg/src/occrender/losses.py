"""Supervision losses with exact gradients.

Rendered depth is supervised with the scale-invariant log loss, rendered
semantics with cross-entropy, and voxel predictions with a masked 3D
cross-entropy over ``K + 1`` classes (last = free).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .grid import LabelGrid, VisibilityMask, VoxelGrid, sigmoid, softplus

DEPTH_CLAMP = 1e-3
SILOG_LAMBDA = 0.85
W_RENDER = 0.1
MIN_OPACITY = 0.05


@dataclass
class PixelLabels:
    """Struct-of-arrays batch of pixel labels.

    ``depth`` is NaN where a pixel carries no depth label, ``cls`` is -1 where
    it carries no class label. ``frame`` 0 is the key frame.
    """

    cam: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    cls: np.ndarray
    frame: np.ndarray

    def __post_init__(self):
        self.cam = np.asarray(self.cam, dtype=np.int64).reshape(-1)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        self.cls = np.asarray(self.cls, dtype=np.int64).reshape(-1)
        self.frame = np.asarray(self.frame, dtype=np.int64).reshape(-1)
        n = self.cam.size
        if any(a.size != n for a in (self.u, self.v, self.depth, self.cls, self.frame)):
            raise ValueError("pixel label fields must have equal length")
        has_depth = ~np.isnan(self.depth)
        if np.any(~has_depth & (self.cls < 0)):
            raise ValueError("every pixel label needs a depth or a class")
        if np.any(self.depth[has_depth] <= 0):
            raise ValueError("depth labels must be positive")

    def __len__(self) -> int:
        return self.cam.size

    @property
    def has_depth(self) -> np.ndarray:
        return ~np.isnan(self.depth)

    @property
    def has_class(self) -> np.ndarray:
        return self.cls >= 0

    def take(self, sel) -> "PixelLabels":
        return PixelLabels(self.cam[sel], self.u[sel], self.v[sel], self.depth[sel], self.cls[sel], self.frame[sel])

    @classmethod
    def empty(cls) -> "PixelLabels":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z)

    @classmethod
    def concat(cls, parts: Sequence["PixelLabels"]) -> "PixelLabels":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("cam", "u", "v", "depth", "cls", "frame")))

    _FIELDS = (("cam", "<i8"), ("u", "<f8"), ("v", "<f8"), ("depth", "<f8"), ("cls", "<i8"), ("frame", "<i8"))

    def save(self, path) -> None:
        """Write one structured ``.npy`` record per pixel (byte-stable, unlike a zip archive)."""
        rec = np.zeros(len(self), dtype=list(self._FIELDS))
        for name, _ in self._FIELDS:
            rec[name] = getattr(self, name)
        with open(path, "wb") as f:
            np.save(f, rec, allow_pickle=False)

    @classmethod
    def load(cls, path) -> "PixelLabels":
        rec = np.load(path, allow_pickle=False)
        missing = [name for name, _ in cls._FIELDS if name not in (rec.dtype.names or ())]
        if missing:
            raise ValueError(f"{path}: pixel label file lacks fields {missing}")
        return cls(*(rec[name] for name, _ in cls._FIELDS))


@dataclass
class LossReport:
    silog: float = 0.0
    sem_ce: float = 0.0
    occ3d_ce: float = 0.0
    total: float = 0.0
    rays: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def silog_loss(d_pred: Sequence[float], d_gt: Sequence[float], lam: float = SILOG_LAMBDA,
               clamp: float = DEPTH_CLAMP) -> tuple[float, np.ndarray]:
    """``mean(g^2) - lam * mean(g)^2`` with ``g = ln(d_pred) - ln(d_gt)``; returns loss and gradient."""
    d_pred = np.asarray(d_pred, dtype=np.float64)
    d_gt = np.asarray(d_gt, dtype=np.float64)
    if d_pred.size == 0:
        raise ValueError("silog_loss needs at least one depth")
    if d_pred.shape != d_gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    if np.any(~(d_gt > 0)):
        raise ValueError("ground-truth depths must be positive")
    clamped = d_pred < clamp
    dp = np.where(clamped, clamp, d_pred)
    g = np.log(dp) - np.log(d_gt)
    n = g.size
    mean_g = g.mean()
    loss = float(np.mean(g * g) - lam * mean_g * mean_g)
    grad = (2.0 / n) * (g - lam * mean_g) / dp
    grad[clamped] = 0.0
    return loss, grad


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def semantic_ce(S: np.ndarray, class_gt) -> tuple[float, np.ndarray]:
    """Cross-entropy of rendered logits against class ids.

    Accepts one pixel (``S`` of shape ``(K,)``) or a batch ``(B, K)``; batch
    losses and gradients are averaged over pixels.
    """
    S = np.asarray(S, dtype=np.float64)
    single = S.ndim == 1
    S2 = S.reshape(1, -1) if single else S
    cls = np.asarray(class_gt, dtype=np.int64).reshape(-1)
    K = S2.shape[1]
    if cls.size != S2.shape[0]:
        raise ValueError("one class label per pixel required")
    if np.any((cls < 0) | (cls >= K)):
        raise ValueError(f"class labels must lie in 0..{K - 1}")
    if cls.size == 0:
        raise ValueError("semantic_ce needs at least one pixel")
    logp = _log_softmax(S2)
    rows = np.arange(cls.size)
    loss = float(-logp[rows, cls].mean())
    grad = np.exp(logp)
    grad[rows, cls] -= 1.0
    grad /= cls.size
    return loss, (grad[0] if single else grad)


def _mask_array(labels: LabelGrid, mask: Optional[VisibilityMask]) -> np.ndarray:
    if mask is None:
        m = np.ones(labels.class_id.shape, dtype=bool)
    else:
        m = np.asarray(mask.visible if isinstance(mask, VisibilityMask) else mask, dtype=bool)
        if m.shape != labels.class_id.shape:
            raise ValueError(f"mask shape {m.shape} != label shape {labels.class_id.shape}")
    if not m.any():
        raise ValueError("mask selects no voxels")
    return m


def occ3d_ce(pred: np.ndarray, labels: LabelGrid, mask: Optional[VisibilityMask] = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of per-voxel ``K+1`` logits over the masked voxels; returns loss and gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != labels.class_id.shape + (labels.schema.num_classes + 1,):
        raise ValueError(f"prediction shape {pred.shape} does not match labels")
    m = _mask_array(labels, mask)
    n = int(m.sum())
    logp = _log_softmax(pred)
    target = labels.class_id[..., None]
    picked = np.take_along_axis(logp, target, axis=-1)[..., 0]
    loss = float(-picked[m].sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, target, np.take_along_axis(grad, target, axis=-1) - 1.0, axis=-1)
    grad *= m[..., None] / n
    return loss, grad


def grid_occ3d_ce(grid: VoxelGrid, labels: LabelGrid, mask: Optional[VisibilityMask] = None
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """:func:`occ3d_ce` on the grid's implied ``K+1`` distribution, chained to the grid parameters.

    The implied distribution is ``(p_occ * softmax(s), p_free)`` with
    ``p_free = exp(-sigma * voxel_size)``. Returns the loss and gradients with
    respect to ``density_raw`` and ``sem_logits``.
    """
    if grid.dims != labels.class_id.shape:
        raise ValueError("grid and label shapes differ")
    m = _mask_array(labels, mask)
    n = int(m.sum())
    vs = grid.geometry.voxel_size
    sigma = softplus(grid.density_raw)
    optical = sigma * vs
    free = labels.class_id == labels.schema.free_id
    # -log p_occ = -log(1 - exp(-optical))
    em1 = np.expm1(optical)
    log_p_occ = np.log(-np.expm1(-np.maximum(optical, 1e-12)))
    logp_sem = _log_softmax(grid.sem_logits)
    cls = np.where(free, 0, labels.class_id)
    picked_sem = np.take_along_axis(logp_sem, cls[..., None], axis=-1)[..., 0]
    per_voxel = np.where(free, optical, -log_p_occ - picked_sem)
    loss = float(per_voxel[m].sum() / n)

    d_optical_occ = -1.0 / np.maximum(em1, 1e-12)
    dsigma = np.where(free, vs, vs * d_optical_occ)
    g_density = np.where(m, dsigma * sigmoid(grid.density_raw), 0.0) / n
    g_logits = np.exp(logp_sem)
    np.put_along_axis(g_logits, cls[..., None], np.take_along_axis(g_logits, cls[..., None], axis=-1) - 1.0, axis=-1)
    g_logits *= (m & ~free)[..., None] / n
    return loss, g_density, g_logits


def sample_pixel_batch(labels: PixelLabels, count: int, rng: np.random.Generator) -> PixelLabels:
    """Uniform sample without replacement; the full set when ``count >= len(labels)``."""
    if len(labels) == 0:
        raise ValueError("no pixel labels to sample from")
    if count >= len(labels):
        return labels
    if count <= 0:
        return labels.take(np.zeros(0, dtype=np.int64))
    sel = np.sort(rng.choice(len(labels), size=count, replace=False))
    return labels.take(sel)


def combine(occ3d: Optional[float] = None, silog: Optional[float] = None, sem_ce: Optional[float] = None,
            w_render: float = W_RENDER) -> float:
    """``occ3d + w_render * (silog + sem_ce)``; ``None`` marks a disabled part.

    Callers training from rendering alone pass ``w_render=1``.
    """
    if occ3d is None and silog is None and sem_ce is None:
        raise ValueError("at least one loss part must be enabled")
    total = occ3d or 0.0
    if silog is not None or sem_ce is not None:
        total += w_render * ((silog or 0.0) + (sem_ce or 0.0))
    return total
