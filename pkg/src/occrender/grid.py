"""Voxel grid data model and conversions between occupancy logits and density/semantics.

A :class:`VoxelGrid` stores, per voxel, a pre-activation density and ``K``
semantic logits. Density is obtained with a softplus so it stays nonnegative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

P_FREE_EPS = 1e-12


@dataclass(frozen=True)
class SemanticSchema:
    class_names: tuple[str, ...]
    dynamic_class_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "dynamic_class_ids", tuple(sorted(set(int(c) for c in self.dynamic_class_ids))))
        if len(self.class_names) < 1:
            raise ValueError("schema needs at least one class")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        for c in self.dynamic_class_ids:
            if not 0 <= c < len(self.class_names):
                raise ValueError(f"dynamic class id {c} outside 0..{len(self.class_names) - 1}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def free_id(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "dynamic_class_ids": list(self.dynamic_class_ids),
            "free_id": self.free_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SemanticSchema":
        schema = cls(tuple(d["class_names"]), tuple(d.get("dynamic_class_ids", ())))
        if "free_id" in d and int(d["free_id"]) != schema.free_id:
            raise ValueError(f"free_id {d['free_id']} inconsistent with {schema.num_classes} classes")
        return schema


@dataclass(frozen=True)
class GridGeometry:
    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    voxel_size: float

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if len(origin) != 3:
            raise ValueError("origin must be a 3-vector")
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    def voxel_center(self, i: int, j: int, k: int) -> np.ndarray:
        return self.lo + (np.array([i, j, k], dtype=np.float64) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape ``dims + (3,)``."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_json(self) -> dict:
        return {"dims": list(self.dims), "origin": list(self.origin), "voxel_size": self.voxel_size}

    @classmethod
    def from_json(cls, d: dict) -> "GridGeometry":
        return cls(tuple(d["dims"]), tuple(d["origin"]), float(d["voxel_size"]))


@dataclass
class VoxelGrid:
    """Learnable density and semantic logits over an axis-aligned volume.

    ``density_raw`` has shape ``dims`` and ``sem_logits`` has shape
    ``dims + (K,)``; both are float64 in memory.
    """

    geometry: GridGeometry
    schema: SemanticSchema
    density_raw: np.ndarray
    sem_logits: np.ndarray

    def __post_init__(self):
        self.density_raw = np.ascontiguousarray(self.density_raw, dtype=np.float64)
        self.sem_logits = np.ascontiguousarray(self.sem_logits, dtype=np.float64)
        dims = self.geometry.dims
        if self.density_raw.shape != dims:
            raise ValueError(f"density_raw shape {self.density_raw.shape} != dims {dims}")
        if self.sem_logits.shape != dims + (self.schema.num_classes,):
            raise ValueError(f"sem_logits shape {self.sem_logits.shape} != {dims + (self.schema.num_classes,)}")
        if not (np.isfinite(self.density_raw).all() and np.isfinite(self.sem_logits).all()):
            raise ValueError("grid parameters must be finite")

    @classmethod
    def filled(cls, geometry: GridGeometry, schema: SemanticSchema, density_raw: float = 0.0,
               sem_logit: float = 0.0) -> "VoxelGrid":
        dims = geometry.dims
        return cls(geometry, schema, np.full(dims, density_raw), np.full(dims + (schema.num_classes,), sem_logit))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def num_classes(self) -> int:
        return self.schema.num_classes

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.geometry, self.schema, self.density_raw.copy(), self.sem_logits.copy())

    def density(self) -> np.ndarray:
        return softplus(self.density_raw)


@dataclass
class LabelGrid:
    geometry: GridGeometry
    schema: SemanticSchema
    class_id: np.ndarray

    def __post_init__(self):
        self.class_id = np.ascontiguousarray(self.class_id, dtype=np.int64)
        if self.class_id.shape != self.geometry.dims:
            raise ValueError(f"label shape {self.class_id.shape} != dims {self.geometry.dims}")
        if self.class_id.size and (self.class_id.min() < 0 or self.class_id.max() > self.schema.free_id):
            raise ValueError("class ids must lie in 0..K")

    @classmethod
    def empty(cls, geometry: GridGeometry, schema: SemanticSchema) -> "LabelGrid":
        return cls(geometry, schema, np.full(geometry.dims, schema.free_id, dtype=np.int64))

    def occupied(self) -> np.ndarray:
        return self.class_id != self.schema.free_id


@dataclass
class VisibilityMask:
    geometry: GridGeometry
    visible: np.ndarray

    def __post_init__(self):
        self.visible = np.ascontiguousarray(self.visible, dtype=bool)
        if self.visible.shape != self.geometry.dims:
            raise ValueError(f"mask shape {self.visible.shape} != dims {self.geometry.dims}")

    @classmethod
    def none_visible(cls, geometry: GridGeometry) -> "VisibilityMask":
        return cls(geometry, np.zeros(geometry.dims, dtype=bool))


def check_same_geometry(a: GridGeometry, b: GridGeometry) -> None:
    if a.dims != b.dims or not np.allclose(a.origin, b.origin, rtol=0, atol=1e-9) or \
            abs(a.voxel_size - b.voxel_size) > 1e-12:
        raise ValueError(f"geometry mismatch: {a.to_json()} vs {b.to_json()}")


# --- activations -----------------------------------------------------------


def softplus(x):
    """Numerically stable ``ln(1 + e^x)``; works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def density_activation(raw):
    """Return ``(sigma, dsigma/draw)`` for a pre-activation density."""
    return softplus(raw), sigmoid(raw)


def occ_logits_to_nerf(logits: Sequence[float] | np.ndarray, voxel_size: float) -> tuple[float, np.ndarray]:
    """Split ``K+1`` occupancy logits (last = free) into density and semantic logits.

    The density is chosen so that a segment of length ``voxel_size`` through the
    voxel has opacity ``1 - p_free``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    shifted = logits - logits.max()
    log_p_free = shifted[-1] - math.log(np.exp(shifted).sum())
    p_free = min(max(math.exp(log_p_free), P_FREE_EPS), 1.0)
    sigma = -math.log(p_free) / voxel_size
    return sigma + 0.0, logits[:-1].copy()


def grid_to_occ_logits(grid: VoxelGrid) -> np.ndarray:
    """Per-voxel ``K+1`` log-probabilities whose softmax is ``(p_occ*softmax(s), p_free)``."""
    optical = grid.density() * grid.geometry.voxel_size
    log_p_occ = np.log(np.maximum(-np.expm1(-optical), 1e-300))
    s = grid.sem_logits
    lse = _logsumexp(s)
    occ = s - lse[..., None] + log_p_occ[..., None]
    return np.concatenate([occ, -optical[..., None]], axis=-1)


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1)
    return m + np.log(np.exp(x - m[..., None]).sum(axis=-1))


# --- field lookup ----------------------------------------------------------

# pre-activation value reported for points outside the grid: softplus(-inf) = 0
OUTSIDE_RAW = -math.inf


def sample_field(grid: VoxelGrid, p: Sequence[float], mode: str = "trilinear") -> tuple[float, np.ndarray]:
    """Look up ``(density_raw, sem_logits)`` at world point ``p``.

    Points outside the grid bounds are free space: the returned raw value is
    ``-inf`` (density 0) and the logits are zero.
    """
    geo = grid.geometry
    p = np.asarray(p, dtype=np.float64)
    rel = (p - geo.lo) / geo.voxel_size
    dims = geo.dims
    if not all(0.0 <= rel[a] <= dims[a] for a in range(3)):
        return OUTSIDE_RAW, np.zeros(grid.num_classes)
    if mode == "nearest":
        idx = tuple(min(int(math.floor(rel[a])), dims[a] - 1) for a in range(3))
        return float(grid.density_raw[idx]), grid.sem_logits[idx].copy()
    if mode != "trilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    raw = 0.0
    logits = np.zeros(grid.num_classes)
    for (i, j, k), w in trilinear_corners(rel, dims):
        raw += w * grid.density_raw[i, j, k]
        logits += w * grid.sem_logits[i, j, k]
    return float(raw), logits


def trilinear_corners(rel: np.ndarray, dims: Sequence[int]):
    """Yield ``((i, j, k), weight)`` for the 8 voxel centers around grid coordinate ``rel``.

    Indices are clamped at the border, so points between the outermost voxel
    centers and the grid boundary take the border value.
    """
    c = [rel[a] - 0.5 for a in range(3)]
    base = [int(math.floor(c[a])) for a in range(3)]
    frac = [c[a] - base[a] for a in range(3)]
    for dx in (0, 1):
        wx = frac[0] if dx else 1.0 - frac[0]
        i = min(max(base[0] + dx, 0), dims[0] - 1)
        for dy in (0, 1):
            wy = frac[1] if dy else 1.0 - frac[1]
            j = min(max(base[1] + dy, 0), dims[1] - 1)
            for dz in (0, 1):
                wz = frac[2] if dz else 1.0 - frac[2]
                k = min(max(base[2] + dz, 0), dims[2] - 1)
                yield (i, j, k), wx * wy * wz


def grid_to_label(grid: VoxelGrid, occ_threshold: float = 0.5) -> LabelGrid:
    if not 0.0 < occ_threshold < 1.0:
        raise ValueError("occupancy threshold must lie in (0, 1)")
    p_occ = -np.expm1(-grid.density() * grid.geometry.voxel_size)
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    cls = np.argmax(grid.sem_logits, axis=-1)
    cls = np.where(p_occ >= occ_threshold, cls, grid.schema.free_id)
    return LabelGrid(grid.geometry, grid.schema, cls)


def labels_to_grid(labels: LabelGrid, optical_depth: float = 40.0, margin: float = 40.0) -> VoxelGrid:
    """Saturated grid reproducing ``labels``: occupied voxels get ``sigma*voxel_size = optical_depth``."""
    geo = labels.geometry
    occ = labels.occupied()
    sigma = optical_depth / geo.voxel_size
    # inverse softplus; large sigma makes log(expm1) ~= sigma
    raw_occ = sigma + math.log(-math.expm1(-sigma))
    density_raw = np.where(occ, raw_occ, -1e3)
    K = labels.schema.num_classes
    logits = np.zeros(geo.dims + (K,))
    cls = np.where(occ, labels.class_id, 0)
    np.put_along_axis(logits, cls[..., None], margin, axis=-1)
    logits[~occ] = 0.0
    return VoxelGrid(geo, labels.schema, density_raw, logits)


# --- on-disk format --------------------------------------------------------
#
# directory with meta.json + density.f32 + logits.f32 (little-endian float32,
# x-major, z fastest, channel fastest); label grids use labels.u16.


def _write_meta(path: Path, geometry: GridGeometry, schema: SemanticSchema, extra: dict | None = None) -> None:
    meta = {**geometry.to_json(), **schema.to_json()}
    if extra:
        meta.update(extra)
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path: str | Path) -> tuple[GridGeometry, SemanticSchema, dict]:
    path = Path(path)
    meta_file = path / "meta.json"
    if not meta_file.is_file():
        raise FileNotFoundError(f"missing {meta_file}")
    meta = json.loads(meta_file.read_text())
    try:
        return GridGeometry.from_json(meta), SemanticSchema.from_json(meta), meta
    except (KeyError, TypeError) as e:
        raise ValueError(f"{meta_file}: malformed meta ({e!r})") from e


def save_grid(grid: VoxelGrid, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_meta(path, grid.geometry, grid.schema)
    grid.density_raw.astype("<f4").tofile(path / "density.f32")
    grid.sem_logits.astype("<f4").tofile(path / "logits.f32")


def load_grid(path: str | Path) -> VoxelGrid:
    path = Path(path)
    geo, schema, _ = read_meta(path)
    for name in ("density.f32", "logits.f32"):
        if not (path / name).is_file():
            raise FileNotFoundError(f"missing {path / name}")
    n = int(np.prod(geo.dims))
    density = np.fromfile(path / "density.f32", dtype="<f4")
    logits = np.fromfile(path / "logits.f32", dtype="<f4")
    if density.size != n or logits.size != n * schema.num_classes:
        raise ValueError(f"{path}: array sizes do not match meta.json")
    return VoxelGrid(geo, schema, density.reshape(geo.dims).astype(np.float64),
                     logits.reshape(geo.dims + (schema.num_classes,)).astype(np.float64))


def save_labels(labels: LabelGrid, path: str | Path, extra_meta: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_meta(path, labels.geometry, labels.schema, extra_meta)
    labels.class_id.astype("<u2").tofile(path / "labels.u16")


def load_labels(path: str | Path) -> LabelGrid:
    path = Path(path)
    geo, schema, _ = read_meta(path)
    if not (path / "labels.u16").is_file():
        raise FileNotFoundError(f"missing {path / 'labels.u16'}")
    ids = np.fromfile(path / "labels.u16", dtype="<u2")
    if ids.size != int(np.prod(geo.dims)):
        raise ValueError(f"{path}: label count does not match meta.json")
    return LabelGrid(geo, schema, ids.reshape(geo.dims).astype(np.int64))


def save_mask(mask: VisibilityMask, path: str | Path) -> None:
    np.asarray(mask.visible, dtype=np.uint8).tofile(Path(path))


def load_mask(path: str | Path, geometry: GridGeometry) -> VisibilityMask:
    data = np.fromfile(Path(path), dtype=np.uint8)
    if data.size != int(np.prod(geometry.dims)):
        raise ValueError(f"{path}: mask size does not match grid")
    return VisibilityMask(geometry, data.reshape(geometry.dims).astype(bool))
