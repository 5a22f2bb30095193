"""Ray/box intersection and sample placement along rays."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MIN_NEAR = 0.05


@dataclass(frozen=True)
class RaySamples:
    z: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.z.ndim != 1 or self.z.size < 1 or self.z.shape != self.beta.shape:
            raise ValueError("need at least one sample with matching gaps")


def ray_aabb(origin: Sequence[float], direction: Sequence[float], lo: Sequence[float],
             hi: Sequence[float]) -> Optional[tuple[float, float]]:
    """Slab intersection; returns ``(t_near, t_far)`` with ``t_near >= 0`` or ``None``."""
    t0, t1 = -math.inf, math.inf
    for a in range(3):
        o, d = float(origin[a]), float(direction[a])
        if d == 0.0:
            if o < lo[a] or o > hi[a]:
                return None
            continue
        ta = (lo[a] - o) / d
        tb = (hi[a] - o) / d
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    t0 = max(t0, 0.0)
    if t1 <= t0:
        return None
    return t0, t1


def ray_aabb_batch(origins: np.ndarray, dirs: np.ndarray, lo, hi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`ray_aabb`; returns ``(t_near, t_far, hit)``."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    parallel = dirs == 0.0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    return t_near, t_far, t_far > t_near


def _gaps(z: np.ndarray, last_bin: float) -> np.ndarray:
    # the gap after the last sample is the length of its sampling bin
    beta = np.empty_like(z)
    beta[:-1] = np.diff(z)
    beta[-1] = last_bin
    return beta


def _unit_positions(n: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    k = np.arange(n, dtype=np.float64)
    if rng is None:
        return (k + 0.5) / n
    return (k + rng.random(n)) / n


def sample_uniform(t_near: float, t_far: float, n: int,
                   rng: Optional[np.random.Generator] = None) -> RaySamples:
    """One sample per equal-width bin: midpoints, or one uniform draw per bin when ``rng`` is given."""
    if not (t_far > t_near >= 0.0) or n < 1:
        raise ValueError(f"invalid sampling interval [{t_near}, {t_far}] with n={n}")
    z = t_near + (t_far - t_near) * _unit_positions(n, rng)
    return RaySamples(z, _gaps(z, (t_far - t_near) / n))


def sample_disparity(t_near: float, t_far: float, n: int,
                     rng: Optional[np.random.Generator] = None) -> RaySamples:
    """Samples linear in inverse depth between ``t_near`` and ``t_far`` (denser close by)."""
    t_near = max(t_near, MIN_NEAR)
    if not t_far > t_near or n < 1:
        raise ValueError(f"invalid sampling interval [{t_near}, {t_far}] with n={n}")
    s = _unit_positions(n, rng)
    z = 1.0 / ((1.0 - s) / t_near + s / t_far)
    s_last = (n - 1) / n
    return RaySamples(z, _gaps(z, t_far - 1.0 / ((1.0 - s_last) / t_near + s_last / t_far)))


ENTRY_NUDGE = 1e-7


def voxel_crossings(origin: Sequence[float], direction: Sequence[float], lo: Sequence[float],
                    voxel_size: float, dims: Sequence[int]) -> Optional[tuple[np.ndarray, float]]:
    """Distances at which a ray enters each voxel it traverses, and its exit distance.

    Zero-length segments (ray passing exactly through an edge or corner) are
    merged into the following voxel.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = lo + np.asarray(dims, dtype=np.float64) * voxel_size
    hit = ray_aabb(origin, direction, lo, hi)
    if hit is None:
        return None
    t_near, t_far = hit
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    crossings = [t_near]
    for a in range(3):
        if d[a] == 0.0:
            continue
        planes = lo[a] + voxel_size * np.arange(dims[a] + 1)
        t = (planes - o[a]) / d[a]
        crossings.extend(t[(t > t_near) & (t < t_far)])
    t = np.unique(np.asarray(crossings))
    keep = np.diff(np.append(t, t_far)) > 1e-9
    return t[keep], t_far


def sample_voxels(origin: Sequence[float], direction: Sequence[float], lo: Sequence[float],
                  voxel_size: float, dims: Sequence[int]) -> Optional[RaySamples]:
    """One sample per traversed voxel, placed just past the voxel entry.

    Gaps are segment lengths, so for a piecewise-constant field the
    compositing sums integrate the ray exactly and an opaque voxel renders its
    entry distance as depth.
    """
    res = voxel_crossings(origin, direction, lo, voxel_size, dims)
    if res is None:
        return None
    entries, t_far = res
    z = entries + ENTRY_NUDGE
    beta = np.append(np.diff(z), t_far - z[-1])
    return RaySamples(z, beta)


def sample_voxels_batch(origins: np.ndarray, dirs: np.ndarray, lo: Sequence[float], voxel_size: float,
                        dims: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched :func:`sample_voxels`: ``(z, beta, n_valid)`` padded to the longest ray."""
    lo = np.asarray(lo, dtype=np.float64)
    dims_a = np.asarray(dims)
    hi = lo + dims_a * voxel_size
    R = origins.shape[0]
    t_near, t_far, hit = ray_aabb_batch(origins, dirs, lo, hi)
    # crossing distances with every grid plane, per axis
    cols = [t_near[:, None]]
    with np.errstate(divide="ignore", invalid="ignore"):
        for a in range(3):
            planes = lo[a] + voxel_size * np.arange(dims[a] + 1)
            t = (planes[None, :] - origins[:, a:a + 1]) / dirs[:, a:a + 1]
            cols.append(np.where(np.isfinite(t), t, np.inf))
    t = np.concatenate(cols, axis=1)
    valid = (t >= t_near[:, None]) & (t < t_far[:, None]) & hit[:, None]
    t = np.where(valid, t, np.inf)
    t.sort(axis=1)
    nxt = np.concatenate([t[:, 1:], np.full((R, 1), np.inf)], axis=1)
    nxt = np.where(np.isfinite(nxt), nxt, t_far[:, None])
    keep = np.isfinite(t) & (nxt - t > 1e-9)
    # compact kept entries to the left of each row
    order = np.argsort(~keep, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    n_valid = keep.sum(axis=1)
    width = max(int(n_valid.max(initial=0)), 1)
    t = t[:, :width]
    inside = np.arange(width)[None, :] < n_valid[:, None]
    z = np.where(inside, t + ENTRY_NUDGE, 0.0)
    ends = np.concatenate([z[:, 1:], np.zeros((R, 1))], axis=1)
    last = np.arange(width)[None, :] == (n_valid[:, None] - 1)
    ends = np.where(last, t_far[:, None], ends)
    beta = np.where(inside, ends - z, 0.0)
    return np.ascontiguousarray(z), np.ascontiguousarray(beta), n_valid.astype(np.int64)


SAMPLERS = {"uniform": sample_uniform, "disparity": sample_disparity, "voxel": sample_voxels}


def sample_batch(t_near: np.ndarray, t_far: np.ndarray, n: int, mode: str = "disparity",
                 rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    """Samples for many rays at once: ``(z, beta)`` each of shape ``(R, n)``.

    Row ``r`` equals the scalar sampler applied to ``(t_near[r], t_far[r])``.
    Callers must pass only rays with ``t_far > t_near``.
    """
    if mode not in ("uniform", "disparity"):
        raise ValueError(f"sample_batch handles uniform/disparity, not {mode!r}")
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    R = t_near.shape[0]
    k = np.arange(n, dtype=np.float64)
    s = (k + (0.5 if rng is None else rng.random((R, n)))) / n
    s = np.broadcast_to(s, (R, n))
    s_last = (n - 1) / n
    if mode == "uniform":
        z = t_near + (t_far - t_near) * s
        last = (t_far - t_near)[:, 0] / n
    else:
        near = np.maximum(t_near, MIN_NEAR)
        z = 1.0 / ((1.0 - s) / near + s / t_far)
        last = (t_far - 1.0 / ((1.0 - s_last) / near + s_last / t_far))[:, 0]
    beta = np.empty_like(z)
    beta[:, :-1] = np.diff(z, axis=1)
    beta[:, -1] = last
    return z, beta
