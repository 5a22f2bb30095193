"""Volume rendering of depth and semantic logits through a voxel grid.

Per ray, with sample depths ``z_k`` and gaps ``beta_k``::

    T_k   = exp(-sum_{t<k} sigma_t * beta_t)
    alpha = 1 - exp(-sigma_k * beta_k)
    D     = sum_k T_k alpha_k z_k
    S     = sum_k T_k alpha_k s_k

Semantic logits are composited raw; softmax belongs to the loss. The batched
paths run on the kernel backend chosen in :mod:`occrender._backend`;
:func:`oracle_render_ray` is a deliberately naive reimplementation for tests.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .camera import Camera, Ray, pixel_rays
from .grid import VoxelGrid, density_activation, sample_field
from .sampling import RaySamples, ray_aabb_batch, sample_batch, sample_voxels_batch

MODES = {"nearest": 0, "trilinear": 1}


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "disparity"
    n_samples: int = 96
    jitter: bool = False

    def __post_init__(self):
        if self.mode not in ("uniform", "disparity", "voxel"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class RenderedPixel:
    D: float
    S: np.ndarray
    opacity: float


@dataclass
class RenderedImage:
    camera: Camera
    u: np.ndarray
    v: np.ndarray
    D: np.ndarray
    S: np.ndarray
    opacity: np.ndarray

    def __len__(self) -> int:
        return len(self.u)

    def pixel(self, i: int) -> RenderedPixel:
        return RenderedPixel(float(self.D[i]), self.S[i].copy(), float(self.opacity[i]))


@dataclass
class RayBatch:
    """Rays with their samples, laid out for the kernels (rays missing the grid have ``n_valid = 0``)."""

    origins: np.ndarray
    dirs: np.ndarray
    z: np.ndarray
    beta: np.ndarray
    n_valid: np.ndarray

    def __len__(self) -> int:
        return self.z.shape[0]

    def take(self, sel) -> "RayBatch":
        return RayBatch(self.origins[sel], self.dirs[sel], self.z[sel], self.beta[sel], self.n_valid[sel])


@dataclass
class GridGradient:
    density: np.ndarray
    logits: np.ndarray

    def touched(self) -> np.ndarray:
        """Flat indices of voxels that received any gradient."""
        hit = (self.density != 0) | np.any(self.logits != 0, axis=-1)
        return np.flatnonzero(hit)


def compositing_weights(sigma: Sequence[float], beta: Sequence[float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sigma = np.asarray(sigma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    tau = sigma * beta
    # exclusive prefix sum; subtracting tau from an inclusive one can let T rise by an ulp
    T = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]]))
    alpha = -np.expm1(-tau)
    return T, alpha, T * alpha


def prepare_rays(grid: VoxelGrid, origins: np.ndarray, dirs: np.ndarray, sampler: SamplerConfig,
                 rng: Optional[np.random.Generator] = None) -> RayBatch:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    R, N = origins.shape[0], sampler.n_samples
    if sampler.mode == "voxel":
        geo = grid.geometry
        z, beta, n_valid = sample_voxels_batch(origins, dirs, geo.lo, geo.voxel_size, geo.dims)
        return RayBatch(origins, dirs, z, beta, n_valid)
    z = np.zeros((R, N))
    beta = np.zeros((R, N))
    n_valid = np.zeros(R, dtype=np.int64)
    if R:
        t_near, t_far, hit = ray_aabb_batch(origins, dirs, grid.geometry.lo, grid.geometry.hi)
        if sampler.mode == "disparity":
            hit &= t_far > np.maximum(t_near, 0.05)
        if hit.any():
            zr, br = sample_batch(t_near[hit], t_far[hit], N, sampler.mode, rng if sampler.jitter else None)
            z[hit] = zr
            beta[hit] = br
            n_valid[hit] = N
    return RayBatch(origins, dirs, z, beta, n_valid)


def _single(ray: Ray, samples: RaySamples) -> RayBatch:
    n = samples.z.size
    return RayBatch(np.asarray(ray.origin, dtype=np.float64).reshape(1, 3).copy(),
                    np.asarray(ray.dir, dtype=np.float64).reshape(1, 3).copy(),
                    np.ascontiguousarray(samples.z, dtype=np.float64).reshape(1, n),
                    np.ascontiguousarray(samples.beta, dtype=np.float64).reshape(1, n),
                    np.array([n], dtype=np.int64))


def _chunks(n: int, threads: int) -> list[slice]:
    threads = max(1, min(threads, n)) if n else 1
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [slice(bounds[i], bounds[i + 1]) for i in range(threads)]


def forward(grid: VoxelGrid, rays: RayBatch, interp: str = "trilinear", threads: int = 1,
            backend: Optional[str] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render ``(D, S, opacity)`` for every ray of the batch."""
    kern = _backend.get(backend)
    mode = MODES[interp]
    lo = np.asarray(grid.geometry.origin, dtype=np.float64)
    vs = grid.geometry.voxel_size

    def run(sl: slice):
        return kern.render_forward(grid.density_raw, grid.sem_logits, lo, vs, rays.origins[sl], rays.dirs[sl],
                                   rays.z[sl], rays.beta[sl], rays.n_valid[sl], mode)

    parts = _map(run, _chunks(len(rays), threads))
    if len(parts) == 1:
        return parts[0]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def backward(grid: VoxelGrid, rays: RayBatch, dD: np.ndarray, dS: np.ndarray, dO: np.ndarray,
             interp: str = "trilinear", threads: int = 1, backend: Optional[str] = None) -> GridGradient:
    """Gradient of a loss w.r.t. the grid parameters, given its gradients w.r.t. ``(D, S, opacity)``.

    Each chunk scatters into its own buffer; buffers are summed in chunk order
    so the result depends only on the thread count, never on scheduling.
    """
    kern = _backend.get(backend)
    mode = MODES[interp]
    lo = np.asarray(grid.geometry.origin, dtype=np.float64)
    vs = grid.geometry.voxel_size
    dD = np.ascontiguousarray(dD, dtype=np.float64).reshape(-1)
    dS = np.ascontiguousarray(dS, dtype=np.float64).reshape(len(rays), grid.num_classes)
    dO = np.ascontiguousarray(dO, dtype=np.float64).reshape(-1)

    def run(sl: slice):
        gd = np.zeros(grid.dims)
        gl = np.zeros(grid.sem_logits.shape)
        kern.render_backward(grid.density_raw, grid.sem_logits, lo, vs, rays.origins[sl], rays.dirs[sl],
                             rays.z[sl], rays.beta[sl], rays.n_valid[sl], mode,
                             dD[sl], dS[sl], dO[sl], gd, gl)
        return gd, gl

    parts = _map(run, _chunks(len(rays), threads))
    gd, gl = parts[0]
    for pd, pl in parts[1:]:
        gd += pd
        gl += pl
    return GridGradient(gd, gl)


def _map(fn, chunks):
    if len(chunks) == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))


def render_ray(grid: VoxelGrid, ray: Ray, samples: RaySamples, interp: str = "trilinear",
               backend: Optional[str] = None) -> RenderedPixel:
    D, S, O = forward(grid, _single(ray, samples), interp, backend=backend)
    return RenderedPixel(float(D[0]), S[0], float(O[0]))


def render_ray_backward(grid: VoxelGrid, ray: Ray, samples: RaySamples, dL_dD: float,
                        dL_dS: Sequence[float], dL_dOpacity: float, interp: str = "trilinear",
                        backend: Optional[str] = None) -> GridGradient:
    return backward(grid, _single(ray, samples), np.array([dL_dD], dtype=np.float64),
                    np.asarray(dL_dS, dtype=np.float64).reshape(1, -1), np.array([dL_dOpacity], dtype=np.float64),
                    interp, backend=backend)


def oracle_render_ray(grid: VoxelGrid, ray: Ray, samples: RaySamples, interp: str = "trilinear") -> RenderedPixel:
    """Slow reference: explicit loops, transmittance re-summed from scratch for each sample."""
    z = [float(x) for x in samples.z]
    beta = [float(x) for x in samples.beta]
    origin = np.asarray(ray.origin, dtype=np.float64)
    direction = np.asarray(ray.dir, dtype=np.float64)
    sigmas = []
    logits = []
    for zk in z:
        raw, s = sample_field(grid, origin + zk * direction, interp)
        sigma = 0.0 if raw == -math.inf else density_activation(raw)[0]
        sigmas.append(sigma)
        logits.append(s)
    D = 0.0
    S = np.zeros(grid.num_classes)
    opacity = 0.0
    for k in range(len(z)):
        optical = 0.0
        for t in range(k):
            optical += sigmas[t] * beta[t]
        T = math.exp(-optical)
        alpha = 1.0 - math.exp(-sigmas[k] * beta[k])
        D += T * alpha * z[k]
        S = S + T * alpha * logits[k]
        opacity += T * alpha
    return RenderedPixel(D, S, opacity)


def render_image(grid: VoxelGrid, cam: Camera, u: Sequence[float], v: Sequence[float],
                 sampler: SamplerConfig = SamplerConfig(), interp: str = "trilinear", threads: int = 1,
                 rng: Optional[np.random.Generator] = None, backend: Optional[str] = None) -> RenderedImage:
    """Render the given pixel coordinates (continuous; pixel centers sit at ``i + 0.5``)."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.size and (u.min() < 0 or v.min() < 0 or u.max() >= cam.width or v.max() >= cam.height):
        raise ValueError("pixel coordinates out of image bounds")
    if u.size != np.unique(np.stack([u, v], axis=1), axis=0).shape[0]:
        raise ValueError("pixel list contains duplicates")
    if not u.size:
        return RenderedImage(cam, u, v, np.zeros(0), np.zeros((0, grid.num_classes)), np.zeros(0))
    origins, dirs = pixel_rays(cam, u, v)
    rays = prepare_rays(grid, origins, dirs, sampler, rng)
    D, S, O = forward(grid, rays, interp, threads, backend)
    return RenderedImage(cam, u, v, D, S, O)
