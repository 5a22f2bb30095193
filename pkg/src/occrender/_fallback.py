"""Pure numpy implementation of the batched ray-marching kernels.

Used when the compiled extension is unavailable, and as the second backend in
the equivalence tests. Both backends share the signatures below.
"""

from __future__ import annotations

import numpy as np

NEAREST = 0
TRILINEAR = 1

_OFFSETS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64)


def _lookup(dims, lo, voxel_size, origins, dirs, z, n_valid, mode):
    """Flat voxel indices ``(R, N, C)`` and interpolation weights for all samples."""
    R, N = z.shape
    pts = origins[:, None, :] + z[..., None] * dirs[:, None, :]
    rel = (pts - lo) / voxel_size
    dims_a = np.asarray(dims)
    inside = np.all((rel >= 0.0) & (rel <= dims_a), axis=-1)
    inside &= np.arange(N)[None, :] < n_valid[:, None]
    strides = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    if mode == NEAREST:
        ijk = np.minimum(np.floor(rel).astype(np.int64), dims_a - 1)
        ijk = np.clip(ijk, 0, dims_a - 1)
        idx = (ijk @ strides)[..., None]
        w = inside[..., None].astype(np.float64)
        return idx, w, inside
    c = rel - 0.5
    base = np.floor(c)
    frac = c - base
    base = base.astype(np.int64)
    corners = base[..., None, :] + _OFFSETS  # (R, N, 8, 3)
    corners = np.clip(corners, 0, dims_a - 1)
    idx = corners @ strides
    wsel = np.where(_OFFSETS.astype(bool), frac[..., None, :], 1.0 - frac[..., None, :])
    w = wsel.prod(axis=-1) * inside[..., None]
    return idx, w, inside


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _fields(density_raw, sem_logits, idx, w, inside):
    K = sem_logits.shape[-1]
    raw = (density_raw.reshape(-1)[idx] * w).sum(axis=-1)
    logits = np.einsum("rnc,rnck->rnk", w, sem_logits.reshape(-1, K)[idx])
    sigma = np.where(inside, _softplus(raw), 0.0)
    return raw, sigma, logits


def _weights(sigma, beta):
    tau = sigma * beta
    acc = np.zeros_like(tau)
    np.cumsum(tau[:, :-1], axis=1, out=acc[:, 1:])
    T = np.exp(-acc)
    alpha = -np.expm1(-tau)
    return T, alpha, T * alpha


def render_forward(density_raw, sem_logits, lo, voxel_size, origins, dirs, z, beta, n_valid, mode):
    """Composite depth ``D (R,)``, semantic logits ``S (R, K)`` and opacity ``(R,)``."""
    dims = density_raw.shape
    idx, w, inside = _lookup(dims, np.asarray(lo), voxel_size, origins, dirs, z, n_valid, mode)
    _, sigma, logits = _fields(density_raw, sem_logits, idx, w, inside)
    _, _, wk = _weights(sigma, beta)
    D = (wk * z).sum(axis=1)
    S = np.einsum("rn,rnk->rk", wk, logits)
    O = wk.sum(axis=1)
    return D, S, O


def render_backward(density_raw, sem_logits, lo, voxel_size, origins, dirs, z, beta, n_valid, mode,
                    dD, dS, dO, grad_density, grad_logits):
    """Accumulate ``dL/d(density_raw)`` and ``dL/d(sem_logits)`` into the given buffers."""
    dims = density_raw.shape
    K = sem_logits.shape[-1]
    idx, w, inside = _lookup(dims, np.asarray(lo), voxel_size, origins, dirs, z, n_valid, mode)
    raw, sigma, logits = _fields(density_raw, sem_logits, idx, w, inside)
    T, alpha, wk = _weights(sigma, beta)
    c = dD[:, None] * z + np.einsum("rk,rnk->rn", dS, logits) + dO[:, None]
    cw = c * wk
    after = np.cumsum(cw[:, ::-1], axis=1)[:, ::-1] - cw
    T_next = T * (1.0 - alpha)
    dsigma = beta * (c * T_next - after)
    draw = np.where(inside, dsigma * _sigmoid(np.where(inside, raw, 0.0)), 0.0)
    n_vox = grad_density.size
    flat_idx = idx.reshape(-1)
    grad_density.reshape(-1)[:] += np.bincount(flat_idx, weights=(w * draw[..., None]).reshape(-1),
                                               minlength=n_vox)
    dlog = dS[:, None, :] * wk[..., None]  # (R, N, K)
    contrib = w[..., None] * dlog[:, :, None, :]  # (R, N, C, K)
    chan_idx = (idx[..., None] * K + np.arange(K)).reshape(-1)
    grad_logits.reshape(-1)[:] += np.bincount(chan_idx, weights=contrib.reshape(-1), minlength=n_vox * K)
