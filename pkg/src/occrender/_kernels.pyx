# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched ray-marching kernels (forward compositing and analytic backward).

Signatures mirror :mod:`occrender._fallback`. Both functions release the GIL
so callers can run disjoint ray chunks on separate threads.
"""

from libc.math cimport exp, expm1, floor, log1p, fabs
from libc.stdlib cimport malloc, free

import numpy as np

cdef enum:
    MAXC = 8


cdef inline double _softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline int _clampi(long v, long n) nogil:
    if v < 0:
        return 0
    if v >= n:
        return <int>(n - 1)
    return <int>v


cdef inline int _lookup(int nx, int ny, int nz, double lx, double ly, double lz, double vs,
                        double px, double py, double pz, int mode,
                        long* idx, double* w) nogil:
    """Fill corner indices/weights for one point; returns the corner count (0 if outside)."""
    cdef double rx = (px - lx) / vs
    cdef double ry = (py - ly) / vs
    cdef double rz = (pz - lz) / vs
    cdef double cx, cy, cz, fx, fy, fz, wx, wy, wz
    cdef long bx, by, bz
    cdef int i, j, k, dx, dy, dz, n
    if rx < 0 or ry < 0 or rz < 0 or rx > nx or ry > ny or rz > nz:
        return 0
    if mode == 0:
        i = _clampi(<long>floor(rx), nx)
        j = _clampi(<long>floor(ry), ny)
        k = _clampi(<long>floor(rz), nz)
        idx[0] = (<long>i * ny + j) * nz + k
        w[0] = 1.0
        return 1
    cx = rx - 0.5
    cy = ry - 0.5
    cz = rz - 0.5
    bx = <long>floor(cx)
    by = <long>floor(cy)
    bz = <long>floor(cz)
    fx = cx - bx
    fy = cy - by
    fz = cz - bz
    n = 0
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        i = _clampi(bx + dx, nx)
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            j = _clampi(by + dy, ny)
            for dz in range(2):
                wz = fz if dz else 1.0 - fz
                k = _clampi(bz + dz, nz)
                idx[n] = (<long>i * ny + j) * nz + k
                w[n] = wx * wy * wz
                n += 1
    return n


def render_forward(double[:, :, ::1] density_raw, double[:, :, :, ::1] sem_logits, lo, double voxel_size,
                   double[:, ::1] origins, double[:, ::1] dirs, double[:, ::1] z, double[:, ::1] beta,
                   long[::1] n_valid, int mode):
    cdef int R = z.shape[0]
    cdef int N = z.shape[1]
    cdef int nx = density_raw.shape[0], ny = density_raw.shape[1], nz = density_raw.shape[2]
    cdef int K = sem_logits.shape[3]
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    D_arr = np.zeros(R)
    S_arr = np.zeros((R, K))
    O_arr = np.zeros(R)
    cdef double[::1] D = D_arr
    cdef double[:, ::1] S = S_arr
    cdef double[::1] O = O_arr
    cdef const double* dens = &density_raw[0, 0, 0]
    cdef const double* logit = &sem_logits[0, 0, 0, 0]
    cdef long idx[MAXC]
    cdef double w[MAXC]
    cdef int r, n, c, ch, nc
    cdef double raw, sigma, tau, acc, T, alpha, wk, t, d_acc, o_acc
    with nogil:
        for r in range(R):
            acc = 0.0
            d_acc = 0.0
            o_acc = 0.0
            for n in range(n_valid[r]):
                t = z[r, n]
                nc = _lookup(nx, ny, nz, lx, ly, lz, voxel_size,
                             origins[r, 0] + t * dirs[r, 0], origins[r, 1] + t * dirs[r, 1],
                             origins[r, 2] + t * dirs[r, 2], mode, idx, w)
                if nc == 0:
                    continue
                raw = 0.0
                for c in range(nc):
                    raw = raw + w[c] * dens[idx[c]]
                sigma = _softplus(raw)
                tau = sigma * beta[r, n]
                T = exp(-acc)
                alpha = -expm1(-tau)
                wk = T * alpha
                acc = acc + tau
                d_acc = d_acc + wk * t
                o_acc = o_acc + wk
                for c in range(nc):
                    for ch in range(K):
                        S[r, ch] += wk * w[c] * logit[idx[c] * K + ch]
            D[r] = d_acc
            O[r] = o_acc
    return D_arr, S_arr, O_arr


def render_backward(double[:, :, ::1] density_raw, double[:, :, :, ::1] sem_logits, lo, double voxel_size,
                    double[:, ::1] origins, double[:, ::1] dirs, double[:, ::1] z, double[:, ::1] beta,
                    long[::1] n_valid, int mode, double[::1] dD, double[:, ::1] dS, double[::1] dO,
                    double[:, :, ::1] grad_density, double[:, :, :, ::1] grad_logits):
    cdef int R = z.shape[0]
    cdef int N = z.shape[1]
    cdef int nx = density_raw.shape[0], ny = density_raw.shape[1], nz = density_raw.shape[2]
    cdef int K = sem_logits.shape[3]
    cdef double lx = lo[0], ly = lo[1], lz = lo[2]
    cdef const double* dens = &density_raw[0, 0, 0]
    cdef const double* logit = &sem_logits[0, 0, 0, 0]
    cdef double* gdens = &grad_density[0, 0, 0]
    cdef double* glog = &grad_logits[0, 0, 0, 0]
    # per-sample scratch: corner indices/weights, raw, T, tau, weight, cost
    cdef int cap = N if N > 0 else 1
    cdef long* cidx = <long*>malloc(cap * MAXC * sizeof(long))
    cdef double* cw = <double*>malloc(cap * MAXC * sizeof(double))
    cdef int* ncorner = <int*>malloc(cap * sizeof(int))
    cdef double* sraw = <double*>malloc(cap * sizeof(double))
    cdef double* sT = <double*>malloc(cap * sizeof(double))
    cdef double* stau = <double*>malloc(cap * sizeof(double))
    cdef double* sw = <double*>malloc(cap * sizeof(double))
    cdef double* scost = <double*>malloc(cap * sizeof(double))
    cdef int r, n, c, ch, nc
    cdef double raw, sigma, tau, acc, T, wk, t, s_val, cost, after, dsigma, draw, g
    if not (cidx and cw and ncorner and sraw and sT and stau and sw and scost):
        free(cidx); free(cw); free(ncorner); free(sraw); free(sT); free(stau); free(sw); free(scost)
        raise MemoryError()
    try:
        with nogil:
            for r in range(R):
                acc = 0.0
                for n in range(n_valid[r]):
                    t = z[r, n]
                    nc = _lookup(nx, ny, nz, lx, ly, lz, voxel_size,
                                 origins[r, 0] + t * dirs[r, 0], origins[r, 1] + t * dirs[r, 1],
                                 origins[r, 2] + t * dirs[r, 2], mode, &cidx[n * MAXC], &cw[n * MAXC])
                    ncorner[n] = nc
                    if nc == 0:
                        sw[n] = 0.0
                        scost[n] = 0.0
                        stau[n] = 0.0
                        sT[n] = exp(-acc)
                        continue
                    raw = 0.0
                    for c in range(nc):
                        raw = raw + cw[n * MAXC + c] * dens[cidx[n * MAXC + c]]
                    sigma = _softplus(raw)
                    tau = sigma * beta[r, n]
                    T = exp(-acc)
                    wk = T * (-expm1(-tau))
                    acc = acc + tau
                    sraw[n] = raw
                    sT[n] = T
                    stau[n] = tau
                    sw[n] = wk
                    cost = dD[r] * t + dO[r]
                    for ch in range(K):
                        s_val = 0.0
                        for c in range(nc):
                            s_val = s_val + cw[n * MAXC + c] * logit[cidx[n * MAXC + c] * K + ch]
                        cost = cost + dS[r, ch] * s_val
                    scost[n] = cost
                after = 0.0
                for n in range(n_valid[r] - 1, -1, -1):
                    nc = ncorner[n]
                    if nc > 0:
                        dsigma = beta[r, n] * (scost[n] * sT[n] * exp(-stau[n]) - after)
                        draw = dsigma * _sigmoid(sraw[n])
                        wk = sw[n]
                        for c in range(nc):
                            g = cw[n * MAXC + c]
                            gdens[cidx[n * MAXC + c]] += g * draw
                            for ch in range(K):
                                glog[cidx[n * MAXC + c] * K + ch] += g * wk * dS[r, ch]
                    after = after + scost[n] * sw[n]
    finally:
        free(cidx); free(cw); free(ncorner); free(sraw); free(sT); free(stau); free(sw); free(scost)
