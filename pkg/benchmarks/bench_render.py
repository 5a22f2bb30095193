"""Time the compiled and pure-Python render kernels on the same ray batch.

    python3 benchmarks/bench_render.py [--rays 4096] [--samples 64] [--repeat 3]

Prints one line per (backend, interpolation, pass) with the best wall time
and the speedup of the compiled kernel over the fallback. Both backends are
also checked to agree on the rendered values.
"""

import argparse
import time

import numpy as np

from occrender import _backend
from occrender.grid import GridGeometry, SemanticSchema, VoxelGrid
from occrender.render import SamplerConfig, backward, forward, prepare_rays


def make_case(n_rays, n_samples, seed=0):
    rng = np.random.default_rng(seed)
    geo = GridGeometry((32, 32, 8), (-6.4, -6.4, -1.2), 0.4)
    schema = SemanticSchema(("a", "b", "c", "d"), ())
    grid = VoxelGrid(geo, schema, rng.normal(-1.0, 2.0, geo.dims), rng.normal(0.0, 1.0, geo.dims + (4,)))
    origins = np.tile([0.0, 0.0, 0.4], (n_rays, 1)) + rng.normal(0, 0.1, (n_rays, 3))
    dirs = rng.normal(size=(n_rays, 3))
    dirs[:, 2] *= 0.3
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = prepare_rays(grid, origins, dirs, SamplerConfig("uniform", n_samples))
    return grid, rays, rng


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--samples", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    grid, rays, rng = make_case(args.rays, args.samples)
    dD = rng.normal(size=len(rays))
    dS = rng.normal(size=(len(rays), grid.num_classes))
    dO = rng.normal(size=len(rays))
    backends = _backend.available()
    print(f"{args.rays} rays x {args.samples} samples, backends: {', '.join(backends)}")
    if "compiled" not in backends:
        print("compiled kernels not built; only the fallback is timed")

    results = {}
    for interp in ("nearest", "trilinear"):
        outs = {}
        for name in backends:
            fwd = best_of(lambda: forward(grid, rays, interp, backend=name), args.repeat)
            bwd = best_of(lambda: backward(grid, rays, dD, dS, dO, interp, backend=name), args.repeat)
            outs[name] = forward(grid, rays, interp, backend=name)
            results[name, interp] = (fwd, bwd)
            print(f"{name:9s} {interp:9s} forward {1e3 * fwd:9.2f} ms   backward {1e3 * bwd:9.2f} ms")
        if len(outs) == 2:
            diff = max(float(np.max(np.abs(a - b))) for a, b in zip(outs["compiled"], outs["python"]))
            fs = results["python", interp][0] / results["compiled", interp][0]
            bs = results["python", interp][1] / results["compiled", interp][1]
            print(f"{'':9s} {interp:9s} speedup forward x{fs:.1f}, backward x{bs:.1f}; max |diff| {diff:.2e}")


if __name__ == "__main__":
    main()
