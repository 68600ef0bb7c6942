"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--size 256]

The backend is chosen per call from FACEFIT_NO_NUMBA, so both run in one
process.  Each kernel is warmed up once (numba compile) before timing and
the outputs of the two backends are compared.
"""
import argparse
import os
import time

import numpy as np

from facefit import correspond, fitter, synth
from facefit.evalbench.bvh import build_bvh, query_bvh
from facefit.model import vertex_normals
from facefit.raster import rasterize


def _timed(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _flatten(out):
    if isinstance(out, (tuple, list)):
        return np.concatenate([_flatten(o) for o in out])
    if hasattr(out, "__dict__"):
        return np.concatenate([_flatten(v) for v in vars(out).values() if isinstance(v, np.ndarray)])
    return np.asarray(out, dtype=np.float64).ravel()


def cases(size):
    rng = np.random.default_rng(0)
    model = synth.make_sphere_head()
    face = synth.random_face(model, rng)
    cam = synth.random_camera(rng, size, size)
    inputs = synth.render_inputs(model, face, cam, size, size)
    from facefit.model import forward
    V = forward(model, face)
    index = correspond.build_uv_index(inputs.uv_map, inputs.mask)
    problem = fitter.ImageProblem(model, inputs, fitter.FitConfig())
    theta = problem.layout.pack(face, cam)
    bvh = build_bvh(V * 1000, model.triangles)
    pts = rng.uniform(-120, 120, (20000, 3))
    return {
        "rasterize": lambda: rasterize(V, model.triangles, cam, size, size),
        "uv nearest (all vertices)": lambda: correspond.find_correspondences(model, index),
        "vertex normals": lambda: vertex_normals(V, model.triangles),
        "energy + gradient": lambda: problem.evaluate(theta)[:2],
        "bvh query (20k points)": lambda: query_bvh(bvh, pts).distance,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description="numba vs numpy kernel timings")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=256, help="image side in pixels")
    args = ap.parse_args(argv)
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  max|diff|")
    for name, fn in cases(args.size).items():
        os.environ["FACEFIT_NO_NUMBA"] = "0"
        fn()
        t_nb, out_nb = _timed(fn, args.repeat)
        os.environ["FACEFIT_NO_NUMBA"] = "1"
        t_np, out_np = _timed(fn, args.repeat)
        a, b = _flatten(out_nb), _flatten(out_np)
        both = np.isfinite(a) & np.isfinite(b)
        diff = np.abs(a[both] - b[both]).max(initial=0.0) if a.size == b.size else np.nan
        print(f"{name:28s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.1f}x  {diff:.2e}")
    os.environ.pop("FACEFIT_NO_NUMBA", None)


if __name__ == "__main__":
    main()
