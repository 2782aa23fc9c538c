"""Compare the compiled and pure-numpy step kernels.

Runs the same ensemble under both backends, reports throughput in
path-steps per second, and checks that the trajectories agree (they are
identical up to libm rounding in the Box-Muller transform).

Usage: python benchmarks/bench_backends.py [--paths P] [--steps N]
"""

import argparse
import os
import time

import numpy as np


def run(backend, model, paths, steps):
    os.environ["ERGOKIT_BACKEND"] = backend
    from ergokit.core import ModelParams, Potential
    from ergokit.integrators import IntegratorConfig, simulate_ensemble

    rng = np.random.default_rng(12345)
    if model == "langevin":
        params = ModelParams(model="langevin", d=1, alpha=1.0, beta=1.0)
        phi = Potential.quadratic([0.5])
        x0 = rng.standard_normal((paths, 1))
        om0 = rng.standard_normal((paths, 1))
        obs = ("x", 0)
        cfg = IntegratorConfig(scheme="baoab", dt=1e-3, seed=99)
    else:
        params = ModelParams(model="fiber", d=2, sigma=1.0)
        phi = Potential.quadratic([0.5, 0.5])
        x0 = rng.standard_normal((paths, 2))
        g = rng.standard_normal((paths, 2))
        om0 = g / np.linalg.norm(g, axis=1, keepdims=True)
        obs = ("omega", 0)
        cfg = IntegratorConfig(scheme="tangent-heun", dt=1e-3, seed=99)

    # warm-up compiles the kernels outside the timed section
    simulate_ensemble(params, phi, cfg, x0[:64], om0[:64], [4], obs, 0.0)
    t0 = time.perf_counter()
    out = simulate_ensemble(params, phi, cfg, x0, om0, [steps], obs, 0.0)
    dt = time.perf_counter() - t0
    return dt, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=4000)
    ap.add_argument("--steps", type=int, default=4000)
    args = ap.parse_args()

    print(f"{'model':<10} {'backend':<8} {'seconds':>9} {'path-steps/s':>14}")
    for model in ("langevin", "fiber"):
        results = {}
        for backend in ("numba", "numpy"):
            secs, out = run(backend, model, args.paths, args.steps)
            results[backend] = out
            rate = args.paths * args.steps / secs
            print(f"{model:<10} {backend:<8} {secs:9.3f} {rate:14.3e}")
        dx = np.max(np.abs(results["numba"]["snaps_x"]
                           - results["numpy"]["snaps_x"]))
        print(f"{model:<10} max |x| discrepancy between backends: {dx:.3e}")
    os.environ.pop("ERGOKIT_BACKEND", None)


if __name__ == "__main__":
    main()
