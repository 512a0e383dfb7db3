"""Compiled vs numpy kernels on a synthetic rod mask.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--epochs 10]

Prints the best-of-``repeat`` wall time of SOM training and greedy chain
ordering for each available backend, the speedup, and the largest
difference between the backends' outputs.
"""
import argparse
import time

import numpy as np

from rodservo import _kernels
from rodservo.centerline import SomParams, _principal_axis_init, cloud_from_mask
from rodservo.rodsim import GraspPose, RodParams, rasterize_mask, solve_shape, to_pixels


def rod_cloud():
    config = solve_shape(RodParams(), GraspPose((0.45, 0.35)))
    poly = to_pixels(config.positions, 400.0, (150.0, 420.0))
    return cloud_from_mask(rasterize_mask(poly, (640, 480), 6.0, 400.0)).points


def best_time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--neurons", type=int, default=50)
    args = ap.parse_args()

    pts = np.ascontiguousarray(rod_cloud())
    params = SomParams(n_neurons=args.neurons, epochs=args.epochs)
    w0 = np.ascontiguousarray(_principal_axis_init(pts, params.n_neurons))
    rng = np.random.default_rng(0)
    order = np.concatenate([rng.permutation(len(pts)) for _ in range(params.epochs)]).astype(np.int64)
    chain_pts = np.ascontiguousarray(pts[rng.choice(len(pts), 500, replace=False)])
    print(f"cloud {len(pts)} px, {params.n_neurons} neurons, {len(order)} presentations")

    results = {}
    for name, mod in _kernels.backends().items():
        som = lambda: mod.som_train(pts, w0.copy(), order, params.initial_learning_rate,
                                    params.final_learning_rate, params.radius, params.final_radius)
        t_som, w = best_time(som, args.repeat)
        t_ord, o = best_time(lambda: mod.greedy_order(chain_pts, 0), args.repeat)
        results[name] = (t_som, t_ord, w, o)
        print(f"{name:>7}: som_train {t_som * 1e3:9.2f} ms   greedy_order(500) {t_ord * 1e3:8.2f} ms")

    if "cython" in results:
        py, cy = results["python"], results["cython"]
        print(f"speedup: som_train x{py[0] / cy[0]:.1f}   greedy_order x{py[1] / cy[1]:.1f}")
        print(f"max |weights diff| {np.max(np.abs(py[2] - cy[2])):.3e}   "
              f"orders equal: {bool(np.array_equal(py[3], cy[3]))}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
