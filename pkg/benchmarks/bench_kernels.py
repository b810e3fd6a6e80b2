"""Timing comparison of the compiled kernels against their numpy fallbacks.

Run with:  python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from saldet import _accel


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    labels = rng.integers(0, 4096, size=(1024, 1024)).astype(np.int32)
    values = rng.normal(size=(1024, 1024))
    mask = rng.random((512, 512)) < 0.6
    m = 1500
    x0 = rng.integers(0, 200, size=m)
    y0 = rng.integers(0, 200, size=m)
    boxes = np.stack(
        [x0, y0, x0 + rng.integers(1, 60, size=m),
         y0 + rng.integers(1, 60, size=m)], axis=1
    ).astype(np.int64)
    return [
        ("adjacency_matrix", _accel.adjacency_matrix_py,
         _accel._adjacency_matrix, (labels, 4096)),
        ("superpixel_sums", _accel.superpixel_sums_py,
         _accel._superpixel_sums, (labels, values, 4096)),
        ("superpixel_counts", _accel.superpixel_counts_py,
         _accel._superpixel_counts, (labels, 4096)),
        ("connected_components", _accel.connected_components_py,
         _accel._connected_components, (mask,)),
        ("nms_keep", _accel.nms_keep_py, _accel._nms_keep, (boxes, 0.4)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    rows = []
    for name, py_fn, nb_fn, fn_args in cases(rng):
        t_py = best_of(py_fn, fn_args, args.repeats)
        if _accel.NUMBA_AVAILABLE:
            nb_fn(*fn_args)  # trigger compilation before timing
            t_nb = best_of(nb_fn, fn_args, args.repeats)
            rows.append((name, t_py, t_nb, t_py / t_nb))
        else:
            rows.append((name, t_py, None, None))

    print(f"{'kernel':<22}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>10}")
    for name, t_py, t_nb, ratio in rows:
        if t_nb is None:
            print(f"{name:<22}{t_py * 1e3:>12.3f}{'n/a':>12}{'n/a':>10}")
        else:
            print(f"{name:<22}{t_py * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{ratio:>9.1f}x")
    if not _accel.NUMBA_AVAILABLE:
        print("numba not installed; only the fallback path was timed")


if __name__ == "__main__":
    main()
