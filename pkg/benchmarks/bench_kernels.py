"""Compiled vs pure-python sampling kernels.

    python3 benchmarks/bench_kernels.py [--maps 32] [--side 193] [--repeats 20]

Checks that both backends agree bit for bit, then times NMS sampling and the
box-mean refinement for each.
"""
import argparse
import time

import numpy as np

from saccader import kernels


def timed(fn, repeats):
    fn()
    t = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        t.append(time.perf_counter() - t0)
    return np.median(t), np.percentile(t, 90)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--maps", type=int, default=32)
    ap.add_argument("--side", type=int, default=193)
    ap.add_argument("--n", type=int, default=4)
    ap.add_argument("--window", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    if "compiled" not in kernels.BACKENDS:
        print("compiled backend unavailable; only the python twin will be timed")

    rng = np.random.default_rng(0)
    maps = rng.random((args.maps, args.side, args.side))
    maps /= maps.sum(axis=(1, 2), keepdims=True)
    u = rng.random((args.maps, args.n))
    src = rng.random((args.maps, args.side + args.window - 1, args.side + args.window - 1))

    results = {}
    for name in kernels.BACKENDS:
        out = kernels.nms_sample(maps.copy(), u, 0.1, 25.0, 0.95, backend=name, num_threads=1)
        box = kernels.box_mean(src, args.window, args.window, backend=name)
        results[name] = (out, box)
        t_nms = timed(lambda: kernels.nms_sample(maps.copy(), u, 0.1, 25.0, 0.95, backend=name, num_threads=1),
                      args.repeats)
        t_box = timed(lambda: kernels.box_mean(src, args.window, args.window, backend=name), args.repeats)
        print(f"{name:>9}  nms median {t_nms[0] * 1e3:8.2f} ms (p90 {t_nms[1] * 1e3:8.2f})"
              f"  box_mean median {t_box[0] * 1e3:8.2f} ms (p90 {t_box[1] * 1e3:8.2f})")

    if len(results) == 2:
        (m_c, i_c, f_c), b_c = results["compiled"]
        (m_p, i_p, f_p), b_p = results["python"]
        same = np.array_equal(i_c, i_p) and np.array_equal(m_c, m_p) and np.array_equal(f_c, f_p)
        same = same and np.array_equal(b_c, b_p)
        print("backends bit-identical:", same)


if __name__ == "__main__":
    main()
