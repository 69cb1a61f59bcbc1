"""Time the compiled kernels against the numpy fallback.

Run ``python benchmarks/bench_kernels.py``. Each row reports the median wall
time of ``--repeat`` calls for both backends and their ratio. The GRU rows run
one forward and one backward pass of a single direction (the work done per
direction of the bidirectional encoder); the NMS rows run Gaussian Soft-NMS on
random segments.
"""
import argparse
import statistics
import time

import numpy as np

from avdetect.kernels import get_backend


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def gru_case(backend, T, B, h, rng):
    gx = rng.standard_normal((T, B, 3 * h)) * 0.5
    U = rng.standard_normal((h, 3 * h)) / np.sqrt(h)
    dH = rng.standard_normal((T, B, h))

    def run():
        H, Z, R, C = backend.gru_forward(gx, U)
        backend.gru_backward(dH, H, Z, R, C, U)

    return run


def nms_case(backend, n, rng):
    starts = rng.uniform(0, 100, n)
    ends = starts + rng.uniform(0.5, 5, n)
    scores = rng.uniform(0, 1, n)
    return lambda: backend.soft_nms(starts, ends, scores, True, 0.5, 0.5, 0.001)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n", 1)[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    py = get_backend("python")
    try:
        cc = get_backend("compiled")
    except ImportError as exc:
        print(f"compiled backend unavailable: {exc}")
        return 1
    cases = [
        ("gru T=5 B=3 h=4", lambda b, r: gru_case(b, 5, 3, 4, r)),
        ("gru T=20 B=8 h=32", lambda b, r: gru_case(b, 20, 8, 32, r)),
        ("gru T=20 B=32 h=300", lambda b, r: gru_case(b, 20, 32, 300, r)),
        ("soft-nms n=20", lambda b, r: nms_case(b, 20, r)),
        ("soft-nms n=500", lambda b, r: nms_case(b, 500, r)),
    ]
    print(f"{'case':24s} {'python [ms]':>12s} {'compiled [ms]':>14s} {'speedup':>8s}")
    for name, make in cases:
        t_py = _median_time(make(py, np.random.default_rng(0)), args.repeat)
        t_cc = _median_time(make(cc, np.random.default_rng(0)), args.repeat)
        print(f"{name:24s} {1e3 * t_py:12.3f} {1e3 * t_cc:14.3f} {t_py / t_cc:8.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
