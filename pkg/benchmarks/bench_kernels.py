"""Compare the compiled kernel core against the numpy fallback.

Times each hot kernel on both backends and reports the median of
`--repeats` runs plus the largest relative difference between the two
results, so speed claims and agreement are measured, not assumed.

Run from the repo root after an editable install:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --size large --repeats 9
"""
import argparse
import statistics
import time

import numpy as np

from gpsft.kernels import available_backends, get_backend

SIZES = {
    "small": {"mm": (64, 64, 64), "bmm": (8, 32, 32, 32), "conv": (4, 4, 8, 16, 16)},
    "medium": {"mm": (256, 256, 256), "bmm": (16, 64, 64, 64), "conv": (8, 8, 16, 32, 32)},
    "large": {"mm": (512, 512, 512), "bmm": (32, 96, 96, 96), "conv": (16, 16, 32, 48, 48)},
}


def rel_diff(a, b):
    denom = max(1.0, float(np.abs(b).max()))
    return float(np.abs(a - b).max()) / denom


def time_call(fn, args, repeats):
    fn(*args)  # warm up
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(size):
    rng = np.random.default_rng(0)
    m, k, n = SIZES[size]["mm"]
    a = rng.normal(size=(m, k))
    b = rng.normal(size=(k, n))
    gout = rng.normal(size=(m, n))
    yield "matmul", "matmul", (a, b)
    yield "matmul_grad_a", "matmul_grad_a", (gout, b)
    yield "matmul_grad_b", "matmul_grad_b", (a, gout)

    B, bm, bk, bn = SIZES[size]["bmm"]
    ba = rng.normal(size=(B, bm, bk))
    bb = rng.normal(size=(B, bk, bn))
    bg = rng.normal(size=(B, bm, bn))
    yield "bmm", "bmm", (ba, bb)
    yield "bmm_grad_a", "bmm_grad_a", (bg, bb)
    yield "bmm_grad_b", "bmm_grad_b", (ba, bg)

    nb, ci, co, h, w = SIZES[size]["conv"]
    x = rng.normal(size=(nb, ci, h, w))
    kern = rng.normal(size=(co, ci, 3, 3))
    out_h = (h + 2 - 3) // 1 + 1
    gy = rng.normal(size=(nb, co, out_h, out_h))
    yield "conv2d_forward", "conv2d_forward", (x, kern, 1, 1)
    yield "conv2d_grad_input", "conv2d_grad_input", (gy, kern, x.shape, 1, 1)
    yield "conv2d_grad_kernel", "conv2d_grad_kernel", (gy, x, kern.shape, 1, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", choices=sorted(SIZES), default="medium")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = available_backends()
    print(f"backends built: {', '.join(backends)}   size={args.size}   "
          f"repeats={args.repeats} (median)")
    if "compiled" not in backends:
        print("compiled core not built; timing the numpy fallback only")

    header = f"{'kernel':<20}" + "".join(f"{b:>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'ratio':>10}{'max rel diff':>14}"
    print(header)
    print("-" * len(header))
    for label, attr, call_args in cases(args.size):
        times = {}
        results = {}
        for name in backends:
            impl = getattr(get_backend(name), attr)
            times[name] = time_call(impl, call_args, args.repeats)
            results[name] = impl(*call_args)
        row = f"{label:<20}" + "".join(f"{times[b] * 1e3:>12.3f}ms" for b in backends)
        if len(backends) == 2:
            ratio = times["python"] / times["compiled"]
            diff = rel_diff(results["compiled"], results["python"])
            row += f"{ratio:>9.2f}x{diff:>14.2e}"
        print(row)


if __name__ == "__main__":
    main()
