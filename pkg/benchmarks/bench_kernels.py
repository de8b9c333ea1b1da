"""Time the compiled box kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --boxes 300 --repeat 20
"""

import argparse
import time

import numpy as np

from srdefect import kernels


def random_boxes(rng, n):
    xy = rng.random((n, 2)) * 0.9
    wh = rng.random((n, 2)) * 0.1 + 0.005
    return np.hstack([xy, np.minimum(xy + wh, 1.0)])


def timeit(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--boxes", type=int, default=300)
    p.add_argument("--gts", type=int, default=50)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    dets = random_boxes(rng, args.boxes)
    gts = random_boxes(rng, args.gts)
    scores = rng.random(args.boxes)
    labels = rng.integers(0, 5, args.boxes)
    gl = rng.integers(0, 5, args.gts)
    order = np.argsort(-scores, kind="stable")

    cases = {
        "iou_matrix": lambda b: kernels.iou_matrix(dets, gts, backend=b),
        "nms": lambda b: kernels.nms(dets, scores, labels, 0.5, backend=b),
        "greedy_match": lambda b: kernels.greedy_match(dets[order], labels[order], gts, gl, 0.5, backend=b),
    }
    backends = sorted(kernels.BACKENDS)
    print(f"active backend: {kernels.BACKEND}; {args.boxes} dets, {args.gts} gts")
    print(f"{'kernel':<14}" + "".join(f"{b + ' (ms)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        t = {b: timeit(lambda: fn(b), args.repeat) for b in backends}
        ref = [fn(b) for b in backends]
        assert all(np.array_equal(ref[0], r) for r in ref[1:]), f"{name}: backends disagree"
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{name:<14}" + "".join(f"{t[b] * 1e3:>16.3f}" for b in backends) + f"{speed:>10.1f}x")


if __name__ == "__main__":
    main()
