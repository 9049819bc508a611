"""Time the compiled and pure-Python pixel kernels side by side.

    python3 benchmarks/bench_kernels.py [--size 224] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from addnet.facegen import template_landmarks
from addnet.geometry import SimilarityTransform
from addnet.kernels import available_backends
from addnet.maskgen import convex_hull, gaussian_kernel1d


def cases(size):
    rng = np.random.default_rng(0)
    hull = convex_hull(template_landmarks((size, size)).points)
    image = rng.random((size, size, 3))
    plane = rng.random((size, size))
    kernel = gaussian_kernel1d(0.02 * size)
    inverse = SimilarityTransform(1.1, 0.2, np.array([3.0, -2.0])).inverse().matrix[:2]
    return {
        "fill_convex": lambda k: k.fill_convex(hull, size, size),
        "blur_separable": lambda k: k.blur_separable(plane, kernel),
        "warp_bilinear": lambda k: k.warp_bilinear(image, inverse, size, size),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=224)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = available_backends()
    names = list(backends)
    print(f"{args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{n + ' ms':>14}" for n in names) + ("   speedup" if len(names) > 1 else ""))
    for label, fn in cases(args.size).items():
        times = []
        for name in names:
            mod = backends[name]
            fn(mod)
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3)
        row = f"{label:<16}" + "".join(f"{t:>14.3f}" for t in times)
        if len(times) > 1:
            row += f"{times[names.index('python')] / times[names.index('cython')]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
