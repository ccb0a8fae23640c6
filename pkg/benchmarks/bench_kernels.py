"""Time the compiled boundary kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py --sizes 64 128 256 --repeat 5
"""
import argparse
import timeit

import numpy as np
from scipy import ndimage

from msa_unet3p import _kernels_py, kernels
from msa_unet3p.data import GeneratorConfig, generate_sample


def masks(size, n, seed):
    cfg = GeneratorConfig(seed=seed, image_size=size, depth=3)
    return [generate_sample(cfg, i).mask.astype(bool) for i in range(n)]


def bench(fn, args, repeat):
    return min(timeit.repeat(lambda: [fn(*a) for a in args], number=1, repeat=repeat)) / len(args)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--masks", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled extension not built; timing the fallback against itself")
    print(f"{'kernel':<16}{'size':>6}{'cython ms':>12}{'python ms':>12}{'speedup':>10}")
    for size in args.sizes:
        ms = masks(size, args.masks, args.seed)
        labelled = [(m, ndimage.label(m, structure=np.ones((3, 3), bool))[0]) for m in ms]
        for name, fast, slow, inputs in (
            ("surface_mask", kernels.surface_mask, _kernels_py.surface_mask, [(m,) for m in ms]),
            ("trace_contours", kernels.trace_contours, _kernels_py.trace_contours, labelled),
        ):
            tf = bench(fast, inputs, args.repeat) * 1e3
            ts = bench(slow, inputs, args.repeat) * 1e3
            print(f"{name:<16}{size:>6}{tf:>12.3f}{ts:>12.3f}{ts / tf:>9.1f}x")


if __name__ == "__main__":
    main()
