"""Compare the compiled and numpy attention kernels.

Run with ``python3 benchmarks/bench_kernels.py``. Times one forward and one
backward call per configuration and reports the best of several repeats.
"""

import argparse
import timeit

import numpy as np

from sinklab import _pykernels

try:
    from sinklab import _ckernels
except ImportError:
    _ckernels = None


def bench(mod, B, L, n, relu, repeat):
    rng = np.random.default_rng(0)
    H = rng.standard_normal((B, L, n))
    W = [0.3 * rng.standard_normal((n, n)) for _ in range(4)]
    G = rng.standard_normal((B, L, n))
    _, A = mod.attention_forward(H, *W, relu)
    fwd = min(timeit.repeat(lambda: mod.attention_forward(H, *W, relu), number=20, repeat=repeat)) / 20
    bwd = min(timeit.repeat(lambda: mod.attention_backward(H, *W, relu, A, G), number=20, repeat=repeat)) / 20
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; only the numpy backend is available")
    print(f"{'B':>4} {'L':>3} {'n':>3} {'kind':>7} | {'numpy fwd':>10} {'bwd':>8} | {'cython fwd':>10} {'bwd':>8} | speedup")
    for B, L, n in ((128, 16, 16), (128, 8, 6), (32, 16, 16), (128, 32, 32)):
        for relu in (False, True):
            pf, pb = bench(_pykernels, B, L, n, relu, args.repeat)
            line = f"{B:>4} {L:>3} {n:>3} {'relu' if relu else 'softmax':>7} | {pf * 1e3:8.3f}ms {pb * 1e3:6.3f}ms |"
            if _ckernels is not None:
                cf, cb = bench(_ckernels, B, L, n, relu, args.repeat)
                line += f" {cf * 1e3:8.3f}ms {cb * 1e3:6.3f}ms | {(pf + pb) / (cf + cb):5.2f}x"
            print(line)


if __name__ == "__main__":
    main()
