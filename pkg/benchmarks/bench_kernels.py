"""Compare the compiled and numpy kernel backends on training-sized tensors.

    python benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from eegssfi.nn import _pykernels, kernels
from eegssfi.nn.model import build_model, loss_and_grads

try:
    from eegssfi.nn import _ckernels
except ImportError:
    _ckernels = None

# (batch, height, width, channels) at the CNV1 and CNV2 inputs of a 64-grid model
SHAPES = [(32, 64, 64, 6), (32, 32, 32, 32)]


def bench_kernel(name, fn, repeat):
    best = min(timeit.repeat(fn, number=1, repeat=repeat))
    return name, best * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=10)
    args = ap.parse_args()
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled kernels not built; timing numpy only")

    rng = np.random.default_rng(0)
    rows = []
    for shape in SHAPES:
        x = rng.standard_normal(shape).astype(np.float32)
        n, h, w, c = shape
        cols = _pykernels.im2col3x3(x)
        out, idx = _pykernels.maxpool2x2_forward(x)
        for bname, mod in backends.items():
            rows.append((shape, bname) + bench_kernel("im2col", lambda: mod.im2col3x3(x), args.repeat))
            rows.append((shape, bname) + bench_kernel("col2im", lambda: mod.col2im3x3(cols, n, h, w, c), args.repeat))
            rows.append((shape, bname) + bench_kernel("pool fwd", lambda: mod.maxpool2x2_forward(x), args.repeat))
            rows.append((shape, bname) + bench_kernel("pool bwd", lambda: mod.maxpool2x2_backward(out, idx), args.repeat))

    print(f"{'shape':>20} {'kernel':>9} " + " ".join(f"{b:>10}" for b in backends) + "  speedup")
    for shape in SHAPES:
        for k in ("im2col", "col2im", "pool fwd", "pool bwd"):
            t = {b: ms for s, b, name, ms in rows if s == shape and name == k}
            sp = f"{t['python'] / t['cython']:7.2f}x" if "cython" in t else ""
            print(f"{str(shape):>20} {k:>9} " + " ".join(f"{t[b]:8.2f}ms" for b in backends) + "  " + sp)

    # one full training step (batch 32, grid 64)
    model = build_model(64, seed=0)
    xb = rng.standard_normal((32, 64, 64, 6)).astype(np.float32)
    yb = rng.integers(0, 3, 32)
    for bname in backends:
        kernels.use_backend(bname)
        _, ms = bench_kernel("step", lambda: loss_and_grads(model, xb, yb, "train", np.random.default_rng(0)),
                             max(3, args.repeat // 3))
        print(f"train step, batch 32, grid 64 [{bname}]: {ms:.1f} ms")


if __name__ == "__main__":
    main()
