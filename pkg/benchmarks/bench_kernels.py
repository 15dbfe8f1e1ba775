"""Time the numba kernels against their pure-numpy fallbacks.

Run directly (``python benchmarks/bench_kernels.py``) or via the CLI
(``stylefield benchmark``).  Sizes mirror the training workloads: a ray
batch from Stage I and the Stage II decoder convolution.
"""

import time

import numpy as np

from stylefield import kernels as K
from stylefield.backend import HAS_NUMBA


def _time(fn, *args, repeat=5):
    fn(*args)  # warm up (and JIT-compile on the numba path)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def run_benchmark():
    rng = np.random.default_rng(0)
    rows = []

    grid = rng.normal(size=(64, 64, 64, 3)).astype(np.float32)
    pts = rng.uniform(0, 63, (200_000, 3)).astype(np.float32)
    dout = rng.normal(size=(200_000, 3)).astype(np.float32)
    rows.append(("trilinear fwd 200k pts", K.trilinear_forward_numpy, (grid, pts)))
    rows.append(
        ("trilinear bwd 200k pts", K.trilinear_backward_numpy, (grid.shape, pts, dout))
    )

    sig = rng.uniform(0, 3, (2048, 128)).astype(np.float32)
    delta = rng.uniform(0.01, 0.1, (2048, 128)).astype(np.float32)
    rgb = rng.uniform(0, 1, (2048, 128, 3)).astype(np.float32)
    bg = np.ones(3, dtype=np.float32)
    rows.append(("composite fwd 2048x128", K.composite_forward_numpy, (sig, delta, rgb, bg)))
    _, w, _, tt = K.composite_forward_numpy(sig, delta, rgb, bg)
    dpix = rng.normal(size=(2048, 3)).astype(np.float32)
    rows.append(
        ("composite bwd 2048x128", K.composite_backward_numpy, (sig, delta, rgb, bg, w, tt, dpix))
    )

    img = rng.uniform(0, 1, (256, 256, 3)).astype(np.float32)
    ys = rng.uniform(0, 255, 100_000).astype(np.float32)
    xs = rng.uniform(0, 255, 100_000).astype(np.float32)
    rows.append(("bilinear fwd 100k", K.bilinear_forward_numpy, (img, ys, xs)))

    x = rng.normal(size=(1, 64, 72, 96)).astype(np.float32)
    wgt = rng.normal(size=(32, 64, 3, 3)).astype(np.float32)
    bias = rng.normal(size=32).astype(np.float32)
    rows.append(("conv2d 64->32 @72x96 (im2col)", K.conv2d_forward_numpy, (x, wgt, bias)))

    numba_map = {}
    if HAS_NUMBA:
        numba_map = {
            "trilinear fwd 200k pts": (K.trilinear_forward_numba, (grid, pts)),
            "trilinear bwd 200k pts": (K.trilinear_backward_numba, (grid.shape, pts, dout)),
            "composite fwd 2048x128": (K.composite_forward_numba, (sig, delta, rgb, bg)),
            "composite bwd 2048x128": (
                K.composite_backward_numba, (sig, delta, rgb, bg, w, tt, dpix)
            ),
            "bilinear fwd 100k": (K.bilinear_forward_numba, (img, ys, xs)),
            "conv2d 64->32 @72x96 (im2col)": (K.conv2d_forward_numba, (x, wgt, bias)),
        }

    print(f"{'kernel':36} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, np_fn, np_args in rows:
        t_np = _time(np_fn, *np_args)
        if name in numba_map:
            nb_fn, nb_args = numba_map[name]
            t_nb = _time(nb_fn, *nb_args)
            print(f"{name:36} {t_np*1e3:9.2f}ms {t_nb*1e3:9.2f}ms {t_np/t_nb:7.2f}x")
        else:
            print(f"{name:36} {t_np*1e3:9.2f}ms {'-':>10} {'-':>8}")


if __name__ == "__main__":
    run_benchmark()
