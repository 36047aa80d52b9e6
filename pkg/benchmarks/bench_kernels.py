"""Compare the numba-jit kernels against the pure-numpy fallbacks.

Run with the default (jit) path:

    python benchmarks/bench_kernels.py

The numpy fallback is what you get with EQUIROB_DISABLE_JIT=1; both
implementations are imported directly here so a single run covers the pair
and verifies they agree numerically.
"""

import time

import numpy as np

from equirob.kernels import (_bilinear_backward_jit, _bilinear_backward_np,
                             _bilinear_forward_jit, _bilinear_forward_np,
                             _conv2d_backward_jit, _conv2d_backward_np,
                             _conv2d_forward_jit, _conv2d_forward_np)
from equirob.transforms import rotation_grid


def timeit(fn, repeats=30):
    fn()  # warm-up (includes jit compilation)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1000.0


def main():
    rng = np.random.default_rng(0)
    n, c, hw = 10, 8, 32
    x = rng.uniform(size=(n, c, hw, hw))
    w = rng.standard_normal((c, c, 3, 3))
    b = rng.standard_normal(c)
    gout = rng.standard_normal((n, c, hw, hw))
    grid = rotation_grid(n, hw, hw, 10.0)

    cases = [
        ("conv2d forward", lambda: _conv2d_forward_jit(x, w, b, 1, 1),
         lambda: _conv2d_forward_np(x, w, b, 1, 1)),
        ("conv2d backward", lambda: _conv2d_backward_jit(gout, x, w, 1, 1),
         lambda: _conv2d_backward_np(gout, x, w, 1, 1)),
        ("bilinear forward", lambda: _bilinear_forward_jit(x, grid),
         lambda: _bilinear_forward_np(x, grid)),
        ("bilinear backward", lambda: _bilinear_backward_jit(gout, grid, hw, hw),
         lambda: _bilinear_backward_np(gout, grid, hw, hw)),
    ]

    print(f"batch={n} channels={c} size={hw}x{hw}, times in ms/call")
    print(f"{'kernel':<20}{'jit':>10}{'numpy':>10}{'speedup':>10}")
    for name, jit_fn, np_fn in cases:
        ja, na = jit_fn(), np_fn()
        ja = ja if isinstance(ja, tuple) else (ja,)
        na = na if isinstance(na, tuple) else (na,)
        for u, v in zip(ja, na):
            np.testing.assert_allclose(u, v, rtol=1e-9, atol=1e-9)
        tj, tn = timeit(jit_fn), timeit(np_fn)
        print(f"{name:<20}{tj:>10.2f}{tn:>10.2f}{tn / tj:>9.1f}x")


if __name__ == "__main__":
    main()
