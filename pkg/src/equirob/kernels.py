"""Hot numeric kernels: 2-D convolution and bilinear grid sampling.

Two implementations are provided for every kernel: a numba ``@njit`` version
(default) and a pure-numpy version. Set ``EQUIROB_DISABLE_JIT=1`` to force the
numpy path, e.g. on platforms without a working numba install or when
debugging. ``benchmarks/bench_kernels.py`` compares the two.
"""

import os

import numpy as np

USE_JIT = os.getenv("EQUIROB_DISABLE_JIT", "0").lower() not in ("1", "true", "yes")

if USE_JIT:
    from numba import njit
else:  # pragma: no cover - exercised via env flag in the benchmark
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap


# ---------------------------------------------------------------------------
# conv2d (NCHW, zero padding, stride 1 or 2)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _conv2d_forward_jit(x, w, b, stride, pad):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    xp = np.zeros((n, cin, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wid] = x
    out = np.empty((n, cout, oh, ow), dtype=np.float64)
    if stride == 1 and kh == 3 and kw == 3:
        # Fused per-row form: one SIMD pass across the row with all nine taps.
        for ni in range(n):
            for co in range(cout):
                for oi in range(oh):
                    acc = np.full(ow, b[co])
                    for ci in range(cin):
                        r0 = xp[ni, ci, oi]
                        r1 = xp[ni, ci, oi + 1]
                        r2 = xp[ni, ci, oi + 2]
                        wv = w[co, ci]
                        acc += (wv[0, 0] * r0[0:ow] + wv[0, 1] * r0[1:ow + 1]
                                + wv[0, 2] * r0[2:ow + 2]
                                + wv[1, 0] * r1[0:ow] + wv[1, 1] * r1[1:ow + 1]
                                + wv[1, 2] * r1[2:ow + 2]
                                + wv[2, 0] * r2[0:ow] + wv[2, 1] * r2[1:ow + 1]
                                + wv[2, 2] * r2[2:ow + 2])
                    out[ni, co, oi] = acc
        return out
    for ni in range(n):
        for co in range(cout):
            for oi in range(oh):
                acc = np.full(ow, b[co])
                for ci in range(cin):
                    for ki in range(kh):
                        row = xp[ni, ci, oi * stride + ki]
                        for kj in range(kw):
                            acc += w[co, ci, ki, kj] * row[kj:kj + stride * ow:stride]
                out[ni, co, oi] = acc
    return out


@njit(cache=True, fastmath=True)
def _conv2d_backward_jit(gout, x, w, stride, pad):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    xp = np.zeros((n, cin, h + 2 * pad, wid + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wid] = x
    gxp = np.zeros_like(xp)
    gw = np.zeros(w.shape, dtype=np.float64)
    gb = np.zeros(cout, dtype=np.float64)
    if stride == 1 and kh == 3 and kw == 3:
        for ni in range(n):
            for co in range(cout):
                for oi in range(oh):
                    g = gout[ni, co, oi]
                    gb[co] += g.sum()
                    for ci in range(cin):
                        wv = w[co, ci]
                        gwv = gw[co, ci]
                        for ki in range(3):
                            grow = gxp[ni, ci, oi + ki]
                            xrow = xp[ni, ci, oi + ki]
                            w0 = wv[ki, 0]
                            w1 = wv[ki, 1]
                            w2 = wv[ki, 2]
                            s0 = 0.0
                            s1 = 0.0
                            s2 = 0.0
                            for t in range(ow):
                                gt = g[t]
                                grow[t] += w0 * gt
                                grow[t + 1] += w1 * gt
                                grow[t + 2] += w2 * gt
                                s0 += gt * xrow[t]
                                s1 += gt * xrow[t + 1]
                                s2 += gt * xrow[t + 2]
                            gwv[ki, 0] += s0
                            gwv[ki, 1] += s1
                            gwv[ki, 2] += s2
    else:
        for ni in range(n):
            for co in range(cout):
                for oi in range(oh):
                    g = gout[ni, co, oi]
                    gb[co] += g.sum()
                    for ci in range(cin):
                        for ki in range(kh):
                            grow = gxp[ni, ci, oi * stride + ki]
                            xrow = xp[ni, ci, oi * stride + ki]
                            for kj in range(kw):
                                wv = w[co, ci, ki, kj]
                                s = 0.0
                                for t in range(ow):
                                    gt = g[t]
                                    grow[kj + t * stride] += wv * gt
                                    s += gt * xrow[kj + t * stride]
                                gw[co, ci, ki, kj] += s
    gx = gxp[:, :, pad:pad + h, pad:pad + wid].copy()
    return gx, gw, gb


def _pad_input(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv2d_forward_np(x, w, b, stride, pad):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    xp = _pad_input(x, pad)
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    # One vectorized slice-multiply per kernel tap; kh*kw iterations total.
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            out += np.einsum("ncij,oc->noij", patch, w[:, :, ki, kj], optimize=True)
    out += b[None, :, None, None]
    return out


def _conv2d_backward_np(gout, x, w, stride, pad):
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    xp = _pad_input(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride]
            gw[:, :, ki, kj] = np.einsum("noij,ncij->oc", gout, patch, optimize=True)
            gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += np.einsum(
                "noij,oc->ncij", gout, w[:, :, ki, kj], optimize=True)
    gb = gout.sum(axis=(0, 2, 3))
    if pad:
        gx = gxp[:, :, pad:pad + h, pad:pad + wid]
    else:
        gx = gxp
    return gx, gw, gb


# ---------------------------------------------------------------------------
# bilinear grid sampling (align_corners convention, zeros outside, tap mask)
# ---------------------------------------------------------------------------

@njit(cache=True, fastmath=True)
def _bilinear_forward_jit(x, grid):
    n, c, h, w = x.shape
    oh, ow = grid.shape[1], grid.shape[2]
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    mask = np.zeros((n, 1, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(oh):
            for oj in range(ow):
                gx = (grid[ni, oi, oj, 0] + 1.0) * 0.5 * (w - 1)
                gy = (grid[ni, oi, oj, 1] + 1.0) * 0.5 * (h - 1)
                x0 = int(np.floor(gx))
                y0 = int(np.floor(gy))
                fx = gx - x0
                fy = gy - y0
                valid = 1.0
                for dy in range(2):
                    yy = y0 + dy
                    wy = fy if dy == 1 else 1.0 - fy
                    for dx in range(2):
                        xx = x0 + dx
                        wx = fx if dx == 1 else 1.0 - fx
                        wgt = wy * wx
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(c):
                                out[ni, ci, oi, oj] += wgt * x[ni, ci, yy, xx]
                        elif wgt > 0.0:
                            valid = 0.0
                mask[ni, 0, oi, oj] = valid
    return out, mask


@njit(cache=True, fastmath=True)
def _bilinear_backward_jit(gout, grid, h, w):
    n = gout.shape[0]
    c = gout.shape[1]
    oh, ow = grid.shape[1], grid.shape[2]
    gx_arr = np.zeros((n, c, h, w), dtype=np.float64)
    for ni in range(n):
        for oi in range(oh):
            for oj in range(ow):
                gx = (grid[ni, oi, oj, 0] + 1.0) * 0.5 * (w - 1)
                gy = (grid[ni, oi, oj, 1] + 1.0) * 0.5 * (h - 1)
                x0 = int(np.floor(gx))
                y0 = int(np.floor(gy))
                fx = gx - x0
                fy = gy - y0
                for dy in range(2):
                    yy = y0 + dy
                    if yy < 0 or yy >= h:
                        continue
                    wy = fy if dy == 1 else 1.0 - fy
                    for dx in range(2):
                        xx = x0 + dx
                        if xx < 0 or xx >= w:
                            continue
                        wx = fx if dx == 1 else 1.0 - fx
                        wgt = wy * wx
                        for ci in range(c):
                            gx_arr[ni, ci, yy, xx] += wgt * gout[ni, ci, oi, oj]
    return gx_arr


def _bilinear_taps(grid, h, w):
    gx = (grid[..., 0] + 1.0) * 0.5 * (w - 1)
    gy = (grid[..., 1] + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    taps = []
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            taps.append((y0 + dy, x0 + dx, wgt))
    return taps


def _bilinear_forward_np(x, grid):
    n, c, h, w = x.shape
    oh, ow = grid.shape[1], grid.shape[2]
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    mask = np.ones((n, 1, oh, ow), dtype=np.float64)
    for yy, xx, wgt in _bilinear_taps(grid, h, w):
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        mask[:, 0][~inb & (wgt > 0.0)] = 0.0
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        ni = np.arange(n)[:, None, None]
        vals = x[ni, :, yc, xc]  # (n, oh, ow, c)
        out += np.transpose(vals * (wgt * inb)[..., None], (0, 3, 1, 2))
    return out, mask


def _bilinear_backward_np(gout, grid, h, w):
    n, c = gout.shape[0], gout.shape[1]
    gx_arr = np.zeros((n, c, h, w), dtype=np.float64)
    flat = gx_arr.reshape(n, c, h * w)
    for yy, xx, wgt in _bilinear_taps(grid, h, w):
        inb = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        contrib = gout * (wgt * inb)[:, None]
        for ni in range(n):
            np.add.at(flat[ni], (slice(None), idx[ni].ravel()),
                      contrib[ni].reshape(c, -1))
    return gx_arr


if USE_JIT:
    conv2d_forward = _conv2d_forward_jit
    conv2d_backward = _conv2d_backward_jit
    bilinear_forward = _bilinear_forward_jit
    bilinear_backward = _bilinear_backward_jit
else:
    conv2d_forward = _conv2d_forward_np
    conv2d_backward = _conv2d_backward_np
    bilinear_forward = _bilinear_forward_np
    bilinear_backward = _bilinear_backward_np
