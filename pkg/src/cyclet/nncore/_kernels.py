"""Direct-loop depthwise convolution kernels (NHWC), compiled with numba.

Strided numpy slices make depthwise convolution memory-bound; these loops
touch each activation once per tap. Accumulation order is fixed, so results
are deterministic. All three kernels take the symmetric padding ``pad``.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def dw_forward(x, w, out, stride, pad):
    n, h, wd, c = x.shape
    kh, kw, _ = w.shape
    _, ho, wo, _ = out.shape
    for b in range(n):
        for oy in range(ho):
            for i in range(kh):
                iy = oy * stride + i - pad
                if iy < 0 or iy >= h:
                    continue
                for ox in range(wo):
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= wd:
                            continue
                        for ch in range(c):
                            out[b, oy, ox, ch] += x[b, iy, ix, ch] * w[i, j, ch]
    return out


@numba.njit(cache=True)
def dw_grad_input(g, w, gx, stride, pad):
    n, h, wd, c = gx.shape
    kh, kw, _ = w.shape
    _, ho, wo, _ = g.shape
    for b in range(n):
        for oy in range(ho):
            for i in range(kh):
                iy = oy * stride + i - pad
                if iy < 0 or iy >= h:
                    continue
                for ox in range(wo):
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= wd:
                            continue
                        for ch in range(c):
                            gx[b, iy, ix, ch] += g[b, oy, ox, ch] * w[i, j, ch]
    return gx


@numba.njit(cache=True)
def dw_grad_weight(g, x, gw, stride, pad):
    n, h, wd, c = x.shape
    kh, kw, _ = gw.shape
    _, ho, wo, _ = g.shape
    for b in range(n):
        for oy in range(ho):
            for i in range(kh):
                iy = oy * stride + i - pad
                if iy < 0 or iy >= h:
                    continue
                for ox in range(wo):
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= wd:
                            continue
                        for ch in range(c):
                            gw[i, j, ch] += g[b, oy, ox, ch] * x[b, iy, ix, ch]
    return gw


def warmup() -> None:
    """Compile (or load from cache) the float32 specializations."""
    x = np.zeros((1, 2, 2, 1), np.float32)
    w = np.zeros((3, 3, 1), np.float32)
    out = np.zeros((1, 2, 2, 1), np.float32)
    dw_forward(x, w, out, 1, 1)
    dw_grad_input(out, w, np.zeros_like(x), 1, 1)
    dw_grad_weight(out, x, np.zeros_like(w), 1, 1)
