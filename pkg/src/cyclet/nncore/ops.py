"""Differentiable forward ops over NHWC activations.

Every op validates its input shapes, computes the output with numpy and
registers a vector-Jacobian closure on the active tape. Ops keep the dtype of
their inputs, which lets the finite-difference checks re-run them in float64.

Convolution padding: ``"same"`` pads ``(k - 1) // 2`` on every side for any
stride, so a stride-2 3x3 conv maps side ``n`` to ``ceil(n / 2)``; ``"valid"``
pads nothing.
"""
from __future__ import annotations

import numpy as np

from cyclet.errors import ShapeError
from cyclet.nncore import _kernels
from cyclet.nncore.tensor import Tensor, record


def _need(t: Tensor | None) -> bool:
    return t is not None and t.requires_grad


def _check_rank(op: str, t: Tensor, rank: int, what: str) -> None:
    if t.data.ndim != rank:
        raise ShapeError(op, f"{what} must be rank {rank}, got shape {t.shape}")


def _resolve_pad(op: str, padding, k: int) -> int:
    if padding == "same":
        return (k - 1) // 2
    if padding == "valid":
        return 0
    if isinstance(padding, int) and padding >= 0:
        return padding
    raise ShapeError(op, f"unknown padding {padding!r}")


def _out_side(op: str, n: int, k: int, stride: int, pad: int) -> int:
    out = (n + 2 * pad - k) // stride + 1
    if out < 1:
        raise ShapeError(op, f"kernel {k} with stride {stride}, pad {pad} does not fit input side {n}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return cols


def _col2im(dcols: np.ndarray, xp_shape, stride: int) -> np.ndarray:
    _, ho, wo, kh, kw, _ = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, D) and ``w`` of shape (D, O)."""
    _check_rank("dense", x, 2, "input")
    _check_rank("dense", w, 2, "weight")
    if x.shape[1] != w.shape[0]:
        raise ShapeError("dense", f"input features {x.shape[1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("dense", f"bias shape {b.shape} != ({w.shape[1]},)")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def vjp(g):
        gx = g @ w.data.T if _need(x) else None
        gw = x.data.T @ g if _need(w) else None
        gb = g.sum(axis=0) if _need(b) else None
        return gx, gw, gb

    return record("dense", out, (x, w, b) if b is not None else (x, w), vjp)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """Full 2-D convolution; ``x`` is (N, H, W, Cin), ``w`` is (kh, kw, Cin, Cout)."""
    _check_rank("conv2d", x, 4, "input")
    _check_rank("conv2d", w, 4, "weight")
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"input channels {c} != kernel in-channels {ci}")
    if b is not None and b.shape != (co,):
        raise ShapeError("conv2d", f"bias shape {b.shape} != ({co},)")
    p = _resolve_pad("conv2d", padding, kh)
    ho = _out_side("conv2d", h, kh, stride, p)
    wo = _out_side("conv2d", wd, kw, stride, p)
    xp = _pad_hw(x.data, p)
    cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, co)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, co)

    def vjp(g):
        g2 = g.reshape(n * ho * wo, co)
        gw = (cols.T @ g2).reshape(w.shape) if _need(w) else None
        gb = g2.sum(axis=0) if _need(b) else None
        gx = None
        if _need(x):
            dcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
            gx = _col2im(dcols, xp.shape, stride)[:, p:p + h, p:p + wd, :]
        return gx, gw, gb

    return record("conv2d", out, (x, w, b) if b is not None else (x, w), vjp)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding="same") -> Tensor:
    """Per-channel spatial convolution; ``w`` is (kh, kw, C)."""
    _check_rank("depthwise_conv2d", x, 4, "input")
    _check_rank("depthwise_conv2d", w, 3, "weight")
    n, h, wd, c = x.shape
    kh, kw, cw = w.shape
    if cw != c:
        raise ShapeError("depthwise_conv2d", f"input channels {c} != kernel channels {cw}")
    if b is not None and b.shape != (c,):
        raise ShapeError("depthwise_conv2d", f"bias shape {b.shape} != ({c},)")
    p = _resolve_pad("depthwise_conv2d", padding, kh)
    ho = _out_side("depthwise_conv2d", h, kh, stride, p)
    wo = _out_side("depthwise_conv2d", wd, kw, stride, p)
    xd = np.ascontiguousarray(x.data)
    wt = np.ascontiguousarray(w.data)
    out = _kernels.dw_forward(xd, wt, np.zeros((n, ho, wo, c), dtype=xd.dtype), stride, p)
    if b is not None:
        out += b.data

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = _kernels.dw_grad_input(g, wt, np.zeros_like(xd), stride, p) if _need(x) else None
        gw = _kernels.dw_grad_weight(g, xd, np.zeros_like(wt), stride, p) if _need(w) else None
        gb = g.sum(axis=(0, 1, 2)) if _need(b) else None
        return gx, gw, gb

    return record("depthwise_conv2d", out, (x, w, b) if b is not None else (x, w), vjp)


def pointwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution; ``w`` is (Cin, Cout)."""
    _check_rank("pointwise_conv2d", x, 4, "input")
    _check_rank("pointwise_conv2d", w, 2, "weight")
    n, h, wd, c = x.shape
    if w.shape[0] != c:
        raise ShapeError("pointwise_conv2d", f"input channels {c} != weight rows {w.shape[0]}")
    co = w.shape[1]
    if b is not None and b.shape != (co,):
        raise ShapeError("pointwise_conv2d", f"bias shape {b.shape} != ({co},)")
    x2 = x.data.reshape(n * h * wd, c)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, co)

    def vjp(g):
        g2 = g.reshape(n * h * wd, co)
        gx = (g2 @ w.data.T).reshape(x.shape) if _need(x) else None
        gw = x2.T @ g2 if _need(w) else None
        gb = g2.sum(axis=0) if _need(b) else None
        return gx, gw, gb

    return record("pointwise_conv2d", out, (x, w, b) if b is not None else (x, w), vjp)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` max pooling. Ties route the gradient to the first max."""
    _check_rank("max_pool2d", x, 4, "input")
    n, h, wd, c = x.shape
    if h % size or wd % size:
        raise ShapeError("max_pool2d", f"spatial dims {h}x{wd} not divisible by pool size {size}")
    ho, wo = h // size, wd // size
    win = x.data.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, size * size)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, wd, c)
        return (gx,)

    return record("max_pool2d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C) spatial mean."""
    _check_rank("global_avg_pool", x, 4, "input")
    n, h, wd, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def vjp(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * wd), x.shape).copy(),)

    return record("global_avg_pool", out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return record("relu", out, (x,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return g, g

    return record("add", a.data + b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} differ")

    def vjp(g):
        return g * b.data, g * a.data

    return record("mul", a.data * b.data, (a, b), vjp)


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full_like(x.data, g.reshape(-1)[0]),)

    return record("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), vjp)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError("softmax", f"need a non-empty last axis, got {x.shape}")
    s = _softmax(x.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", s, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels; fused for stability."""
    _check_rank("softmax_cross_entropy", logits, 2, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError("softmax_cross_entropy", f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("softmax_cross_entropy", f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (logsum - z[rows, labels]).mean()

    def vjp(g):
        p = _softmax(logits.data)
        p[rows, labels] -= 1
        return (p * (g.reshape(-1)[0] / n),)

    return record("softmax_cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp)


OPS = {
    "dense": dense,
    "conv2d": conv2d,
    "depthwise_conv2d": depthwise_conv2d,
    "pointwise_conv2d": pointwise_conv2d,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
    "relu": relu,
    "add": add,
    "mul": mul,
    "sum": sum_all,
    "softmax": softmax,
    "softmax_cross_entropy": softmax_cross_entropy,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch to the op registered under ``kind``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ShapeError(kind, f"unknown op kind; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **attrs)
