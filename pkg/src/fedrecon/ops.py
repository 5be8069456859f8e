"""Differentiable operators: the basis for the reconstruction and
domain-identifier networks plus the generic tensor algebra the losses use.

Every function takes/returns :class:`fedrecon.autodiff.Tensor` and records
a tape node when an input is live. Convolution lowering goes through the
selected kernel backend (see :mod:`fedrecon.kernels`).
"""

import numpy as np

from fedrecon import kernels
from fedrecon.autodiff import ShapeMismatch, Tensor, make_op

SIGMOID_CLAMP = 1e-7


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- generic algebra ----------------------------------------------------------


def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.data.shape, b.data.shape) from None
    return make_op(
        "add",
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.data.shape, b.data.shape) from None
    return make_op(
        "mul",
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, s):
    s = float(s)
    return make_op("scale", a.data * s, (a,), lambda g: (g * s,))


def tsum(a):
    return make_op("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def tmean(a):
    inv = 1.0 / a.data.size
    return make_op(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, float(g) * inv),)
    )


def tlog(a):
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def index(a, idx):
    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_op("index", np.asarray(a.data[idx]), (a,), back)


# -- activations --------------------------------------------------------------


def relu(x):
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    data = np.where(mask, x.data, slope * x.data)
    return make_op("leaky_relu", data, (x,), lambda g: (g * np.where(mask, 1.0, slope),))


def sigmoid(x):
    # numerically stable logistic, output clamped into [delta, 1-delta]
    # so downstream log terms never see 0 or 1
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    s = np.clip(s, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


# -- structured layers ---------------------------------------------------------


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of NCHW input with (out_c, in_c, kh, kw) kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    n, c, h, wd = x.data.shape
    f, cin, kh, kw = w.data.shape
    if cin != c:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeMismatch("conv2d", x.data.shape, w.data.shape)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)  # (n, c*kh*kw, ho*wo)
    wm = w.data.reshape(f, -1)
    out = np.matmul(wm, cols).reshape(n, f, ho, wo)

    x_live, w_live = x.live, w.live

    def back(g):
        gr = g.reshape(n, f, ho * wo)
        gw = None
        if w_live:
            gw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape)
        gx = None
        if x_live:
            gcols = np.matmul(wm.T, gr)
            gxp = kernels.col2im(gcols, n, c, hp, wp, kh, kw, stride)
            gx = gxp[:, :, padding : hp - padding, padding : wp - padding] if padding else gxp
        return (gx, gw)

    return make_op("conv2d", out, (x, w), back)


def upsample_nearest2(x):
    if x.data.ndim != 4:
        raise ShapeMismatch("upsample_nearest2", x.data.shape)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.data.shape

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op("upsample_nearest2", data, (x,), back)


def maxpool2(x):
    """2x2 max pooling, stride 2; ties route to the first element."""
    if x.data.ndim != 4:
        raise ShapeMismatch("maxpool2", x.data.shape)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeMismatch("maxpool2", x.data.shape)
    h2, w2 = h // 2, w // 2
    blocks = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return make_op("maxpool2", out, (x,), back)


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ShapeMismatch("global_avg_pool", x.data.shape)
    n, c, h, w = x.data.shape
    inv = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to(g[:, :, None, None], (n, c, h, w)) * inv,)

    return make_op("global_avg_pool", out, (x,), back)


def linear(x, w, b):
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch("linear", x.data.shape, w.data.shape)
    if b.data.shape != (w.data.shape[0],):
        raise ShapeMismatch("linear", w.data.shape, b.data.shape)
    out = x.data @ w.data.T + b.data

    def back(g):
        return (g @ w.data, g.T @ x.data, g.sum(axis=0))

    return make_op("linear", out, (x, w, b), back)


def concat_channels(a, b):
    if (
        a.data.ndim != 4
        or b.data.ndim != 4
        or a.data.shape[0] != b.data.shape[0]
        or a.data.shape[2:] != b.data.shape[2:]
    ):
        raise ShapeMismatch("concat_channels", a.data.shape, b.data.shape)
    c1 = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op("concat_channels", out, (a, b), lambda g: (g[:, :c1], g[:, c1:]))


# -- losses --------------------------------------------------------------------


def l1_loss(pred, ref):
    """Total absolute error (the 1-norm of the difference)."""
    if pred.data.shape != ref.data.shape:
        raise ShapeMismatch("l1_loss", pred.data.shape, ref.data.shape)
    d = pred.data - ref.data
    out = np.asarray(np.abs(d).sum())
    sign = np.sign(d)
    return make_op("l1_loss", out, (pred, ref), lambda g: (g * sign, -g * sign))


def bce_terms(p):
    """Length-2 tensor ``[-mean(log p), -mean(log(1-p)))]``.

    The two cross-entropy building blocks over probabilities; ``p`` must
    lie strictly inside (0, 1) (sigmoid's clamp guarantees that for
    network outputs).
    """
    v = p.data
    if np.any(v <= 0.0) or np.any(v >= 1.0):
        raise ValueError("bce_terms: probabilities must lie strictly in (0, 1)")
    inv_n = 1.0 / v.size
    out = np.array([-np.log(v).mean(), -np.log1p(-v).mean()])

    def back(g):
        return ((-g[0] / v + g[1] / (1.0 - v)) * inv_n,)

    return make_op("bce_terms", out, (p,), back)
