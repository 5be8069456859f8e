"""Pure-numpy im2col / col2im, the fallback conv lowering backend.

Array contracts (shared with the Cython backend):

* ``im2col(x, kh, kw, stride)`` takes an already-padded input of shape
  ``(n, c, hp, wp)`` and returns ``(n, c*kh*kw, ho*wo)`` where
  ``ho = (hp - kh)//stride + 1`` and likewise for ``wo``.
* ``col2im(cols, n, c, hp, wp, kh, kw, stride)`` is the adjoint scatter:
  it accumulates a ``(n, c*kh*kw, ho*wo)`` matrix back onto the padded
  input grid.

col2im accumulates kernel offsets in (ki, kj) order; the Cython backend
uses the same order so the two agree bit-for-bit.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    n, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    colsr = cols.reshape(n, c, kh, kw, ho, wo)
    for ki in range(kh):
        i_end = ki + stride * ho
        for kj in range(kw):
            j_end = kj + stride * wo
            out[:, :, ki:i_end:stride, kj:j_end:stride] += colsr[:, :, ki, kj]
    return out
