"""Compiled loops for max pooling, the one op numpy cannot vectorise cheaply."""
from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def maxpool_forward(x, kh, kw, sh, sw):
    b, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.empty((b, c, ho, wo), x.dtype)
    arg = np.empty((b, c, ho, wo), np.int32)
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[n, ch, i * sh, j * sw]
                    pos = 0
                    for di in range(kh):
                        for dj in range(kw):
                            v = x[n, ch, i * sh + di, j * sw + dj]
                            # strict: the first row-major maximum wins ties
                            if v > best:
                                best = v
                                pos = di * kw + dj
                    out[n, ch, i, j] = best
                    arg[n, ch, i, j] = pos
    return out, arg


@numba.njit(cache=True)
def maxpool_backward(gout, arg, h, w, kh, kw, sh, sw):
    b, c, ho, wo = gout.shape
    gx = np.zeros((b, c, h, w), gout.dtype)
    for n in range(b):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    pos = arg[n, ch, i, j]
                    gx[n, ch, i * sh + pos // kw, j * sw + pos % kw] += gout[n, ch, i, j]
    return gx
