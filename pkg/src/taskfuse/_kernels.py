"""Compiled hot loops for the tensor engine.

Everything here is either a pure copy (patch gathers, layout shuffles) or a
fused elementwise/per-channel pass. All loops run serially: on desk-scale
arrays the win over numpy is removing iterator overhead, BLAS keeps the
cores busy for the matmuls, and serial loops keep every reduction order
fixed, so results are bitwise-reproducible run to run. fastmath stays off:
IEEE semantics only.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def gather_patches(src, out, k, pad):
    """Stride-1 im2col: src [B,C,H,W] -> out [k*k*C, B*ho*wo].

    Rows are ordered (kernel row, kernel col, channel); positions that fall
    into the zero padding are written as zeros.
    """
    b, c, h, w = src.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    for row in range(k * k * c):
        pos = row // c
        ci = row % c
        i = pos // k
        j = pos % k
        for bb in range(b):
            base = bb * ho * wo
            for y in range(ho):
                sy = y + i - pad
                orow = base + y * wo
                if sy < 0 or sy >= h:
                    for x in range(wo):
                        out[row, orow + x] = 0.0
                else:
                    for x in range(wo):
                        sx = x + j - pad
                        if sx < 0 or sx >= w:
                            out[row, orow + x] = 0.0
                        else:
                            out[row, orow + x] = src[bb, ci, sy, sx]


@njit(cache=True)
def scatter_dx(gw, k, pad, dx):
    """Fold [(k*k*C), B*ho*wo] back onto the input gradient [B, C, h, w].

    gw holds, per kernel offset and channel, the kernel-weighted output
    gradient; each entry lands on the input cell that produced it. dx must
    arrive zeroed. Serial, fixed accumulation order.
    """
    b, c, h, w = dx.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    for row in range(gw.shape[0]):
        pos = row // c
        ci = row % c
        i = pos // k
        j = pos % k
        dy = i - pad
        dz = j - pad
        y0 = max(0, -dy)
        y1 = min(ho, h - dy)
        x0 = max(0, -dz)
        x1 = min(wo, w - dz)
        for bb in range(b):
            base = bb * ho * wo
            for y in range(y0, y1):
                r = base + y * wo
                ty = y + dy
                for x in range(x0, x1):
                    dx[bb, ci, ty, x + dz] += gw[row, r + x]


@njit(cache=True)
def rows_to_nchw(rows, out):
    """rows [C, B*H*W] -> out [B, C, H, W]."""
    b, c, h, w = out.shape
    for ci in range(c):
        for bb in range(b):
            base = bb * h * w
            for y in range(h):
                ro = base + y * w
                for x in range(w):
                    out[bb, ci, y, x] = rows[ci, ro + x]


@njit(cache=True)
def nchw_to_rows(x, out):
    """x [B, C, H, W] -> out [C, B*H*W]."""
    b, c, h, w = x.shape
    for ci in range(c):
        for bb in range(b):
            base = bb * h * w
            for y in range(h):
                ro = base + y * w
                for x_ in range(w):
                    out[ci, ro + x_] = x[bb, ci, y, x_]


@njit(cache=True)
def bn_train_forward(x, gamma, beta, eps, out, mu, var, ivar):
    """Batch statistics plus the normalized output in one fused pass set."""
    b, c, h, w = x.shape
    n = b * h * w
    for ci in range(c):
        s = 0.0
        for bb in range(b):
            for y in range(h):
                for xx in range(w):
                    s += x[bb, ci, y, xx]
        m = s / n
        v = 0.0
        for bb in range(b):
            for y in range(h):
                for xx in range(w):
                    d = x[bb, ci, y, xx] - m
                    v += d * d
        v /= n
        iv = 1.0 / np.sqrt(v + eps)
        mu[ci] = m
        var[ci] = v
        ivar[ci] = iv
        gi = gamma[ci] * iv
        bi = beta[ci] - m * gi
        for bb in range(b):
            for y in range(h):
                for xx in range(w):
                    out[bb, ci, y, xx] = x[bb, ci, y, xx] * gi + bi


@njit(cache=True)
def bn_train_backward(x, g, gamma, mu, ivar, dx, dgamma, dbeta, want_dx):
    b, c, h, w = x.shape
    n = b * h * w
    for ci in range(c):
        m = mu[ci]
        iv = ivar[ci]
        sg = 0.0
        sgx = 0.0
        for bb in range(b):
            for y in range(h):
                for xx in range(w):
                    gg = g[bb, ci, y, xx]
                    sg += gg
                    sgx += gg * (x[bb, ci, y, xx] - m) * iv
        dgamma[ci] = sgx
        dbeta[ci] = sg
        if want_dx:
            ga = gamma[ci]
            c1 = ga * sg / n
            c2 = ga * sgx / n
            for bb in range(b):
                for y in range(h):
                    for xx in range(w):
                        xh = (x[bb, ci, y, xx] - m) * iv
                        dx[bb, ci, y, xx] = (g[bb, ci, y, xx] * ga - c1 - xh * c2) * iv


@njit(cache=True)
def bn_eval_forward(x, gamma, beta, mu, var, eps, out, ivar):
    b, c, h, w = x.shape
    for ci in range(c):
        iv = 1.0 / np.sqrt(var[ci] + eps)
        ivar[ci] = iv
        gi = gamma[ci] * iv
        bi = beta[ci] - mu[ci] * gi
        for bb in range(b):
            for y in range(h):
                for xx in range(w):
                    out[bb, ci, y, xx] = x[bb, ci, y, xx] * gi + bi


@njit(cache=True)
def bn_eval_backward(x, g, gamma, mu, ivar, dx, dgamma, dbeta, want_dx):
    b, c, h, w = x.shape
    for ci in range(c):
        m = mu[ci]
        iv = ivar[ci]
        sg = 0.0
        sgx = 0.0
        for bb in range(b):
            for y in range(h):
                for xx in range(w):
                    gg = g[bb, ci, y, xx]
                    sg += gg
                    sgx += gg * (x[bb, ci, y, xx] - m) * iv
        dgamma[ci] = sgx
        dbeta[ci] = sg
        if want_dx:
            gi = gamma[ci] * iv
            for bb in range(b):
                for y in range(h):
                    for xx in range(w):
                        dx[bb, ci, y, xx] = g[bb, ci, y, xx] * gi


@njit(cache=True)
def lrelu_forward(x, slope, out):
    for i in range(x.size):
        v = x[i]
        out[i] = v if v >= 0.0 else slope * v


@njit(cache=True)
def lrelu_backward(x, g, slope, out):
    for i in range(x.size):
        out[i] = g[i] if x[i] >= 0.0 else slope * g[i]
