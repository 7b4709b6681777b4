"""Pure-numpy convolution kernels, used when the compiled extension is absent.

Same call signatures as the compiled module: the caller allocates the output
array and passes it in. Each kernel walks the kernel taps and accumulates
shifted views, so the heavy lifting stays inside numpy.
"""

import numpy as np


def conv2d_forward(x, w, b, stride, pad, out):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out[:] = b[None, :, None, None]
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di : di + (oh - 1) * stride + 1 : stride,
                       dj : dj + (ow - 1) * stride + 1 : stride]
            out += np.einsum("oc,nchw->nohw", w[:, :, di, dj], patch)


def conv2d_backward_input(gout, w, stride, pad, gx):
    n, ci, h, wd = gx.shape
    co, _, kh, kw = w.shape
    oh, ow = gout.shape[2], gout.shape[3]
    gxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad), dtype=gx.dtype)
    for di in range(kh):
        for dj in range(kw):
            gxp[:, :, di : di + (oh - 1) * stride + 1 : stride,
                dj : dj + (ow - 1) * stride + 1 : stride] += np.einsum(
                "oc,nohw->nchw", w[:, :, di, dj], gout)
    gx[:] = gxp[:, :, pad : pad + h, pad : pad + wd]


def conv2d_backward_weight(gout, x, stride, pad, gw):
    n, ci, h, wd = x.shape
    co, _, kh, kw = gw.shape
    oh, ow = gout.shape[2], gout.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    for di in range(kh):
        for dj in range(kw):
            patch = xp[:, :, di : di + (oh - 1) * stride + 1 : stride,
                       dj : dj + (ow - 1) * stride + 1 : stride]
            gw[:, :, di, dj] = np.einsum("nohw,nchw->oc", gout, patch)


def convt2d_forward(x, w, b, stride, out):
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    out[:] = b[None, :, None, None]
    for di in range(kh):
        for dj in range(kw):
            out[:, :, di : di + (h - 1) * stride + 1 : stride,
                dj : dj + (wd - 1) * stride + 1 : stride] += np.einsum(
                "co,nchw->nohw", w[:, :, di, dj], x)


def convt2d_backward_input(gout, w, stride, gx):
    n, ci, h, wd = gx.shape
    _, co, kh, kw = w.shape
    gx[:] = 0
    for di in range(kh):
        for dj in range(kw):
            patch = gout[:, :, di : di + (h - 1) * stride + 1 : stride,
                         dj : dj + (wd - 1) * stride + 1 : stride]
            gx += np.einsum("co,nohw->nchw", w[:, :, di, dj], patch)


def convt2d_backward_weight(gout, x, stride, gw):
    n, ci, h, wd = x.shape
    _, co, kh, kw = gw.shape
    for di in range(kh):
        for dj in range(kw):
            patch = gout[:, :, di : di + (h - 1) * stride + 1 : stride,
                         dj : dj + (wd - 1) * stride + 1 : stride]
            gw[:, :, di, dj] = np.einsum("nchw,nohw->co", x, patch)
