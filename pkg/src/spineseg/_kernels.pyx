# Direct loop kernels for 2D convolution and transposed convolution.
# Single-threaded on purpose: results must not depend on thread count.
# Loops are ordered so the innermost pass runs unit-stride over the output
# (or input) row, which the C compiler vectorizes.

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def conv2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                   int stride, int pad, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t i, o, c, di, dj, p, q, plo, phi, qlo, qhi, ibase, jbase
    cdef real ws
    cdef real* orow
    cdef const real* xrow

    for i in range(n):
        for o in range(co):
            for p in range(oh):
                orow = &out[i, o, p, 0]
                for q in range(ow):
                    orow[q] = b[o]
            for c in range(ci):
                for di in range(kh):
                    plo, phi = _lo(pad - di, stride), _hi(h - 1 + pad - di, stride, oh)
                    for dj in range(kw):
                        qlo, qhi = _lo(pad - dj, stride), _hi(wd - 1 + pad - dj, stride, ow)
                        ws = w[o, c, di, dj]
                        if ws == 0:
                            continue
                        for p in range(plo, phi):
                            ibase = p * stride + di - pad
                            jbase = dj - pad
                            orow = &out[i, o, p, 0]
                            xrow = &x[i, c, ibase, 0]
                            if stride == 1:
                                for q in range(qlo, qhi):
                                    orow[q] += ws * xrow[q + jbase]
                            else:
                                for q in range(qlo, qhi):
                                    orow[q] += ws * xrow[q * stride + jbase]


def conv2d_backward_input(real[:, :, :, ::1] gout, real[:, :, :, ::1] w,
                          int stride, int pad, real[:, :, :, ::1] gx):
    cdef Py_ssize_t n = gx.shape[0], ci = gx.shape[1], h = gx.shape[2], wd = gx.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t i, o, c, di, dj, p, q, plo, phi, qlo, qhi, ibase, jbase
    cdef real ws
    cdef real* grow
    cdef const real* gorow

    gx[:, :, :, :] = 0
    for i in range(n):
        for o in range(co):
            for c in range(ci):
                for di in range(kh):
                    plo, phi = _lo(pad - di, stride), _hi(h - 1 + pad - di, stride, oh)
                    for dj in range(kw):
                        qlo, qhi = _lo(pad - dj, stride), _hi(wd - 1 + pad - dj, stride, ow)
                        ws = w[o, c, di, dj]
                        if ws == 0:
                            continue
                        for p in range(plo, phi):
                            ibase = p * stride + di - pad
                            jbase = dj - pad
                            grow = &gx[i, c, ibase, 0]
                            gorow = &gout[i, o, p, 0]
                            if stride == 1:
                                for q in range(qlo, qhi):
                                    grow[q + jbase] += ws * gorow[q]
                            else:
                                for q in range(qlo, qhi):
                                    grow[q * stride + jbase] += ws * gorow[q]


def conv2d_backward_weight(real[:, :, :, ::1] gout, real[:, :, :, ::1] x,
                           int stride, int pad, real[:, :, :, ::1] gw):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = gw.shape[0], kh = gw.shape[2], kw = gw.shape[3]
    cdef Py_ssize_t oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t i, o, c, di, dj, p, q, plo, phi, qlo, qhi, ibase, jbase
    cdef real acc
    cdef const real* xrow
    cdef const real* gorow

    gw[:, :, :, :] = 0
    for i in range(n):
        for o in range(co):
            for c in range(ci):
                for di in range(kh):
                    plo, phi = _lo(pad - di, stride), _hi(h - 1 + pad - di, stride, oh)
                    for dj in range(kw):
                        qlo, qhi = _lo(pad - dj, stride), _hi(wd - 1 + pad - dj, stride, ow)
                        jbase = dj - pad
                        acc = 0
                        for p in range(plo, phi):
                            ibase = p * stride + di - pad
                            xrow = &x[i, c, ibase, 0]
                            gorow = &gout[i, o, p, 0]
                            if stride == 1:
                                for q in range(qlo, qhi):
                                    acc += gorow[q] * xrow[q + jbase]
                            else:
                                for q in range(qlo, qhi):
                                    acc += gorow[q] * xrow[q * stride + jbase]
                        gw[o, c, di, dj] += acc


def convt2d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                    int stride, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = out.shape[2], ow = out.shape[3]
    cdef Py_ssize_t i, o, c, di, dj, p, q
    cdef real ws
    cdef real* orow
    cdef const real* xrow

    for i in range(n):
        for o in range(co):
            for p in range(oh):
                orow = &out[i, o, p, 0]
                for q in range(ow):
                    orow[q] = b[o]
            for c in range(ci):
                for di in range(kh):
                    for dj in range(kw):
                        ws = w[c, o, di, dj]
                        if ws == 0:
                            continue
                        for p in range(h):
                            orow = &out[i, o, p * stride + di, 0]
                            xrow = &x[i, c, p, 0]
                            for q in range(wd):
                                orow[q * stride + dj] += ws * xrow[q]


def convt2d_backward_input(real[:, :, :, ::1] gout, real[:, :, :, ::1] w,
                           int stride, real[:, :, :, ::1] gx):
    cdef Py_ssize_t n = gx.shape[0], ci = gx.shape[1], h = gx.shape[2], wd = gx.shape[3]
    cdef Py_ssize_t co = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t i, o, c, di, dj, p, q
    cdef real ws
    cdef real* grow
    cdef const real* gorow

    gx[:, :, :, :] = 0
    for i in range(n):
        for o in range(co):
            for c in range(ci):
                for di in range(kh):
                    for dj in range(kw):
                        ws = w[c, o, di, dj]
                        if ws == 0:
                            continue
                        for p in range(h):
                            grow = &gx[i, c, p, 0]
                            gorow = &gout[i, o, p * stride + di, 0]
                            for q in range(wd):
                                grow[q] += ws * gorow[q * stride + dj]


def convt2d_backward_weight(real[:, :, :, ::1] gout, real[:, :, :, ::1] x,
                            int stride, real[:, :, :, ::1] gw):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = gw.shape[1], kh = gw.shape[2], kw = gw.shape[3]
    cdef Py_ssize_t i, o, c, di, dj, p, q
    cdef real acc
    cdef const real* xrow
    cdef const real* gorow

    gw[:, :, :, :] = 0
    for i in range(n):
        for c in range(ci):
            for o in range(co):
                for di in range(kh):
                    for dj in range(kw):
                        acc = 0
                        for p in range(h):
                            xrow = &x[i, c, p, 0]
                            gorow = &gout[i, o, p * stride + di, 0]
                            for q in range(wd):
                                acc += xrow[q] * gorow[q * stride + dj]
                        gw[c, o, di, dj] += acc


cdef inline Py_ssize_t _lo(Py_ssize_t shift, Py_ssize_t stride) noexcept nogil:
    # smallest p >= 0 with p*stride >= shift
    if shift <= 0:
        return 0
    return (shift + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t last, Py_ssize_t stride, Py_ssize_t total) noexcept nogil:
    # one past the largest p < total with p*stride <= last
    if last < 0:
        return 0
    last = last // stride + 1
    return total if total < last else last
