"""Backend selection for the convolution kernels.

The compiled Cython extension is preferred; a pure-numpy implementation with
identical semantics is the fallback. Selection happens once at import, can be
forced with the SPINESEG_PURE_PY environment variable, and can be switched at
runtime with use_backend() (handy for benchmarks and cross-checking).

Within one backend results are deterministic. Across backends they agree to
rounding only: the compiled loops and numpy's reductions sum in different
orders, so float32 results can differ in the last few ulps.
"""

import os

import numpy as np

from . import _kernels_np

_impl_np = _kernels_np
try:
    from . import _kernels as _impl_c
except ImportError:  # extension not built
    _impl_c = None

_FORCE_PY = os.environ.get("SPINESEG_PURE_PY", "") not in ("", "0")
_impl = _impl_np if (_impl_c is None or _FORCE_PY) else _impl_c


def backend_name():
    return "numpy" if _impl is _impl_np else "compiled"


def have_compiled():
    return _impl_c is not None


def use_backend(name):
    """Switch backends in-process. name is 'compiled' or 'numpy'."""
    global _impl
    if name == "compiled":
        if _impl_c is None:
            raise RuntimeError("compiled kernel extension is not available")
        _impl = _impl_c
    elif name == "numpy":
        _impl = _impl_np
    else:
        raise ValueError(f"unknown backend {name!r}")


def _check_4d(a, name):
    if a.ndim != 4:
        raise ValueError(f"{name} must be 4-d (n, c, h, w), got shape {a.shape}")


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of x (n,ci,h,w) with w (co,ci,kh,kw) plus bias."""
    _check_4d(x, "x")
    _check_4d(w, "w")
    n, ci, h, wd = x.shape
    co, ciw, kh, kw = w.shape
    if ciw != ci:
        raise ValueError(f"channel mismatch: input has {ci}, weight expects {ciw}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"kernel {kh}x{kw} too large for input {h}x{wd} (pad={pad})")
    out = np.empty((n, co, oh, ow), dtype=x.dtype)
    _impl.conv2d_forward(x, w, b, stride, pad, out)
    return out


def conv2d_backward_input(gout, w, x_shape, stride=1, pad=0):
    gx = np.empty(x_shape, dtype=gout.dtype)
    _impl.conv2d_backward_input(gout, w, stride, pad, gx)
    return gx


def conv2d_backward_weight(gout, x, w_shape, stride=1, pad=0):
    gw = np.empty(w_shape, dtype=gout.dtype)
    _impl.conv2d_backward_weight(gout, x, stride, pad, gw)
    return gw


def conv2d_backward_bias(gout):
    return gout.sum(axis=(0, 2, 3))


def convt2d_forward(x, w, b, stride=2):
    """Transposed convolution; w is (ci, co, kh, kw), output (h-1)*s+kh."""
    _check_4d(x, "x")
    _check_4d(w, "w")
    n, ci, h, wd = x.shape
    ciw, co, kh, kw = w.shape
    if ciw != ci:
        raise ValueError(f"channel mismatch: input has {ci}, weight expects {ciw}")
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    out = np.empty((n, co, oh, ow), dtype=x.dtype)
    _impl.convt2d_forward(x, w, b, stride, out)
    return out


def convt2d_backward_input(gout, w, x_shape, stride=2):
    gx = np.empty(x_shape, dtype=gout.dtype)
    _impl.convt2d_backward_input(gout, w, stride, gx)
    return gx


def convt2d_backward_weight(gout, x, w_shape, stride=2):
    gw = np.empty(w_shape, dtype=gout.dtype)
    _impl.convt2d_backward_weight(gout, x, stride, gw)
    return gw


def convt2d_backward_bias(gout):
    return gout.sum(axis=(0, 2, 3))
