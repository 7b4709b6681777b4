"""Tensor values and reverse-mode differentiation on an explicit tape.

A Tensor is a thin wrapper over a numpy array (feature maps are (n, c, h, w)
row-major, parameters keep their natural shapes). Ops defined here run the
forward computation immediately; when a Tape is active (used as a context
manager) they also record a closure that maps the output adjoint to input
adjoints. Tape.backward walks the records in reverse and accumulates into
each requires_grad tensor's .grad, so calling backward twice without
zero_grad yields exactly twice the gradient.

Outside a Tape context the same ops run forward-only, which is the
inference path.
"""

import numpy as np

from . import kernels


class Tensor:
    """Array value with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def validate(self):
        """Debug pass: every entry (and grad entry) must be finite."""
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or ''}")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise FloatingPointError(f"non-finite gradient in tensor {self.name or ''}")

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={tuple(self.data.shape)}, dtype={self.data.dtype})"


_ACTIVE_TAPES = []


class Tape:
    """Ordered record of primitive applications for reverse replay."""

    def __init__(self):
        self._records = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor t
        with requires_grad set."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        if not self._records:
            raise RuntimeError("tape is empty; nothing was recorded")
        adj = {id(loss): np.ones_like(loss.data)}
        tensors = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._records):
            g = adj.get(id(out))
            if g is None:
                continue  # this output never reached the loss
            for t, gt in zip(inputs, backward_fn(g)):
                if gt is None:
                    continue
                k = id(t)
                if k in adj:
                    adj[k] = adj[k] + gt
                else:
                    adj[k] = gt
                    tensors[k] = t
        for k, g in adj.items():
            t = tensors[k]
            if not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g


def _tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _emit(data, inputs, backward_fn):
    out = Tensor(data)
    tp = _tape()
    if tp is not None:
        tp.record(out, inputs, backward_fn)
    return out


def custom_op(data, inputs, backward_fn):
    """Wrap an externally computed forward value as a recorded primitive.

    backward_fn maps the output adjoint to one adjoint (or None) per input
    tensor. This is how the loss terms plug their analytic gradients into
    the tape."""
    return _emit(data, inputs, backward_fn)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x, weight, bias, stride=1, pad=0):
    """Cross-correlation (no kernel flip). weight is (co, ci, kh, kw)."""
    y = kernels.conv2d_forward(x.data, weight.data, bias.data, stride, pad)

    def bwd(g):
        gx = kernels.conv2d_backward_input(g, weight.data, x.data.shape, stride, pad)
        gw = kernels.conv2d_backward_weight(g, x.data, weight.data.shape, stride, pad)
        return gx, gw, kernels.conv2d_backward_bias(g)

    return _emit(y, (x, weight, bias), bwd)


def conv_transpose2d(x, weight, bias, stride=2):
    """Transposed conv; weight is (ci, co, kh, kw), spatial dims grow to
    (h-1)*stride + kh."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    y = kernels.convt2d_forward(x.data, weight.data, bias.data, stride)

    def bwd(g):
        gx = kernels.convt2d_backward_input(g, weight.data, x.data.shape, stride)
        gw = kernels.convt2d_backward_weight(g, x.data, weight.data.shape, stride)
        return gx, gw, kernels.convt2d_backward_bias(g)

    return _emit(y, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2(x):
    """2x2/stride-2 max pool. Returns (pooled, argmax) where argmax holds
    the in-window index 0..3; ties give the gradient to the first position
    in row-major window order."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=4)  # argmax takes the first maximum: the tie rule
    y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    ni, ci, pi, qi = np.indices(idx.shape, sparse=True)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[ni, ci, 2 * pi + idx // 2, 2 * qi + idx % 2] = g
        return (gx,)

    return _emit(y, (x,), bwd), idx


def global_avg_pool(x):
    """Per-channel spatial mean, kept as (n, c, 1, 1) so the attention path
    can feed it straight into 1x1 convolutions."""
    n, c, h, w = x.data.shape
    if h * w == 0:
        raise ValueError("global_avg_pool on empty spatial extent")
    y = x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g * inv, x.data.shape).astype(x.data.dtype, copy=True),)

    return _emit(y, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def batchnorm2d(x, gamma, beta, state, mode, momentum=0.9, eps=1e-5):
    """Per-channel batch norm over (n, h, w).

    state is a dict with 'mean' and 'var' running buffers (updated in place
    in train mode, read in eval mode). Variance is the biased batch variance
    both for normalizing and for the running buffer.
    """
    n, c, h, w = x.data.shape
    if h * w == 0:
        raise ValueError("batchnorm2d on zero spatial extent")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    if mode == "train":
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state["mean"] = momentum * state["mean"] + (1.0 - momentum) * mu
        state["var"] = momentum * state["var"] + (1.0 - momentum) * var
    elif mode == "eval":
        mu = state["mean"].astype(x.data.dtype, copy=False)
        var = state["var"].astype(x.data.dtype, copy=False)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, x.data.dtype))
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    m = n * h * w

    def bwd(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if mode == "eval":
            gx = dxhat * inv_std[None, :, None, None]
            return gx, gg, gb
        xc = x.data - mu[None, :, None, None]
        istd = inv_std[None, :, None, None]
        dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv_std**3
        dmu = -(dxhat * istd).sum(axis=(0, 2, 3)) + dvar * (-2.0 / m) * xc.sum(
            axis=(0, 2, 3)
        )
        gx = (
            dxhat * istd
            + (2.0 / m) * dvar[None, :, None, None] * xc
            + (dmu / m)[None, :, None, None]
        )
        return gx.astype(x.data.dtype, copy=False), gg, gb

    return _emit(y, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# elementwise


def activation(x, kind):
    d = x.data
    if kind == "relu":
        y = np.maximum(d, 0)

        def bwd(g):
            return (g * (d > 0),)

    elif kind == "leaky_relu":
        y = np.where(d > 0, d, d * np.asarray(0.01, d.dtype))

        def bwd(g):
            return (np.where(d > 0, g, g * np.asarray(0.01, d.dtype)),)

    elif kind == "sigmoid":
        # Stable sigmoid, then pinch away from the exact endpoints so
        # downstream logs and the open-interval probability invariant hold
        # even in float32. The pinch is a plateau: saturated entries must
        # not leak gradient (the loss divides by p, so even the ~1e-7 slope
        # would come back as an order-one phantom term).
        e = np.exp(-np.abs(d))
        s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
        lo = np.asarray(1e-7, d.dtype)
        hi = np.asarray(1.0, d.dtype) - lo
        y = np.clip(s, lo, hi)
        live = ((s > lo) & (s < hi)).astype(d.dtype)

        def bwd(g):
            return (g * y * (1.0 - y) * live,)

    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    return _emit(y, (x,), bwd)


def _broadcast_view(x_shape, other):
    """How `other` lines up against an (n,c,h,w) tensor: full shape or a
    per-channel vector."""
    if other.shape == x_shape:
        return other, None
    if other.ndim == 1 and len(x_shape) == 4 and other.shape[0] == x_shape[1]:
        return other[None, :, None, None], (0, 2, 3)
    raise ValueError(f"cannot broadcast {other.shape} against {x_shape}")


def add(x, y):
    yd, reduce_axes = _broadcast_view(x.data.shape, y.data)
    out = x.data + yd

    def bwd(g):
        gy = g if reduce_axes is None else g.sum(axis=reduce_axes)
        return g, gy

    return _emit(out, (x, y), bwd)


def mul(x, y):
    """Elementwise (Hadamard) product, same shapes."""
    if x.data.shape != y.data.shape:
        raise ValueError(f"shape mismatch {x.data.shape} vs {y.data.shape}")
    out = x.data * y.data

    def bwd(g):
        return g * y.data, g * x.data

    return _emit(out, (x, y), bwd)


def scale(x, k):
    """Multiply by a python constant (not differentiated through k)."""
    kk = np.asarray(k, x.data.dtype)

    def bwd(g):
        return (g * kk,)

    return _emit(x.data * kk, (x,), bwd)


def scale_channels(x, s):
    """x * s with s of shape (n, c, 1, 1): per-channel gates."""
    n, c, h, w = x.data.shape
    if s.data.shape != (n, c, 1, 1):
        raise ValueError(f"channel gate must be ({n},{c},1,1), got {s.data.shape}")
    out = x.data * s.data

    def bwd(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return _emit(out, (x, s), bwd)


def scale_spatial(x, m):
    """x * m with m of shape (n, 1, h, w): per-pixel gates."""
    n, c, h, w = x.data.shape
    if m.data.shape != (n, 1, h, w):
        raise ValueError(f"spatial gate must be ({n},1,{h},{w}), got {m.data.shape}")
    out = x.data * m.data

    def bwd(g):
        return g * m.data, (g * x.data).sum(axis=1, keepdims=True)

    return _emit(out, (x, m), bwd)


def concat_channels(parts):
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    first = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if (s[0], s[2], s[3]) != (first[0], first[2], first[3]):
            raise ValueError(f"spatial/batch mismatch in concat: {first} vs {s}")
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.data.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, a:b] for a, b in zip(edges[:-1], edges[1:]))

    return _emit(out, tuple(parts), bwd)


def dropout(x, rate, rng, mode):
    """Inverted dropout: kept entries scaled by 1/(1-rate) in train mode,
    identity in eval. rate 0 draws nothing from rng."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    keep = np.asarray(1.0 - rate, x.data.dtype)
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    y = x.data * mask / keep

    def bwd(g):
        return (g * mask / keep,)

    return _emit(y, (x,), bwd)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(size_out, size_in, dtype):
    """Rows map output pixels to a convex combo of two input pixels
    (half-pixel-center convention, edges clamped)."""
    m = np.zeros((size_out, size_in), dtype=dtype)
    ratio = size_in / size_out
    src = (np.arange(size_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, size_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = (src - i0).astype(dtype)
    rows = np.arange(size_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def bilinear_upsample(x, factor):
    """Bilinear x`factor` upsampling with exact-adjoint backward (both
    directions use the same interpolation matrices)."""
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    if factor == 1:
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    n, c, h, w = x.data.shape
    ry = _interp_matrix(h * factor, h, x.data.dtype)
    rx = _interp_matrix(w * factor, w, x.data.dtype)
    t = np.einsum("pi,ncij->ncpj", ry, x.data)
    y = np.einsum("qj,ncpj->ncpq", rx, t)

    def bwd(g):
        gt = np.einsum("qj,ncpq->ncpj", rx, g)
        return (np.einsum("pi,ncpj->ncij", ry, gt),)

    return _emit(y, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(x):
    """Sum of all entries as a 1-element tensor (the loss shape)."""
    out = x.data.sum(dtype=x.data.dtype).reshape(1)

    def bwd(g):
        return (np.broadcast_to(g.reshape(()), x.data.shape).astype(
            x.data.dtype, copy=True),)

    return _emit(out, (x,), bwd)


def tmean(x):
    out = x.data.mean(dtype=x.data.dtype).reshape(1)
    inv = 1.0 / x.data.size

    def bwd(g):
        return (np.broadcast_to(g.reshape(()) * inv, x.data.shape).astype(
            x.data.dtype, copy=True),)

    return _emit(out, (x,), bwd)
