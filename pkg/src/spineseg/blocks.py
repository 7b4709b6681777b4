"""Composite network blocks: conv units, the multi-branch extractor, the
recurrent skip refiner, and the bottleneck attention gate.

Every block draws its weights from the rng handed to the constructor, so the
construction order fixes the initialization stream. Blocks expose
named_params() / named_buffers() for optimizers, checkpoints and the
parameter-count audit.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_normal(rng, shape, fan_in, dtype):
    """Kaiming-normal draw: std = sqrt(2 / fan_in), sampled in float64 and
    cast, so float32 and float64 builds share the same stream."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype),
                  requires_grad=True)


def zeros_param(shape, dtype):
    return Tensor(np.zeros(shape, dtype), requires_grad=True)


def ones_param(shape, dtype):
    return Tensor(np.ones(shape, dtype), requires_grad=True)


class ConvUnit:
    """conv -> batchnorm -> activation, spatial dims preserved at stride 1."""

    def __init__(self, rng, cin, cout, k, dtype, act="leaky_relu"):
        self.pad = (k - 1) // 2
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = zeros_param((cout,), dtype)
        self.gamma = ones_param((cout,), dtype)
        self.beta = zeros_param((cout,), dtype)
        self.state = {"mean": np.zeros(cout, dtype), "var": np.ones(cout, dtype)}
        self.act = act

    def __call__(self, x, mode):
        y = T.conv2d(x, self.weight, self.bias, 1, self.pad)
        y = T.batchnorm2d(y, self.gamma, self.beta, self.state, mode)
        return T.activation(y, self.act)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias),
                ("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.state, "mean"),
                ("running_var", self.state, "var")]


class PlainConv:
    """Bare conv + bias, no norm, no activation (projections, heads, skip
    aggregation taps)."""

    def __init__(self, rng, cin, cout, k, dtype, pad=None):
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = zeros_param((cout,), dtype)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, 1, self.pad)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_buffers(self):
        return []


class UpConv:
    """Learned 2x upsampling: 2x2 transposed conv, stride 2."""

    def __init__(self, rng, cin, cout, dtype):
        self.weight = he_normal(rng, (cin, cout, 2, 2), cin * 4, dtype)
        self.bias = zeros_param((cout,), dtype)

    def __call__(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, 2)

    def named_params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_buffers(self):
        return []


def _chain(units, x, mode):
    for u in units:
        x = u(x, mode)
    return x


class InceptionR:
    """Three stacked-3x3 branches (depths 1, 2, 3 — receptive fields 3, 5, 7),
    concatenated, fused by a 1x1 unit, plus a residual path (1x1 projection
    when channel counts differ)."""

    def __init__(self, rng, cin, cout, dtype):
        self.cin, self.cout = cin, cout
        self.branch1 = [ConvUnit(rng, cin, cout, 3, dtype)]
        self.branch2 = [ConvUnit(rng, cin, cout, 3, dtype),
                        ConvUnit(rng, cout, cout, 3, dtype)]
        self.branch3 = [ConvUnit(rng, cin, cout, 3, dtype),
                        ConvUnit(rng, cout, cout, 3, dtype),
                        ConvUnit(rng, cout, cout, 3, dtype)]
        self.fuse = ConvUnit(rng, 3 * cout, cout, 1, dtype)
        self.proj = PlainConv(rng, cin, cout, 1, dtype) if cin != cout else None

    def __call__(self, x, mode):
        if x.data.shape[1] != self.cin:
            raise ValueError(
                f"expected {self.cin} input channels, got {x.data.shape[1]}")
        z = T.concat_channels([_chain(self.branch1, x, mode),
                               _chain(self.branch2, x, mode),
                               _chain(self.branch3, x, mode)])
        z = self.fuse(z, mode)
        res = x if self.proj is None else self.proj(x)
        return T.add(z, res)

    def named_params(self):
        out = []
        for bi, units in enumerate((self.branch1, self.branch2, self.branch3), 1):
            for ui, u in enumerate(units):
                out += [(f"branch{bi}.{ui}.{n}", p) for n, p in u.named_params()]
        out += [(f"fuse.{n}", p) for n, p in self.fuse.named_params()]
        if self.proj is not None:
            out += [(f"proj.{n}", p) for n, p in self.proj.named_params()]
        return out

    def named_buffers(self):
        out = []
        for bi, units in enumerate((self.branch1, self.branch2, self.branch3), 1):
            for ui, u in enumerate(units):
                out += [(f"branch{bi}.{ui}.{n}", d, k)
                        for n, d, k in u.named_buffers()]
        out += [(f"fuse.{n}", d, k) for n, d, k in self.fuse.named_buffers()]
        return out


class PlainBlock:
    """Ablation stand-in for InceptionR: two stacked 3x3 conv units."""

    def __init__(self, rng, cin, cout, dtype):
        self.cin = cin
        self.units = [ConvUnit(rng, cin, cout, 3, dtype),
                      ConvUnit(rng, cout, cout, 3, dtype)]

    def __call__(self, x, mode):
        if x.data.shape[1] != self.cin:
            raise ValueError(
                f"expected {self.cin} input channels, got {x.data.shape[1]}")
        return _chain(self.units, x, mode)

    def named_params(self):
        return [(f"{ui}.{n}", p) for ui, u in enumerate(self.units)
                for n, p in u.named_params()]

    def named_buffers(self):
        return [(f"{ui}.{n}", d, k) for ui, u in enumerate(self.units)
                for n, d, k in u.named_buffers()]


def make_stage_block(rng, cin, cout, dtype, use_inception):
    return (InceptionR if use_inception else PlainBlock)(rng, cin, cout, dtype)


class R2Jump:
    """Recurrent refinement of a skip feature.

    F(0) = E;  F(t) = relu(Wr * F(t-1) + E), t = 1..steps;  out = F(steps) + Ws * E.
    Wr is one shared 3x3 kernel (parameter count does not depend on steps);
    Ws is a 1x1 projection, always applied. Neither carries a bias — the
    refinement equations are pure conv + injection.
    """

    def __init__(self, rng, c, steps, dtype):
        if steps < 1:
            raise ValueError(f"recurrence steps must be >= 1, got {steps}")
        self.steps = steps
        self.wr = he_normal(rng, (c, c, 3, 3), c * 9, dtype)
        self.ws = he_normal(rng, (c, c, 1, 1), c, dtype)
        self._zero = Tensor(np.zeros(c, dtype))  # fixed, not a parameter

    def __call__(self, e, mode=None):
        f = e
        for _ in range(self.steps):
            f = T.activation(T.add(T.conv2d(f, self.wr, self._zero, 1, 1), e),
                             "relu")
        return T.add(f, T.conv2d(e, self.ws, self._zero, 1, 0))

    def named_params(self):
        return [("wr", self.wr), ("ws", self.ws)]

    def named_buffers(self):
        return []


def fuse_skip(e, d, mode):
    """Join a (refined) skip feature with the incoming decoder feature:
    'add' at the high-resolution levels, 'concat' at the low ones."""
    if mode == "add":
        if e.data.shape != d.data.shape:
            raise ValueError(
                f"add fusion needs equal shapes, got {e.data.shape} vs {d.data.shape}")
        return T.add(e, d)
    if mode == "concat":
        return T.concat_channels([e, d])
    raise ValueError(f"fusion mode must be 'add' or 'concat', got {mode!r}")


class SCSELite:
    """Concurrent channel and spatial gating, summed.

    Channel side: global average pool -> 1x1 conv to c/2 -> relu -> 1x1 conv
    back to c -> sigmoid -> per-channel scale. Spatial side: 1x1 conv to a
    single map -> sigmoid -> per-pixel scale.
    """

    def __init__(self, rng, c, dtype):
        if c % 2:
            raise ValueError(f"channel count must be even, got {c}")
        self.w1 = PlainConv(rng, c, c // 2, 1, dtype)
        self.w2 = PlainConv(rng, c // 2, c, 1, dtype)
        self.w_spatial = PlainConv(rng, c, 1, 1, dtype)

    def __call__(self, x, mode=None):
        v = T.global_avg_pool(x)
        s = T.activation(self.w2(T.activation(self.w1(v), "relu")), "sigmoid")
        q = T.activation(self.w_spatial(x), "sigmoid")
        return T.add(T.scale_channels(x, s), T.scale_spatial(x, q))

    def named_params(self):
        return ([(f"w1.{n}", p) for n, p in self.w1.named_params()]
                + [(f"w2.{n}", p) for n, p in self.w2.named_params()]
                + [(f"w_spatial.{n}", p) for n, p in self.w_spatial.named_params()])

    def named_buffers(self):
        return []
