"""Shared fixtures: a small model config that exercises every block, plus
seeded mask/probability generators for the oracle-based tests."""

import numpy as np
import pytest

from spineseg.network import ModelConfig


@pytest.fixture
def tiny_cfg():
    """Smallest config that still hits every code path: 4 levels (so both
    add- and concat-fusion occur), uneven channels, multi-step recurrence."""
    return ModelConfig(channels=(4, 4, 6, 6), recurrence=(2, 1, 1, 1),
                       input_size=16, dropout_rate=0.0, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mask(rng, shape=(32, 32), density=None):
    """A random binary mask; density defaults to a uniform draw in
    [0.2, 0.8] so sparse and crowded masks both occur."""
    if density is None:
        density = rng.uniform(0.2, 0.8)
    return (rng.random(shape) < density).astype(np.uint8)


def blobby_mask(rng, shape=(32, 32)):
    """Smoothed-noise mask: connected structures with ragged boundaries,
    the shape family post-processing actually sees."""
    from scipy import ndimage
    field = ndimage.gaussian_filter(rng.random(shape), 1.5)
    return (field > np.median(field)).astype(np.uint8)


# ---------------------------------------------------------------------------
# closed-form parameter counts, re-derived by hand as the counting oracle


def conv_unit_params(cin, cout, k):
    return cout * (cin * k * k + 3)        # weight + bias + gamma + beta


def plain_conv_params(cin, cout, k):
    return cout * (cin * k * k + 1)


def inception_params(cin, cout):
    n = (conv_unit_params(cin, cout, 3)               # branch 1
         + conv_unit_params(cin, cout, 3) + conv_unit_params(cout, cout, 3)
         + conv_unit_params(cin, cout, 3) + 2 * conv_unit_params(cout, cout, 3)
         + conv_unit_params(3 * cout, cout, 1))       # fuse
    if cin != cout:
        n += plain_conv_params(cin, cout, 1)
    return n


def plain_block_params(cin, cout):
    return conv_unit_params(cin, cout, 3) + conv_unit_params(cout, cout, 3)


def scse_params(c):
    return (plain_conv_params(c, c // 2, 1) + plain_conv_params(c // 2, c, 1)
            + plain_conv_params(c, 1, 1))


def model_params_oracle(cfg):
    """Whole-cascade parameter count from the architecture description
    alone. Shares nothing with the model classes."""
    L, ch = cfg.levels, cfg.channels
    stage = inception_params if cfg.use_inception else plain_block_params
    total = 0
    for fine in (False, True):
        total += stage(2 if fine else 1, ch[0])       # encoder level 1
        for i in range(1, L):
            total += stage(ch[i - 1], ch[i])
        total += stage(ch[-1], ch[-1])                # bottleneck
        if fine and cfg.use_mcskip:
            for i in range(L):
                for k in range(i, min(i + 3, L)):
                    total += plain_conv_params(ch[k], ch[i], 3)
        if fine and cfg.use_scse:
            total += scse_params(ch[-1])
        if cfg.use_r2jump:
            total += sum(c * c * 9 + c * c for c in ch)
        for i in range(L - 1):                        # 2x2 upsamplers
            total += ch[i + 1] * ch[i] * 4 + ch[i]
        for i in range(L):                            # decoder
            total += stage(2 * ch[i] if i >= 2 else ch[i], ch[i])
        total += plain_conv_params(ch[0], 1, 1)       # head
    return total
