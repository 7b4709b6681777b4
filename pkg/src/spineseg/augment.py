"""Paired image/mask augmentation with seeded, independent draws.

Geometry (flip + one composed affine: scale, then rotate, then translate,
all about the image center) hits the image and mask with the same sampled
parameters -- bilinear for the image, nearest for the mask. Photometrics
(gamma, noise) touch only the image. Out-of-bounds pixels fill with
background, matching how the generator frames its subjects.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .synth import SegmentationSample


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    rotation_deg: float = 7.0
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    translate_frac: float = 0.05
    gamma_lo: float = 0.8
    gamma_hi: float = 1.2
    noise_sigma: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.rotation_deg < 0 or self.translate_frac < 0 or self.noise_sigma < 0:
            raise ValueError("rotation_deg, translate_frac and noise_sigma "
                             "must be nonnegative")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError(f"bad scale range [{self.scale_lo}, {self.scale_hi}]")
        if not 0 < self.gamma_lo <= self.gamma_hi:
            raise ValueError(f"bad gamma range [{self.gamma_lo}, {self.gamma_hi}]")

    @classmethod
    def identity(cls):
        """A config whose every draw is forced to the do-nothing value."""
        return cls(flip_prob=0.0, rotation_deg=0.0, scale_lo=1.0, scale_hi=1.0,
                   translate_frac=0.0, gamma_lo=1.0, gamma_hi=1.0,
                   noise_sigma=0.0)


def apply_affine(arr, rot_deg, scale, ty, tx, is_mask=False):
    """Scale -> rotate -> translate about the center, one interpolation.

    The three maps compose into a single inverse matrix fed to
    scipy.ndimage.affine_transform, so the image is resampled exactly once.
    An all-identity parameter set returns the input untouched (bit-exact).
    """
    if rot_deg == 0.0 and scale == 1.0 and ty == 0.0 and tx == 0.0:
        return np.array(arr, copy=True)
    th = np.deg2rad(rot_deg)
    # inverse of p_out = R S (p_in - c) + c + t  is  S^-1 R^-1 (p_out - c - t) + c
    inv = (np.array([[np.cos(th), np.sin(th)],
                     [-np.sin(th), np.cos(th)]]) / scale)
    c = (np.asarray(arr.shape, dtype=np.float64) - 1.0) / 2.0
    offset = c - inv @ (c + np.array([ty, tx]))
    out = ndimage.affine_transform(
        arr.astype(np.float64), inv, offset=offset,
        order=0 if is_mask else 1, mode="constant", cval=0.0)
    if is_mask:
        return (out >= 0.5).astype(np.uint8)
    return np.clip(out, 0.0, 1.0)


def augment(sample, cfg, seed):
    """A fresh SegmentationSample with one sampled round of augmentation."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < cfg.flip_prob
    rot = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
    scale = rng.uniform(cfg.scale_lo, cfg.scale_hi)
    h, w = sample.image.shape
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
    gamma = rng.uniform(cfg.gamma_lo, cfg.gamma_hi)
    sigma = rng.uniform(0.0, cfg.noise_sigma)

    img = sample.image.astype(np.float64)
    mask = sample.mask
    if flip:
        img = img[:, ::-1]
        mask = np.ascontiguousarray(mask[:, ::-1])
    img = apply_affine(img, rot, scale, ty, tx, is_mask=False)
    mask = apply_affine(mask, rot, scale, ty, tx, is_mask=True)

    img = img ** gamma
    img = img + sigma * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    return replace(sample, image=img.astype(np.float32), mask=mask)
