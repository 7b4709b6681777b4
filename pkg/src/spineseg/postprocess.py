"""Inference post-processing: threshold, keep the largest blob, close holes.

Everything here works on plain numpy arrays; masks are uint8 images of 0/1.
Out-of-bounds pixels count as background: the closing runs on a one-pixel
zero canvas around the image (wide enough to hold the dilation halo) and the
result is cropped back, so it behaves exactly like the infinite-background
closing restricted to the image window.
"""

import numpy as np
from scipy import ndimage

_SE = np.ones((3, 3), dtype=bool)


def _as_mask(m):
    a = np.asarray(m)
    if a.ndim == 4:  # (1,1,h,w) straight off the network
        if a.shape[0] != 1 or a.shape[1] != 1:
            raise ValueError(f"expected a single-image map, got {a.shape}")
        a = a[0, 0]
    if a.ndim != 2:
        raise ValueError(f"mask must be 2-d, got {a.shape}")
    return a


def threshold(prob, t=0.5):
    """Binarize a probability map; ties at the threshold go to foreground."""
    p = _as_mask(prob)
    if p.min() < 0 or p.max() > 1:
        raise ValueError("probability map leaves [0, 1]")
    return (p >= t).astype(np.uint8)


def _structure(connectivity):
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def largest_component(mask, connectivity=8):
    """Keep only the biggest connected blob (empty in, empty out).

    Equal-area ties go to the component discovered first in row-major
    order, which is the lowest label scipy assigns.
    """
    m = _as_mask(mask).astype(bool)
    labels, n = ndimage.label(m, structure=_structure(connectivity))
    if n == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    areas = np.bincount(labels.ravel())
    areas[0] = 0  # background does not compete
    return (labels == int(np.argmax(areas))).astype(np.uint8)


def closing(mask):
    """Morphological closing with the fixed 3x3 all-ones element.

    Dilation and erosion both run on a one-pixel zero border; the 3x3
    element reaches at most one pixel out, so that canvas holds the whole
    dilation halo and the crop returns the infinite-background closing of
    the mask. In that form the closing only ever adds pixels, which is what
    makes it safe to run after component selection: it can merge pieces but
    never split one.
    """
    m = _as_mask(mask).astype(bool)
    canvas = np.pad(m, 1)
    grown = ndimage.binary_dilation(canvas, structure=_SE, border_value=0)
    shut = ndimage.binary_erosion(grown, structure=_SE, border_value=0)
    return shut[1:-1, 1:-1].astype(np.uint8)


def postprocess_pipeline(prob, t=0.5):
    """threshold -> largest_component -> closing, in that order."""
    return closing(largest_component(threshold(prob, t)))
