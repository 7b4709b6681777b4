"""Overlap and surface-distance metrics, plus whole-dataset evaluation.

Masks are 2-d arrays of {0,1}. Surface distances run on boundary point
sets (foreground pixels with a 4-neighbor that is background or outside
the image). The fast path looks distances up in an exact Euclidean
distance transform but converts through *integer* squared distances, so
its output is bit-for-bit what the all-pairs brute force produces --
the two routes share nothing but np.sqrt.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .postprocess import postprocess_pipeline, threshold
from .tensor import Tensor


class MetricUndefinedError(ValueError):
    """A metric was asked for a configuration where it has no value."""


def _pair(p, t):
    a, b = np.asarray(p), np.asarray(t)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"masks must be 2-d, got {a.shape}")
    for m in (a, b):
        if not np.isin(m, (0, 1)).all():
            raise ValueError("masks must contain only 0 and 1")
    return a.astype(bool), b.astype(bool)


def iou(pred, target):
    """Intersection over union; two empty masks count as a perfect match."""
    p, t = _pair(pred, target)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def dice_coef(pred, target):
    """2|P∩T| / (|P|+|T|); two empty masks count as a perfect match."""
    p, t = _pair(pred, target)
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / total)


def extract_boundary(mask):
    """(k,2) row/col coordinates of foreground pixels that touch background.

    A pixel is boundary if any of its 4-neighbors is background or lies
    outside the image; rows come out in row-major order.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got {m.shape}")
    padded = np.pad(m, 1, constant_values=False)
    interior = (m & padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def _boundary_pair(pred, target, caller):
    p, t = _pair(pred, target)
    bp, bt = extract_boundary(p), extract_boundary(t)
    if len(bp) == 0 or len(bt) == 0:
        raise MetricUndefinedError(
            f"{caller} needs two nonempty masks "
            f"(boundary sizes {len(bp)} and {len(bt)})")
    return bp, bt, p.shape


def _directed_sq(points, to_points, shape):
    """Integer squared distance from each of `points` to the set `to_points`.

    Exact Euclidean distance transform of the target set, read off at the
    source points; the nearest-site indices keep everything in integers.
    """
    img = np.zeros(shape, dtype=bool)
    img[to_points[:, 0], to_points[:, 1]] = True
    ny, nx = ndimage.distance_transform_edt(
        ~img, return_distances=False, return_indices=True)
    dy = points[:, 0] - ny[points[:, 0], points[:, 1]]
    dx = points[:, 1] - nx[points[:, 0], points[:, 1]]
    return (dy * dy + dx * dx).astype(np.int64)


def surface_distances(pred, target, caller="surface_distances"):
    """Pooled boundary-to-boundary distances, both directions, in pixels."""
    bp, bt, shape = _boundary_pair(pred, target, caller)
    sq = np.concatenate([_directed_sq(bp, bt, shape),
                         _directed_sq(bt, bp, shape)])
    return np.sqrt(sq.astype(np.float64))


def asd(pred, target):
    """Average symmetric surface distance in pixels; errors on empty masks."""
    d = surface_distances(pred, target, "asd")
    return float(d.sum() / d.size)


def hd95(pred, target):
    """95th percentile (linear interpolation) of the pooled distances."""
    d = surface_distances(pred, target, "hd95")
    return float(np.percentile(d, 95.0))


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class MetricRecord:
    sample_id: str
    view: str
    iou: float
    dice: float
    asd_px: float
    hd95_px: float


class MetricsReport:
    """Per-image records plus per-view and overall means.

    Records are kept sorted by (sample_id, view) so serialization and
    mean computation never depend on evaluation order.
    """

    FIELDS = ("iou", "dice", "asd_px", "hd95_px")

    def __init__(self, records):
        self.records = sorted(records, key=lambda r: (r.sample_id, r.view))
        if not self.records:
            raise ValueError("a metrics report needs at least one record")
        for r in self.records:
            if not (0.0 <= r.iou <= r.dice <= 1.0):
                raise ValueError(f"{r.sample_id}: expected 0 <= iou <= dice <= 1, "
                                 f"got iou={r.iou} dice={r.dice}")
            if r.asd_px < 0 or r.hd95_px < 0:
                raise ValueError(f"{r.sample_id}: negative surface distance")

    def _mean_over(self, records):
        return {f: float(np.mean([getattr(r, f) for r in records]))
                for f in self.FIELDS}

    def view_means(self):
        views = sorted({r.view for r in self.records})
        return {v: self._mean_over([r for r in self.records if r.view == v])
                for v in views}

    def overall_means(self):
        return self._mean_over(self.records)

    def to_csv(self):
        lines = ["id,view,iou,dice,asd,hd95"]
        for r in self.records:
            lines.append(f"{r.sample_id},{r.view},{r.iou:.6f},{r.dice:.6f},"
                         f"{r.asd_px:.6f},{r.hd95_px:.6f}")
        means = self.view_means()
        means["overall"] = self.overall_means()
        for view in sorted(v for v in means if v != "overall") + ["overall"]:
            m = means[view]
            lines.append(f"# mean,{view},{m['iou']:.6f},{m['dice']:.6f},"
                         f"{m['asd_px']:.6f},{m['hd95_px']:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_dataset(model, samples, postprocess=True):
    """Run the model over (id, view, image, mask) samples and score each.

    Images are fed one at a time in eval mode; the fine-stage probability
    map is binarized (full pipeline, or bare threshold when postprocess is
    off) and compared against the reference mask.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to evaluate")
    dtype = model.parameters()[0].data.dtype
    records = []
    for s in samples:
        x = Tensor(np.asarray(s.image, dtype=dtype)[None, None])
        _, fine = model.forward(x, mode="eval")
        prob = fine.data[0, 0]
        mask = postprocess_pipeline(prob) if postprocess else threshold(prob)
        ref = np.asarray(s.mask).astype(np.uint8)
        records.append(MetricRecord(
            sample_id=s.sample_id, view=s.view,
            iou=iou(mask, ref), dice=dice_coef(mask, ref),
            asd_px=asd(mask, ref), hd95_px=hd95(mask, ref)))
    return MetricsReport(records)
