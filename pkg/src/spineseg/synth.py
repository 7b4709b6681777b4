"""Deterministic synthetic multi-view spine radiographs.

Each "patient" gets three views of the same anatomy style: a coronal
standing shot (mild S-curve), and left-/right-bending shots where the
spine bows toward the named side. The spine is a smooth vertical band:

    centerline x(y) = size/2 + A sin(pi y/size + phi) [+ harmonic] + drift

with the bow amplitude A signed by view. Images add soft band edges,
rib-like distractor ridges, an illumination gradient, blur and noise --
all dialed by a quality tier, all fully determined by the seed.

Nothing here is anatomy; the point is a dataset that is free, endless,
and bit-reproducible, with enough structure that segmenting it is not
trivial and enough determinism that tests can pin exact bytes.
"""

import io
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .pgm import read_mask, read_pgm, write_mask, write_pgm

VIEWS = ("coronal", "left-bending", "right-bending")
QUALITIES = ("high", "medium", "low")
SPLITS = ("train", "val", "test")

# per-quality dials: (band contrast, distractor count, blur sigma, noise sd)
_QUALITY = {
    "high": (0.75, 2, 0.8, 0.005),
    "medium": (0.60, 4, 1.2, 0.012),
    "low": (0.45, 6, 1.5, 0.022),
}


@dataclass
class SegmentationSample:
    sample_id: str
    view: str
    image: np.ndarray  # float32 (h, w) in [0, 1]
    mask: np.ndarray   # uint8 (h, w) of {0, 1}
    quality: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.sample_id}: image {self.image.shape} "
                             f"vs mask {self.mask.shape}")


def minmax_normalize(image):
    """Map an image linearly onto [0,1]; a constant image has no such map."""
    a = np.asarray(image, dtype=np.float32)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        raise ValueError("constant image cannot be min-max normalized")
    return (a - lo) / np.float32(hi - lo)


def _centerline(rng, view, size, y):
    phi = rng.uniform(-0.3, 0.3)
    if view == "coronal":
        # mild S: small primary bow either way plus a second harmonic
        a = rng.uniform(0.02, 0.05) * size * (1 if rng.random() < 0.5 else -1)
        a2 = rng.uniform(0.02, 0.06) * size * (1 if rng.random() < 0.5 else -1)
    else:
        sign = -1.0 if view == "left-bending" else 1.0
        a = sign * rng.uniform(0.08, 0.14) * size
        a2 = sign * rng.uniform(0.0, 0.02) * size
    phi2 = rng.uniform(0.0, 2.0 * np.pi)
    drift = rng.uniform(-0.04, 0.04) * size
    return (size / 2.0
            + a * np.sin(np.pi * y / size + phi)
            + a2 * np.sin(2.0 * np.pi * y / size + phi2)
            + drift * (y / size - 0.5))


def generate_sample(seed, view, size=64, quality="high", sample_id=None):
    """One deterministic sample; same arguments give identical bits."""
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
    if quality not in QUALITIES:
        raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")
    if size < 32 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 32, got {size}")

    contrast, n_ribs, blur, noise_sd = _QUALITY[quality]
    rng = np.random.default_rng(seed)
    y = np.arange(size, dtype=np.float64)
    x = np.arange(size, dtype=np.float64)

    cx = _centerline(rng, view, size, y)
    # half-width wobbles smoothly between 3% and 8% of the image side
    hw = size * (0.055 + 0.025 * np.sin(2.0 * np.pi * y / size
                                        + rng.uniform(0.0, 2.0 * np.pi)))
    dist = np.abs(x[None, :] - cx[:, None])
    mask = (dist <= hw[:, None]).astype(np.uint8)

    # soft-edged band: full intensity inside, ~2px fade outside
    band = 1.0 / (1.0 + np.exp((dist - hw[:, None]) / 1.5))
    img = 0.15 + contrast * band

    for _ in range(n_ribs):
        ry = rng.uniform(0.1, 0.9) * size
        slope = rng.uniform(-0.15, 0.15)
        thick = rng.uniform(0.8, 2.0)
        gain = rng.uniform(0.08, 0.18)
        off = y[:, None] - (ry + slope * x[None, :])
        img += gain * np.exp(-0.5 * (off / thick) ** 2)

    gx, gy = rng.uniform(-0.08, 0.08, size=2)
    img += gx * (x[None, :] / size - 0.5) + gy * (y[:, None] / size - 0.5)

    img = ndimage.gaussian_filter(img, sigma=blur)
    img += rng.normal(0.0, noise_sd, size=img.shape)
    img = minmax_normalize(np.clip(img, 0.0, None))

    if sample_id is None:
        sample_id = f"adhoc{int(np.random.default_rng(seed).integers(1 << 31))}"
    return SegmentationSample(sample_id=sample_id, view=view,
                              image=img.astype(np.float32), mask=mask,
                              quality=quality)


# ---------------------------------------------------------------------------
# dataset assembly: patients, splits, manifest


def _view_seed(base_seed, patient_index, view_index):
    """A stable integer seed per (patient, view), derived, never colliding."""
    ss = np.random.SeedSequence(entropy=base_seed,
                                spawn_key=(patient_index, view_index))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_dataset(counts=(8, 2, 2), size=64, seed=0, quality_cycle=None):
    """Samples for train/val/test splits plus a manifest of what was made.

    counts are patients per split; every patient contributes one sample of
    each view to its own split, so no id ever crosses splits. Qualities
    cycle over patients (uniform thirds by default). Returns a dict
    split -> [SegmentationSample] and the manifest as a list of rows
    (id, view, split, quality, seed) from which any sample can be rebuilt.
    """
    if len(counts) != len(SPLITS):
        raise ValueError(f"counts must give {len(SPLITS)} splits")
    if min(counts) < 1:
        raise ValueError("every split needs at least one patient")
    quality_cycle = tuple(quality_cycle or QUALITIES)
    datasets = {split: [] for split in SPLITS}
    manifest = []
    patient = 0
    for split, n in zip(SPLITS, counts):
        for _ in range(n):
            pid = f"case{patient:03d}"
            quality = quality_cycle[patient % len(quality_cycle)]
            for vi, view in enumerate(VIEWS):
                s = _view_seed(seed, patient, vi)
                datasets[split].append(generate_sample(
                    s, view, size=size, quality=quality, sample_id=pid))
                manifest.append((pid, view, split, quality, s))
            patient += 1
    return datasets, manifest


def manifest_to_tsv(manifest):
    buf = io.StringIO()
    buf.write("id\tview\tsplit\tquality\tseed\n")
    for row in manifest:
        buf.write("\t".join(str(c) for c in row) + "\n")
    return buf.getvalue()


def manifest_from_tsv(text):
    lines = text.strip().split("\n")
    if lines[0] != "id\tview\tsplit\tquality\tseed":
        raise ValueError("unrecognized manifest header")
    rows = []
    for ln in lines[1:]:
        pid, view, split, quality, s = ln.split("\t")
        rows.append((pid, view, split, quality, int(s)))
    return rows


def write_dataset(root, datasets, manifest):
    """Lay out <root>/<split>/<id>_<view>.pgm (+_mask.pgm) + manifest.tsv."""
    for split, samples in datasets.items():
        d = os.path.join(root, split)
        os.makedirs(d, exist_ok=True)
        for s in samples:
            stem = os.path.join(d, f"{s.sample_id}_{s.view}")
            write_pgm(stem + ".pgm", s.image)
            write_mask(stem + "_mask.pgm", s.mask)
    with open(os.path.join(root, "manifest.tsv"), "w") as f:
        f.write(manifest_to_tsv(manifest))


def load_dataset(root, split):
    """Read one split back; ordering follows the manifest."""
    with open(os.path.join(root, "manifest.tsv")) as f:
        manifest = manifest_from_tsv(f.read())
    samples = []
    for pid, view, msplit, quality, _ in manifest:
        if msplit != split:
            continue
        stem = os.path.join(root, msplit, f"{pid}_{view}")
        samples.append(SegmentationSample(
            sample_id=pid, view=view, image=read_pgm(stem + ".pgm"),
            mask=read_mask(stem + "_mask.pgm"), quality=quality))
    if not samples:
        raise ValueError(f"no samples for split {split!r} under {root}")
    return samples


# ---------------------------------------------------------------------------
# view-balanced sampling


def epoch_size(samples):
    counts = [sum(1 for s in samples if s.view == v) for v in VIEWS]
    if min(counts) == 0:
        missing = VIEWS[counts.index(0)]
        raise ValueError(f"no samples for view {missing!r}")
    return len(VIEWS) * max(counts)


def balanced_batches(samples, seed):
    """Endless id stream interleaving views so each gets equal iterations.

    Per epoch, each view's sample list is reshuffled (epoch-salted rng) and
    the stream walks v1,v2,v3,v1,... for max-count rounds; shorter views
    wrap around their shuffle. Yields (epoch, sample) pairs.
    """
    by_view = {v: [s for s in samples if s.view == v] for v in VIEWS}
    for v in VIEWS:
        if not by_view[v]:
            raise ValueError(f"no samples for view {v!r}")
    rounds = max(len(g) for g in by_view.values())
    epoch = 0
    while True:
        orders = {}
        for vi, v in enumerate(VIEWS):
            r = np.random.default_rng([seed, epoch, vi])
            orders[v] = [by_view[v][j] for j in r.permutation(len(by_view[v]))]
        for j in range(rounds):
            for v in VIEWS:
                yield epoch, orders[v][j % len(orders[v])]
        epoch += 1


def resize_with_pad(image, size, is_mask=False):
    """Aspect-preserving resize onto a size x size square, zero-padded.

    Not used by the synthetic pipeline (it generates squares); provided
    for feeding external scans through the same models.
    """
    a = np.asarray(image)
    h, w = a.shape
    scale = size / max(h, w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    out = ndimage.zoom(a.astype(np.float64), (nh / h, nw / w),
                       order=0 if is_mask else 1, grid_mode=True,
                       mode="grid-constant")
    canvas = np.zeros((size, size), dtype=np.float64)
    top, left = (size - nh) // 2, (size - nw) // 2
    canvas[top:top + nh, left:left + nw] = out[:nh, :nw]
    if is_mask:
        return (canvas >= 0.5).astype(np.uint8)
    return np.clip(canvas, 0.0, 1.0).astype(np.float32)
