"""Binary PGM (P5, maxval 255) reading and writing.

The whole dataset lives in this one format: grayscale images as rounded
8-bit quantizations of [0,1] floats, masks as {0,255}. ASCII PGM (P2) is
deliberately rejected -- one format, one parser.
"""

import numpy as np


class PgmFormatError(ValueError):
    """Header or payload of a PGM file is not what we write."""


def write_pgm(path, image):
    """Quantize a [0,1] float image (or pass through uint8) to P5.

    Float inputs are rounded to the nearest of 256 levels, so a value
    survives a write/read round trip to within 1/510.
    """
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError(f"PGM wants a 2-d array, got {a.shape}")
    if a.dtype == np.uint8:
        q = a
    else:
        if a.min() < 0 or a.max() > 1:
            raise ValueError("float image leaves [0, 1]")
        q = np.round(a * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(q).tobytes())


def _tokens(f):
    """Yield whitespace-separated header tokens, skipping # comments."""
    while True:
        c = f.read(1)
        if not c:
            raise PgmFormatError("unexpected end of header")
        if c.isspace():
            continue
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        tok = c
        while True:
            c = f.read(1)
            if not c or c.isspace():
                break
            tok += c
        yield tok


def read_pgm(path):
    """Read a P5 file back to float32 in [0,1] (pixel / 255)."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic == b"P2":
            raise PgmFormatError("ASCII PGM (P2) is not supported; use P5")
        if magic != b"P5":
            raise PgmFormatError(f"not a P5 PGM (magic {magic!r})")
        toks = _tokens(f)
        try:
            w, h, maxval = (int(next(toks)) for _ in range(3))
        except ValueError as e:
            raise PgmFormatError(f"bad header field: {e}") from None
        if maxval != 255:
            raise PgmFormatError(f"expected maxval 255, got {maxval}")
        if w <= 0 or h <= 0:
            raise PgmFormatError(f"bad dimensions {w}x{h}")
        payload = f.read(w * h)
        if len(payload) != w * h:
            raise PgmFormatError(
                f"truncated payload: {len(payload)} of {w * h} bytes")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return raw.astype(np.float32) / np.float32(255.0)


def write_mask(path, mask):
    """Write a {0,1} mask as {0,255} so the round trip is bit-exact."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must contain only 0 and 1")
    write_pgm(path, (m.astype(np.uint8) * 255))


def read_mask(path):
    return (read_pgm(path) >= 0.5).astype(np.uint8)
