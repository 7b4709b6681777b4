"""PGM reader/writer: round trips, quantization bound, malformed inputs."""

import numpy as np
import pytest

from spineseg.pgm import PgmFormatError, read_mask, read_pgm, write_mask, write_pgm


def test_uint8_round_trip_is_exact(tmp_path, rng):
    a = rng.integers(0, 256, size=(17, 23), dtype=np.uint8)
    p = tmp_path / "a.pgm"
    write_pgm(p, a)
    back = read_pgm(p)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(np.round(back * 255).astype(np.uint8), a)


def test_float_round_trip_within_half_level(tmp_path, rng):
    a = rng.random((9, 11)).astype(np.float32)
    p = tmp_path / "f.pgm"
    write_pgm(p, a)
    assert np.abs(read_pgm(p) - a).max() <= 1.0 / 510.0 + 1e-7


def test_grid_values_survive_exactly(tmp_path):
    # values already on the 256-level grid come back bit-identical
    a = (np.arange(256, dtype=np.float32) / 255.0).reshape(16, 16)
    p = tmp_path / "g.pgm"
    write_pgm(p, a)
    np.testing.assert_array_equal(read_pgm(p), a)


def test_mask_round_trip_bit_exact(tmp_path, rng):
    m = (rng.random((21, 13)) < 0.4).astype(np.uint8)
    p = tmp_path / "m.pgm"
    write_mask(p, m)
    np.testing.assert_array_equal(read_mask(p), m)


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.pgm"
    payload = bytes(range(6))
    p.write_bytes(b"P5\n# a comment\n3 # trailing\n2\n# more\n255\n" + payload)
    img = read_pgm(p)
    assert img.shape == (2, 3)
    np.testing.assert_array_equal((img * 255).round().astype(np.uint8).ravel(),
                                  np.frombuffer(payload, np.uint8))


@pytest.mark.parametrize("head, reason", [
    (b"P2\n3 2\n255\n", "ascii"),
    (b"P6\n3 2\n255\n", "magic"),
    (b"P5\n3 2\n254\n", "maxval"),
    (b"P5\n0 2\n255\n", "dims"),
    (b"P5\nx 2\n255\n", "field"),
])
def test_malformed_headers_are_rejected(tmp_path, head, reason):
    p = tmp_path / "bad.pgm"
    p.write_bytes(head + bytes(6))
    with pytest.raises(PgmFormatError):
        read_pgm(p)


def test_truncated_payload_is_rejected(tmp_path):
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(15))
    with pytest.raises(PgmFormatError, match="truncated"):
        read_pgm(p)


def test_write_rejects_out_of_range_floats(tmp_path):
    with pytest.raises(ValueError, match="leaves"):
        write_pgm(tmp_path / "x.pgm", np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "y.pgm", np.full((2, 2), -0.1))


def test_write_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))


def test_write_mask_rejects_non_binary(tmp_path):
    with pytest.raises(ValueError, match="0 and 1"):
        write_mask(tmp_path / "m.pgm", np.array([[0, 2]]))
