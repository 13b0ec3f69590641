import numpy as np
import pytest

from armrefine.pgm import mask_view, read_pgm, side_by_side, to_bytes, write_pgm


def test_single_pixel():
    assert to_bytes(np.zeros((1, 1), dtype=np.int32)) == b"P5\n1 1\n255\n\x00"


def test_header_and_row_major():
    raw = to_bytes(np.array([[1, 2, 3], [4, 5, 6]]))
    assert raw == b"P5\n3 2\n255\n" + bytes([1, 2, 3, 4, 5, 6])


def test_mask_roundtrip(tmp_path):
    mask = np.random.default_rng(0).integers(0, 8, (5, 7))
    write_pgm(mask, tmp_path / "m.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), mask)


def test_score_map_scaled():
    out = to_bytes(np.array([[-1.0, 0.0], [1.0, 3.0]]))
    assert out.endswith(bytes([0, 64, 128, 255]))
    assert to_bytes(np.full((1, 2), 0.3)).endswith(b"\x00\x00")


def test_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        to_bytes(np.array([[300]]))
    with pytest.raises(ValueError):
        to_bytes(np.zeros(3))
    (tmp_path / "bad.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")


def test_unwritable(tmp_path):
    with pytest.raises(OSError):
        write_pgm(np.zeros((1, 1), dtype=int), tmp_path / "missing" / "x.pgm")


def test_views():
    np.testing.assert_array_equal(mask_view(np.array([[0, 1, 3]]), 4), [[0, 85, 255]])
    joined = side_by_side(np.zeros((2, 1), np.uint8), np.ones((2, 1), np.uint8), gap=1)
    np.testing.assert_array_equal(joined, [[0, 255, 1], [0, 255, 1]])
