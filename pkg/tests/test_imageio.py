"""
Tests for PGM/PPM export and import.
"""
import numpy as np
import pytest

from app.errors import IoError
from app.numcore.rng import Rng
from app.utils.imageio import export_depth, export_image, export_mask, read_depth, read_pgm, read_ppm


def test_depth_is_stored_in_millimeters(tmp_path):
    path = tmp_path / "d.pgm16"
    export_depth(np.full((2, 3), 10.0), path)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n3 2\n65535\n")
    assert blob[len(b"P5\n3 2\n65535\n"):][:2] == (10000).to_bytes(2, "big")
    assert np.all(read_pgm(path) == 10000)


def test_depth_round_trip_within_half_millimeter(tmp_path):
    depth = Rng(0, "depth").uniform(1.0, 10.0, size=(8, 5))
    export_depth(depth, tmp_path / "d.pgm16")
    assert np.max(np.abs(read_depth(tmp_path / "d.pgm16") - depth)) <= 0.0005 + 1e-12


def test_depth_is_clamped(tmp_path):
    export_depth(np.array([[-1.0, 100.0]]), tmp_path / "d.pgm16")
    assert read_pgm(tmp_path / "d.pgm16").tolist() == [[0, 65535]]


def test_image_header_and_round_trip(tmp_path):
    image = Rng(1, "image").uniform(0.0, 1.0, size=(4, 6, 3))
    export_image(image, tmp_path / "i.ppm")
    assert (tmp_path / "i.ppm").read_bytes().startswith(b"P6\n6 4\n255\n")
    assert np.max(np.abs(read_ppm(tmp_path / "i.ppm") - image)) <= 0.5 / 255 + 1e-6


def test_mask_export(tmp_path):
    export_mask(np.array([[True, False]]), tmp_path / "m.pgm")
    assert (tmp_path / "m.pgm").read_bytes() == b"P5\n2 1\n255\n\xff\x00"


def test_bad_inputs(tmp_path):
    with pytest.raises(IoError):
        export_depth(np.zeros((2, 2, 2)), tmp_path / "d.pgm16")
    with pytest.raises(IoError):
        export_image(np.zeros((2, 2)), tmp_path / "i.ppm")
    (tmp_path / "x.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(IoError):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(IoError):
        read_pgm(tmp_path / "short.pgm")
    with pytest.raises(IoError):
        read_depth(tmp_path / "absent.pgm16")
