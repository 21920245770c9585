"""
Binary PGM/PPM readers and writers.

Depth maps are 16-bit PGM in millimeters, images 8-bit PPM, masks 8-bit PGM.
Headers are always written as "P5\\n<w> <h>\\n<maxval>\\n" / "P6\\n<w> <h>\\n255\\n".
"""
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from ..errors import IoError

PathLike = Union[str, Path]
DEPTH_MAXVAL = 65535


def _write(path: PathLike, header: str, payload: bytes) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(header.encode("ascii") + payload)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from None


def export_depth(depth: np.ndarray, path: PathLike) -> None:
    """Write (H, W) meters as a 16-bit big-endian PGM of round(depth * 1000), clamped to [0, 65535]."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise IoError(f"depth map must be 2-D, got shape {depth.shape}")
    mm = np.clip(np.round(depth * 1000.0), 0, DEPTH_MAXVAL).astype(">u2")
    h, w = depth.shape
    _write(path, f"P5\n{w} {h}\n{DEPTH_MAXVAL}\n", mm.tobytes())


def export_image(image: np.ndarray, path: PathLike) -> None:
    """Write (H, W, 3) floats in [0, 1] as a binary PPM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise IoError(f"image must be (H, W, 3), got shape {image.shape}")
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = image.shape
    _write(path, f"P6\n{w} {h}\n255\n", pixels.tobytes())


def export_mask(mask: np.ndarray, path: PathLike) -> None:
    """Write a boolean (H, W) mask as an 8-bit PGM (255 = valid)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    _write(path, f"P5\n{w} {h}\n255\n", (mask.astype(np.uint8) * 255).tobytes())


def _read_header(blob: bytes, magic: bytes, path: PathLike) -> Tuple[int, int, int, int]:
    """Parse "<magic> <w> <h> <maxval>" followed by one whitespace byte; returns (w, h, maxval, offset)."""
    if not blob.startswith(magic):
        raise IoError(f"{path}: expected a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise IoError(f"{path}: malformed header")
        fields.append(int(blob[start:pos]))
    w, h, maxval = fields
    return w, h, maxval, pos + 1


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from None


def read_pgm(path: PathLike) -> np.ndarray:
    """Raw PGM samples as (H, W) integers (uint16 when maxval > 255)."""
    blob = _read(path)
    w, h, maxval, offset = _read_header(blob, b"P5", path)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    if len(blob) - offset < need:
        raise IoError(f"{path}: truncated pixel data")
    return np.frombuffer(blob[offset:offset + need], dtype=dtype).reshape(h, w).astype(
        np.uint16 if maxval > 255 else np.uint8)


def read_depth(path: PathLike) -> np.ndarray:
    """16-bit depth PGM back to meters."""
    return read_pgm(path).astype(np.float64) / 1000.0


def read_ppm(path: PathLike) -> np.ndarray:
    """Binary PPM as (H, W, 3) floats in [0, 1]."""
    blob = _read(path)
    w, h, maxval, offset = _read_header(blob, b"P6", path)
    if maxval != 255:
        raise IoError(f"{path}: only 8-bit PPM is supported, maxval {maxval}")
    need = w * h * 3
    if len(blob) - offset < need:
        raise IoError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(blob[offset:offset + need], dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float32) / 255.0
