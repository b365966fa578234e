"""8-bit <-> float conversion and binary PPM (P6) I/O."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import TruncatedFileError, UnsupportedFormatError

_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> float32 in [0, 1]."""
    return pixels.astype(np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float image in [0, 1] -> uint8 by rounding; out-of-range values are clamped."""
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image.astype(np.float32) * np.float32(255.0)), 0, 255).astype(np.uint8)


def decode_ppm(blob: bytes) -> np.ndarray:
    """Parse a P6 PPM with maxval 255 into an (H, W, 3) uint8 array."""
    if blob[:2] != b"P6":
        raise UnsupportedFormatError(f"unsupported raster format (magic {blob[:2]!r}); only binary P6 PPM is read")
    m = _HEADER.match(blob)
    if m is None:
        raise UnsupportedFormatError("malformed P6 header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise UnsupportedFormatError(f"PPM maxval {maxval} is not supported (need 255)")
    if width < 1 or height < 1:
        raise UnsupportedFormatError(f"PPM dimensions must be positive, got {width}x{height}")
    need = width * height * 3
    payload = blob[m.end():m.end() + need]
    if len(payload) < need:
        raise TruncatedFileError(
            f"PPM declares {width}x{height} ({need} bytes) but only {len(payload)} payload bytes are present")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = to_uint8(pixels)
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels).tobytes()


def read_ppm_bytes(source) -> np.ndarray:
    return decode_ppm(Path(source).read_bytes())


def read_ppm(source) -> np.ndarray:
    """Read a PPM file as an ImageRGB: (H, W, 3) float32 in [0, 1]."""
    return from_uint8(read_ppm_bytes(source))


def write_ppm(image: np.ndarray, dest) -> None:
    Path(dest).write_bytes(encode_ppm(image))
