"""Binary PPM (P6) / PGM (P5) image codec, maxval 255, bit-exact round trip."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def encode_ppm(img: np.ndarray) -> bytes:
    """uint8 [H,W,3] -> P6 bytes."""
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H,W,3], got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    """uint8 [H,W] -> P5 bytes."""
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H,W], got {img.dtype} {img.shape}")
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def _parse_header(raw: bytes, magic: bytes):
    if raw[:2] != magic:
        raise DataError(f"unsupported magic {raw[:2]!r}, expected {magic!r}")
    # three whitespace-separated header fields after the magic, then one
    # whitespace byte before the raster; '#' comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace before raster
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataError(f"malformed header fields {fields}") from None
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval}")
    return w, h, pos


def decode_ppm(raw: bytes) -> np.ndarray:
    w, h, pos = _parse_header(raw, b"P6")
    data = raw[pos:pos + 3 * w * h]
    if len(data) != 3 * w * h:
        raise DataError("truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def decode_pgm(raw: bytes) -> np.ndarray:
    w, h, pos = _parse_header(raw, b"P5")
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise DataError("truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def write_ppm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def write_pgm(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(img))
