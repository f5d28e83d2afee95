"""Grayscale image values and PGM/PPM file I/O.

Images are plain ``numpy.uint8`` arrays of shape ``(H, W)``. Color inputs
(PPM, or 3-channel arrays) are reduced to luma on ingest.
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .errors import PgmParseError, ShapeError

MIN_SIDE = 16
BT601 = (0.299, 0.587, 0.114)

_WS = b" \t\r\n\v\f"


def to_gray(rgb) -> np.ndarray:
    """ITU-R BT.601 luma of an ``(H, W, 3)`` array, rounded to uint8."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) color array, got {rgb.shape}")
    y = rgb @ np.asarray(BT601)
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def as_image(arr, min_side: int = MIN_SIDE) -> np.ndarray:
    """Validate and coerce ``arr`` to an ImageGray (uint8, 2-D, sides >= min_side)."""
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[2] == 3:
        a = to_gray(a)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D grayscale image, got shape {a.shape}")
    if a.shape[0] < min_side or a.shape[1] < min_side:
        raise ShapeError(f"image {a.shape} smaller than {min_side}x{min_side}")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255) or np.any(a != np.rint(a)):
            raise ShapeError("pixel values must be integers in [0, 255]")
        a = a.astype(np.uint8)
    return a


def resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic resize to ``(H, W)``; used when ingesting off-size generator output."""
    from PIL import Image

    h, w = size
    out = Image.fromarray(np.asarray(img, dtype=np.uint8)).resize((w, h), Image.BICUBIC)
    return np.asarray(out, dtype=np.uint8)


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset just past the single whitespace byte
    terminating the last token.
    """
    out = []
    pos = 0
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos] in _WS:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            break
        out.append(data[start:pos])
    return out, pos + 1


_FIELDS = ("magic", "width", "height", "maxval")


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P2/P5 (gray) or P3/P6 (color, converted to luma) bytes."""
    toks, offset = _tokens(data, 4)
    if not toks or toks[0] not in (b"P2", b"P5", b"P3", b"P6"):
        raise PgmParseError("magic", f"unsupported magic number {toks[0] if toks else b''!r}")
    if len(toks) < 4:
        raise PgmParseError(_FIELDS[len(toks)], "header truncated")
    magic = toks[0]
    vals = []
    for name, tok in zip(_FIELDS[1:], toks[1:]):
        if not re.fullmatch(rb"\d+", tok):
            raise PgmParseError(name, f"not a decimal integer: {tok!r}")
        vals.append(int(tok))
    width, height, maxval = vals
    if width <= 0 or height <= 0:
        raise PgmParseError("width" if width <= 0 else "height", "must be positive")
    if maxval != 255:
        raise PgmParseError("maxval", f"only maxval 255 is supported, got {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        payload = data[offset:offset + count]
        if len(payload) < count:
            raise PgmParseError("payload", f"expected {count} bytes, found {len(payload)}")
        pix = np.frombuffer(payload, dtype=np.uint8).copy()
    else:
        body = re.sub(rb"#[^\n]*", b"", data[offset:]).split()
        if len(body) < count:
            raise PgmParseError("payload", f"expected {count} samples, found {len(body)}")
        pix = np.array([int(t) for t in body[:count]], dtype=np.int64)
        if pix.max(initial=0) > 255:
            raise PgmParseError("payload", "sample exceeds maxval")
        pix = pix.astype(np.uint8)
    if channels == 3:
        return to_gray(pix.reshape(height, width, 3))
    return pix.reshape(height, width)


def encode_pgm(img) -> bytes:
    a = as_image(img, min_side=1)
    h, w = a.shape
    return b"P5\n%d %d\n255\n" % (w, h) + a.tobytes()


def load_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def save_image(img, path) -> None:
    """Write a binary P5 PGM atomically (temp file, then rename)."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(encode_pgm(img))
    os.replace(tmp, path)
