"""Binary PPM (P6) and PGM (P5) images with 8-bit samples."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int, path) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if i >= len(buf):
            raise ImageFormatError(f"{path}: truncated header")
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        tokens.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read(path: str | os.PathLike) -> np.ndarray:
    """Return ``(H, W, 3)`` for P6 or ``(H, W)`` for P5, dtype uint8."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    try:
        (magic, w, h, maxval), start = _header_tokens(buf, 4, path)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header ({exc})") from exc
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit samples are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = buf[start : start + n]
    if len(raster) != n:
        raise ImageFormatError(f"{path}: expected {n} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr.copy() if channels == 3 else arr[:, :, 0].copy()


def write(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write array of shape {image.shape}")
    h, w = image.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(image).tobytes())
