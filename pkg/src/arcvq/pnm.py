"""Binary PGM (P5) and PPM (P6) writers and readers."""

import numpy as np

from .errors import FormatError


def minmax_scale(a: np.ndarray) -> np.ndarray:
    """Map ``a`` linearly onto [0, 1]; a constant array maps to zeros."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def to_bytes(unit: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(unit) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str, unit: np.ndarray) -> None:
    """Write a 2-D array of values in [0, 1] as 8-bit grayscale."""
    img = to_bytes(unit)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got dims {list(img.shape)}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_ppm(path: str, unit: np.ndarray) -> None:
    """Write an h x w x 3 array of values in [0, 1] as 8-bit RGB."""
    img = to_bytes(unit)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs an h x w x 3 image, got dims {list(img.shape)}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pnm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM header")
    channels = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels:
        raise FormatError(f"{path}: truncated pixel data")
    return data.reshape((h, w) if channels == 1 else (h, w, 3))
