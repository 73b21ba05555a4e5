"""Flow (.flo), PPM/PGM image I/O and color-wheel flow visualization."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError
from .tensor import DTYPE

FLO_SENTINEL = 202021.25
_FLO_HEAD = struct.Struct("<fii")


def write_flo(flow: np.ndarray, path) -> None:
    """Write a (2, H, W) flow as little-endian Middlebury ``.flo``."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ConfigError(f"flow must be (2, H, W), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise NumericError("refusing to write non-finite flow")
    _, h, w = flow.shape
    payload = np.ascontiguousarray(flow.astype("<f4").transpose(1, 2, 0))
    with open(path, "wb") as fh:
        fh.write(_FLO_HEAD.pack(FLO_SENTINEL, w, h))
        fh.write(payload.tobytes())


def read_flo(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _FLO_HEAD.size:
        raise FormatError(f"corrupt flo: {path} is shorter than its header")
    magic, w, h = _FLO_HEAD.unpack_from(blob)
    if magic != FLO_SENTINEL:
        raise FormatError(f"not a flo file: {path} (sentinel {magic!r})")
    if w < 1 or h < 1:
        raise FormatError(f"corrupt flo: {path} declares {w}x{h}")
    need = _FLO_HEAD.size + 8 * w * h
    if len(blob) != need:
        raise FormatError(f"corrupt flo: {path} has {len(blob)} bytes, expected {need}")
    data = np.frombuffer(blob, "<f4", 2 * w * h, _FLO_HEAD.size).reshape(h, w, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1), dtype=DTYPE)


# ---------------------------------------------------------------------------
# netpbm


def _quantize(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise NumericError("image contains non-finite values")
    if img.min(initial=0.0) < 0 or img.max(initial=0.0) > 1:
        raise ConfigError("image values must lie in [0, 1]")
    return np.rint(img * 255).astype(np.uint8)


def _write_pnm(path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(pixels.tobytes())


def write_ppm(image: np.ndarray, path) -> None:
    """(3, H, W) floats in [0, 1] -> binary P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigError(f"PPM image must be (3, H, W), got {image.shape}")
    _write_pnm(path, b"P6", np.ascontiguousarray(_quantize(image).transpose(1, 2, 0)))


def write_pgm(image: np.ndarray, path) -> None:
    """(H, W) or (1, H, W) floats in [0, 1] -> binary P5."""
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ConfigError(f"PGM image must be (H, W), got {image.shape}")
    _write_pnm(path, b"P5", _quantize(image))


def write_pgm_bytes(values: np.ndarray, path) -> None:
    """Raw 8-bit (H, W) values -> binary P5, no scaling."""
    values = np.asarray(values)
    if values.ndim != 2 or values.dtype != np.uint8:
        raise ConfigError("raw PGM payload must be a 2-D uint8 array")
    _write_pnm(path, b"P5", values)


def _parse_pnm(blob: bytes, path) -> tuple[bytes, int, int, int]:
    """Parse the header; returns (magic, width, height, data offset)."""
    tokens: list[bytes] = []
    pos = 0
    n = len(blob)
    while len(tokens) < 4:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            if len(tokens) == 0:
                raise FormatError(f"malformed header in {path}: comment before magic")
            end = blob.find(b"\n", pos)
            if end < 0:
                raise FormatError(f"malformed header in {path}: unterminated comment")
            pos = end + 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"malformed header in {path}: truncated")
        tokens.append(blob[start:pos])
    if pos >= n or not blob[pos:pos + 1].isspace():
        raise FormatError(f"malformed header in {path}: missing separator after maxval")
    pos += 1
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"malformed header in {path}: non-integer field") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} in {path} (only 255)")
    if w < 1 or h < 1:
        raise FormatError(f"malformed header in {path}: size {w}x{h}")
    return magic, w, h, pos


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    got, w, h, pos = _parse_pnm(blob, path)
    if got != magic:
        raise FormatError(f"malformed header in {path}: magic {got!r}, expected {magic!r}")
    need = w * h * channels
    if len(blob) - pos != need:
        raise FormatError(f"{path}: pixel payload is {len(blob) - pos} bytes, expected {need}")
    return np.frombuffer(blob, np.uint8, need, pos).reshape(h, w, channels)


def read_ppm(path) -> np.ndarray:
    px = _read_pnm(path, b"P6", 3)
    return np.ascontiguousarray(px.transpose(2, 0, 1), dtype=DTYPE) / DTYPE(255)


def read_pgm_bytes(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)[:, :, 0].copy()


def read_pgm(path) -> np.ndarray:
    """Binary P5 -> (1, H, W) floats in [0, 1]."""
    return read_pgm_bytes(path)[None].astype(DTYPE) / DTYPE(255)


# ---------------------------------------------------------------------------
# visualization

_WHEEL_SEGMENTS = (15, 6, 4, 11, 13, 6)  # RY, YG, GC, CB, BM, MR


def make_colorwheel() -> np.ndarray:
    """(55, 3) wheel in [0, 255]."""
    ry, yg, gc, cb, bm, mr = _WHEEL_SEGMENTS
    wheel = np.zeros((sum(_WHEEL_SEGMENTS), 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def auto_max_norm(flow: np.ndarray) -> float:
    mag = np.hypot(flow[0].astype(np.float64), flow[1].astype(np.float64))
    return max(float(np.percentile(mag, 99)), 1e-6)


def flow_to_color(flow: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """Middlebury color-wheel rendering of a (2, H, W) flow as uint8 (3, H, W).

    ``max_norm=None`` normalizes by the 99th-percentile magnitude.
    """
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ConfigError(f"flow must be (2, H, W), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise NumericError("cannot visualize non-finite flow")
    if max_norm is None:
        max_norm = auto_max_norm(flow)
    elif not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    u = flow[0].astype(np.float64) / max_norm
    v = flow[1].astype(np.float64) / max_norm
    rad = np.minimum(np.hypot(u, v), 1.0)
    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    out = np.empty((3,) + u.shape, np.uint8)
    for ch in range(3):
        col = ((1 - f) * wheel[k0, ch] + f * wheel[k1, ch]) / 255.0
        col = 1 - rad * (1 - col)
        out[ch] = np.floor(255 * col).astype(np.uint8)
    return out
