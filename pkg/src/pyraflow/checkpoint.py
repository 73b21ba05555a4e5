"""Binary checkpoint format.

Layout (little-endian)::

    b"PYFL"  u32 version (=1)
    config   u32 K, u32 H, u32 W, u64 seed,
             then per level, coarsest first: u32 kernel, u32 n_widths, u32 widths[n_widths]
    meta     u32 epoch, i32 level, f64 train_loss, f64 val_epe
    weights  per level, coarsest first; per layer: f32 weight[out*in*k*k], f32 bias[out]
    u32 CRC-32 of every preceding byte
"""

from __future__ import annotations

import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import LevelSpec, PyramidConfig, PyramidNet, count_params, level_layout, net_from_layers
from .tensor import ConvLayer

log = logging.getLogger(__name__)

MAGIC = b"PYFL"
VERSION = 1
_HEAD = struct.Struct("<4sI")
_CONFIG = struct.Struct("<IIIQ")
_META = struct.Struct("<Iidd")
_F32 = np.dtype("<f4")


@dataclass
class CheckpointMeta:
    epoch: int = 0
    level: int = -1
    train_loss: float = math.nan
    val_epe: float = math.nan


@dataclass
class Checkpoint:
    net: PyramidNet
    meta: CheckpointMeta


def encoded_size(levels: list[LevelSpec], n_params: int) -> int:
    specs = sum(8 + 4 * len(spec.widths) for spec in levels)
    return _HEAD.size + _CONFIG.size + specs + _META.size + 4 * n_params + 4


def encode(net: PyramidNet, meta: CheckpointMeta | None = None) -> bytes:
    meta = meta or CheckpointMeta()
    cfg = net.config
    layout = level_layout(net)
    parts = [_HEAD.pack(MAGIC, VERSION), _CONFIG.pack(len(layout), cfg.height, cfg.width, cfg.seed)]
    for spec in reversed(layout):
        parts.append(struct.pack(f"<II{len(spec.widths)}I", spec.kernel, len(spec.widths), *spec.widths))
    parts.append(_META.pack(meta.epoch, meta.level, meta.train_loss, meta.val_epe))
    for layer in net.layers():
        parts.append(layer.weight.astype(_F32).tobytes())
        parts.append(layer.bias.astype(_F32).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size + 4:
        raise FormatError("checkpoint truncated: shorter than its header")
    magic, version = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored:
        raise FormatError("CRC mismatch: checkpoint is corrupt")
    try:
        pos = _HEAD.size
        k, h, w, seed = _CONFIG.unpack_from(blob, pos)
        pos += _CONFIG.size
        layout = []
        for _ in range(k):
            kernel, n = struct.unpack_from("<II", blob, pos)
            pos += 8
            widths = struct.unpack_from(f"<{n}I", blob, pos)
            pos += 4 * n
            layout.append(LevelSpec(widths, kernel))
        layout.reverse()
        epoch, level, train_loss, val_epe = _META.unpack_from(blob, pos)
        pos += _META.size
        nets = [[] for _ in layout]
        for lvl in reversed(range(k)):
            spec = layout[lvl]
            pairs = list(zip(spec.widths[:-1], spec.widths[1:]))
            for i, (cin, cout) in enumerate(pairs):
                nw = cout * cin * spec.kernel**2
                weight = np.frombuffer(blob, _F32, nw, pos).reshape(cout, cin, spec.kernel, spec.kernel)
                pos += 4 * nw
                bias = np.frombuffer(blob, _F32, cout, pos)
                pos += 4 * cout
                act = "none" if i == len(pairs) - 1 else "relu"
                nets[lvl].append(ConvLayer(weight.copy(), bias.copy(), act))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"checkpoint payload malformed: {exc}") from None
    if pos != len(blob) - 4:
        raise FormatError(f"checkpoint has {len(blob) - 4 - pos} trailing bytes")
    meta = CheckpointMeta(epoch, level, train_loss, val_epe)
    if k == 0:
        return Checkpoint(PyramidNet(PyramidConfig(levels=1, height=h, width=w, seed=seed), []), meta)
    same = all(spec == layout[0] for spec in layout)
    config = PyramidConfig(
        levels=k,
        height=h,
        width=w,
        widths=layout[0].widths,
        kernel=layout[0].kernel,
        predictors=None if same else tuple(layout),
        seed=seed,
    )
    return Checkpoint(net_from_layers(config, nets), meta)


def save_checkpoint(net: PyramidNet, meta: CheckpointMeta | None, path) -> int:
    """Write ``net`` to ``path`` atomically; returns the file size in bytes."""
    path = Path(path)
    blob = encode(net, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    size = path.stat().st_size
    log.info("saved checkpoint %s: %d bytes, %d parameters", path, size, count_params(net))
    return size


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(blob)
