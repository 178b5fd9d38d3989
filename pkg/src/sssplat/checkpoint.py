"""Versioned binary scene checkpoint.

Layout (all little endian): magic ``SSSGS1``, u16 version, u32 Gaussian
count, u32 SH degree, bounds (6 f32), then one 29-float32 record per
Gaussian, then the network section: u8 kind (0 joint / 1 split), u32
tensor count, and per tensor a length-prefixed name, u8 rank, u32 dims
and the raw float32 data.  A checkpoint round-trips losslessly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mlp import MlpParams, SplitMlpParams
from .scene import Aabb, GaussianCloud, Scene, VIS_SH_DEGREE, VIS_SH_COEFFS

MAGIC = b"SSSGS1"
VERSION = 1

_RECORD_FIELDS = (
    ("positions", 3), ("rotations", 4), ("log_scales", 3),
    ("opacity_logits", 1), ("basecolor_logits", 3), ("roughness_logits", 1),
    ("metalness_logits", 1), ("subsurface_logits", 1), ("normals", 3),
    ("vis_sh", VIS_SH_COEFFS),
)
RECORD_FLOATS = sum(w for _, w in _RECORD_FIELDS)  # 29


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, scene: Scene, params) -> None:
    cloud = scene.cloud
    n = len(cloud)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HIi", VERSION, n, VIS_SH_DEGREE)
    out += np.concatenate([scene.bounds.lo, scene.bounds.hi]).astype("<f4").tobytes()

    record = np.empty((n, RECORD_FLOATS), np.float32)
    col = 0
    for name, width in _RECORD_FIELDS:
        arr = getattr(cloud, name)
        record[:, col:col + width] = arr.reshape(n, width)
        col += width
    out += record.astype("<f4").tobytes()

    kind = 1 if isinstance(params, SplitMlpParams) else 0
    tensors = params.tensors
    out += struct.pack("<BI", kind, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Load a checkpoint; returns (scene, params)."""
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a scene checkpoint")
    version, n, degree = struct.unpack_from("<HIi", raw, 6)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if degree != VIS_SH_DEGREE:
        raise CheckpointError(f"{path}: unsupported SH degree {degree}")
    pos = 6 + 10
    bounds = np.frombuffer(raw, "<f4", 6, pos).astype(np.float64)
    pos += 24
    record = np.frombuffer(raw, "<f4", n * RECORD_FLOATS, pos).astype(
        np.float64).reshape(n, RECORD_FLOATS)
    pos += n * RECORD_FLOATS * 4
    kw = {}
    col = 0
    for name, width in _RECORD_FIELDS:
        block = record[:, col:col + width]
        kw[name] = block[:, 0].copy() if width == 1 else block.copy()
        col += width
    cloud = GaussianCloud(**kw)
    scene = Scene(cloud, Aabb(bounds[:3], bounds[3:]))

    kind, count = struct.unpack_from("<BI", raw, pos)
    pos += 5
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode()
        pos += name_len
        ndim = raw[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(raw, "<f4", size, pos).astype(
            np.float64).reshape(shape)
        pos += size * 4
    if kind == 1:
        params = SplitMlpParams.from_tensors(tensors)
    else:
        params = MlpParams(tensors)
    return scene, params
