"""Image file IO: 8-bit PNG, float EXR (scanline subset) and Radiance HDR.

The EXR codec covers what this package reads and writes: single-part
scanline files, FLOAT or HALF channels, NONE/ZIP/ZIPS compression for
reading, NONE for writing.  HDR files use the RGBE encoding with support
for both flat and run-length scanlines when reading.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

_EXR_MAGIC = b"\x76\x2f\x31\x01"
_PT_HALF = 1
_PT_FLOAT = 2


# --------------------------------------------------------------------- PNG
def write_png(path, img, bitdepth: int = 8) -> None:
    """Write a [0, 1] float image (H, W[, C]) as PNG."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bitdepth == 8:
        data = np.round(img * 255.0).astype(np.uint8)
    elif bitdepth == 16:
        if img.ndim != 2:
            raise ValueError("16-bit PNG supported for single-channel only")
        data = np.round(img * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"unsupported bit depth {bitdepth}")
    if data.ndim == 3 and data.shape[2] not in (3, 4):
        raise ValueError(f"unsupported channel count {data.shape}")
    Image.fromarray(data).save(Path(path))


def read_png(path) -> np.ndarray:
    """Read a PNG to float [0, 1]; keeps the channel count of the file."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def read_mask(path) -> np.ndarray:
    """Read an object mask: alpha channel if present, else luminance."""
    arr = read_png(path)
    if arr.ndim == 3 and arr.shape[2] == 4:
        return arr[:, :, 3]
    if arr.ndim == 3:
        return arr.mean(axis=2)
    return arr


# --------------------------------------------------------------------- EXR
def _exr_attr(name: bytes, typ: bytes, data: bytes) -> bytes:
    return name + b"\0" + typ + b"\0" + struct.pack("<i", len(data)) + data


def write_exr(path, img) -> None:
    """Write (H, W[, C]) float data as an uncompressed scanline EXR."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    names = {1: ["Y"], 3: ["B", "G", "R"], 4: ["A", "B", "G", "R"]}.get(c)
    if names is None:
        raise ValueError(f"unsupported channel count {c}")
    # channel data indices matching the alphabetical EXR channel order
    source = {1: [0], 3: [2, 1, 0], 4: [3, 2, 1, 0]}[c]

    chlist = b""
    for name in names:
        chlist += name.encode() + b"\0" + struct.pack("<i", _PT_FLOAT)
        chlist += struct.pack("<i", 0) + struct.pack("<ii", 1, 1)
    chlist += b"\0"
    box = struct.pack("<4i", 0, 0, w - 1, h - 1)
    header = (_EXR_MAGIC + struct.pack("<i", 2)
              + _exr_attr(b"channels", b"chlist", chlist)
              + _exr_attr(b"compression", b"compression", b"\0")
              + _exr_attr(b"dataWindow", b"box2i", box)
              + _exr_attr(b"displayWindow", b"box2i", box)
              + _exr_attr(b"lineOrder", b"lineOrder", b"\0")
              + _exr_attr(b"pixelAspectRatio", b"float", struct.pack("<f", 1.0))
              + _exr_attr(b"screenWindowCenter", b"v2f", struct.pack("<ff", 0, 0))
              + _exr_attr(b"screenWindowWidth", b"float", struct.pack("<f", 1.0))
              + b"\0")
    chunk_size = 8 + len(names) * w * 4
    base = len(header) + 8 * h
    offsets = struct.pack(f"<{h}Q", *(base + y * chunk_size for y in range(h)))
    chunks = []
    for y in range(h):
        payload = b"".join(img[y, :, s].tobytes() for s in source)
        chunks.append(struct.pack("<ii", y, len(payload)) + payload)
    Path(path).write_bytes(header + offsets + b"".join(chunks))


def _exr_unpredict(data: bytes) -> bytes:
    buf = bytearray(data)
    for i in range(1, len(buf)):
        buf[i] = (buf[i] + buf[i - 1] - 128) & 0xFF
    half = (len(buf) + 1) // 2
    out = bytearray(len(buf))
    out[0::2] = buf[:half]
    out[1::2] = buf[half:]
    return bytes(out)


def read_exr(path) -> np.ndarray:
    """Read a scanline EXR to float64 (H, W[, C])."""
    raw = Path(path).read_bytes()
    if raw[:4] != _EXR_MAGIC:
        raise ValueError(f"{path}: not an EXR file")
    pos = 8
    channels = []
    compression = 0
    xmin = ymin = xmax = ymax = 0
    while True:
        end = raw.index(b"\0", pos)
        if end == pos:
            pos += 1
            break
        name = raw[pos:end]
        pos = end + 1
        end = raw.index(b"\0", pos)
        pos = end + 1
        (size,) = struct.unpack_from("<i", raw, pos)
        pos += 4
        data = raw[pos:pos + size]
        pos += size
        if name == b"channels":
            p = 0
            while data[p] != 0:
                e = data.index(b"\0", p)
                cname = data[p:e].decode()
                ptype = struct.unpack_from("<i", data, e + 1)[0]
                channels.append((cname, ptype))
                p = e + 1 + 16
        elif name == b"compression":
            compression = data[0]
        elif name == b"dataWindow":
            xmin, ymin, xmax, ymax = struct.unpack("<4i", data)
    if compression not in (0, 2, 3):
        raise ValueError(f"{path}: unsupported EXR compression {compression}")
    w = xmax - xmin + 1
    h = ymax - ymin + 1
    lines_per_block = {0: 1, 2: 1, 3: 16}[compression]
    n_blocks = (h + lines_per_block - 1) // lines_per_block
    offsets = struct.unpack_from(f"<{n_blocks}Q", raw, pos)

    planes = {name: np.empty((h, w), np.float64) for name, _ in channels}
    bpp = {name: (2 if t == _PT_HALF else 4) for name, t in channels}
    for off in offsets:
        y0, size = struct.unpack_from("<ii", raw, off)
        y0 -= ymin
        data = raw[off + 8:off + 8 + size]
        n_lines = min(lines_per_block, h - y0)
        expect = sum(bpp[n] for n, _ in channels) * w * n_lines
        if compression and size < expect:
            data = _exr_unpredict(zlib.decompress(data))
        p = 0
        for line in range(n_lines):
            for cname, ptype in channels:
                nb = bpp[cname] * w
                dt = np.float16 if ptype == _PT_HALF else np.float32
                planes[cname][y0 + line] = np.frombuffer(
                    data[p:p + nb], dtype=np.dtype(dt).newbyteorder("<"))
                p += nb
    names = [n for n, _ in channels]
    if names == ["Y"]:
        return planes["Y"]
    order = [n for n in ("R", "G", "B", "A") if n in names]
    if len(order) != len(names):
        order = sorted(names)
    return np.stack([planes[n] for n in order], axis=-1)


# --------------------------------------------------------------------- HDR
def write_hdr(path, img) -> None:
    """Write (H, W, 3) linear float data as flat (non-RLE) Radiance HDR."""
    img = np.maximum(np.asarray(img, dtype=np.float64), 0.0)
    h, w, _ = img.shape
    peak = img.max(axis=2)
    rgbe = np.zeros((h, w, 4), np.uint8)
    nz = peak > 1e-32
    mant, expo = np.frexp(peak[nz])
    scale = mant * 256.0 / peak[nz]
    rgbe[nz, 0] = np.minimum(img[nz, 0] * scale, 255.0).astype(np.uint8)
    rgbe[nz, 1] = np.minimum(img[nz, 1] * scale, 255.0).astype(np.uint8)
    rgbe[nz, 2] = np.minimum(img[nz, 2] * scale, 255.0).astype(np.uint8)
    rgbe[nz, 3] = (expo + 128).astype(np.uint8)
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n"
    Path(path).write_bytes(header.encode("ascii") + rgbe.tobytes())


def _rgbe_to_linear(rgbe: np.ndarray) -> np.ndarray:
    expo = rgbe[..., 3].astype(np.int32)
    scale = np.where(expo == 0, 0.0, np.ldexp(1.0, expo - 136))
    return rgbe[..., :3].astype(np.float64) * scale[..., None]


def read_hdr(path) -> np.ndarray:
    """Read a Radiance HDR (flat or new-style RLE) to linear (H, W, 3)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"#?"):
        raise ValueError(f"{path}: not a Radiance HDR file")
    pos = raw.index(b"\n\n") + 2
    eol = raw.index(b"\n", pos)
    dims = raw[pos:eol].split()
    if dims[0] != b"-Y" or dims[2] != b"+X":
        raise ValueError(f"{path}: unsupported HDR orientation {dims}")
    h, w = int(dims[1]), int(dims[3])
    pos = eol + 1
    out = np.empty((h, w, 4), np.uint8)
    for y in range(h):
        if pos + 4 <= len(raw) and raw[pos] == 2 and raw[pos + 1] == 2 \
                and (raw[pos + 2] << 8 | raw[pos + 3]) == w:
            pos += 4
            for comp in range(4):
                x = 0
                while x < w:
                    count = raw[pos]
                    pos += 1
                    if count > 128:  # run
                        out[y, x:x + count - 128, comp] = raw[pos]
                        pos += 1
                        x += count - 128
                    else:
                        out[y, x:x + count, comp] = np.frombuffer(
                            raw, np.uint8, count, pos)
                        pos += count
                        x += count
        else:
            line = np.frombuffer(raw, np.uint8, w * 4, pos).reshape(w, 4)
            out[y] = line
            pos += w * 4
    return _rgbe_to_linear(out)


def read_float_image(path) -> np.ndarray:
    """Read an EXR or HDR by extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".exr":
        return read_exr(path)
    if suffix == ".hdr":
        return read_hdr(path)
    raise ValueError(f"unsupported float image format: {path}")
