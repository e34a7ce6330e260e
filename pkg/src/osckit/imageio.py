"""Binary PGM/PPM image files and cached remap tables.

PGM (P5) carries 8- or 16-bit grayscale, PPM (P6) color; 16-bit samples are
big-endian per the Netpbm convention. Key=value comment lines written after
the magic number round-trip as a metadata dict.

Remap tables are float32 little-endian (u, v) pairs, row major, behind a
16-byte header: the magic "OSCREMAP", then width and height as u32. Range
maps reuse the container with magic "OSCRANGE" and one float per pixel.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

REMAP_MAGIC = b"OSCREMAP"
RANGE_MAGIC = b"OSCRANGE"


def write_pnm(path, image: np.ndarray, metadata: dict | None = None) -> None:
    """Write a grayscale (H, W) or color (H, W, 3) image.

    dtype uint8 maps to maxval 255, uint16 to 65535.
    """
    image = np.asarray(image)
    if image.dtype == np.uint8:
        maxval = 255
    elif image.dtype == np.uint16:
        maxval = 65535
    else:
        raise ValueError(f"image dtype must be uint8 or uint16, got {image.dtype}")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"image shape {image.shape} is not grayscale or RGB")
    h, w = image.shape[:2]
    lines = [magic]
    for key, value in (metadata or {}).items():
        lines.append(f"# {key}={value}".encode())
    lines.append(f"{w} {h}".encode())
    lines.append(str(maxval).encode())
    header = b"\n".join(lines) + b"\n"
    body = image.astype(">u2" if maxval == 65535 else "u1").tobytes()
    Path(path).write_bytes(header + body)


def read_pnm(path) -> tuple[np.ndarray, dict]:
    """Read a binary PGM/PPM; returns (image, metadata dict)."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise ParseError(f"{path}: not a binary PGM/PPM file")
    color = data[:2] == b"P6"
    pos = 2
    fields = []
    metadata: dict[str, str] = {}
    while len(fields) < 3:
        if pos >= len(data):
            raise ParseError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1:end].decode().strip()
            if "=" in comment:
                key, _, value = comment.partition("=")
                metadata[key.strip()] = value.strip()
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval not in (255, 65535):
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    dtype = ">u2" if maxval == 65535 else "u1"
    channels = 3 if color else 1
    count = w * h * channels
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if arr.size != count:
        raise ParseError(f"{path}: truncated pixel data")
    arr = arr.astype(np.uint16 if maxval == 65535 else np.uint8)
    shape = (h, w, 3) if color else (h, w)
    return arr.reshape(shape), metadata


def save_remap(path, map_uv: np.ndarray) -> None:
    """Cache a remap table of shape (H, W, 2) float32 (u, v) pairs."""
    map_uv = np.ascontiguousarray(map_uv, dtype="<f4")
    if map_uv.ndim != 3 or map_uv.shape[2] != 2:
        raise ValueError("remap table must have shape (H, W, 2)")
    h, w = map_uv.shape[:2]
    header = REMAP_MAGIC + struct.pack("<II", w, h)
    Path(path).write_bytes(header + map_uv.tobytes())


def load_remap(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != REMAP_MAGIC:
        raise ParseError(f"{path}: bad remap magic")
    w, h = struct.unpack("<II", data[8:16])
    arr = np.frombuffer(data, dtype="<f4", offset=16)
    if arr.size != w * h * 2:
        raise ParseError(f"{path}: truncated remap table")
    return arr.reshape(h, w, 2).astype(np.float32)


def save_range_map(path, ranges: np.ndarray) -> None:
    """Store a per-pixel range map (H, W) float32; NaN marks no hit."""
    ranges = np.ascontiguousarray(ranges, dtype="<f4")
    if ranges.ndim != 2:
        raise ValueError("range map must have shape (H, W)")
    h, w = ranges.shape
    header = RANGE_MAGIC + struct.pack("<II", w, h)
    Path(path).write_bytes(header + ranges.tobytes())


def load_range_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != RANGE_MAGIC:
        raise ParseError(f"{path}: bad range map magic")
    w, h = struct.unpack("<II", data[8:16])
    arr = np.frombuffer(data, dtype="<f4", offset=16)
    if arr.size != w * h:
        raise ParseError(f"{path}: truncated range map")
    return arr.reshape(h, w).astype(np.float32)
