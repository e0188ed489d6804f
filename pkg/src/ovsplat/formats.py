"""Small binary/text formats: PPM, 16-bit PGM, mask bytes, language maps, ASCII PLY."""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "LANG_MAGIC",
    "write_ppm",
    "read_ppm",
    "write_pgm16",
    "read_pgm16",
    "write_mask",
    "read_mask",
    "write_language_map",
    "read_language_map",
    "write_ply",
    "read_ply",
    "atomic_write_bytes",
]

LANG_MAGIC = b"LMAP"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, float), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6; float input in [0, 1] is clamped and rounded to 8 bits."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape[:2]
    atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode() + img.reshape(h, w, 3).tobytes())


def _read_pnm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header")
    w, h, maxval = (int(t) for t in tokens[1:])
    return raw[pos + 1:], h, w, maxval


def read_ppm(path) -> np.ndarray:
    """Float image in [0, 1], shape (H, W, 3)."""
    body, h, w, maxval = _read_pnm(path, b"P6")
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    return np.frombuffer(body[: h * w * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0


def write_pgm16(path, values: np.ndarray, vmax: float | None = None) -> None:
    """Binary 16-bit P5, big-endian. Floats are scaled so ``vmax`` maps to 65535."""
    values = np.asarray(values)
    if values.dtype != np.uint16:
        v = values.astype(float)
        top = float(v.max()) if vmax is None else vmax
        scale = 65535.0 / top if top > 0 else 0.0
        values = np.round(np.clip(v * scale, 0, 65535)).astype(np.uint16)
    h, w = values.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n65535\n".encode() + values.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    body, h, w, maxval = _read_pnm(path, b"P5")
    if maxval != 65535:
        raise ValueError("only 16-bit PGM is supported")
    return np.frombuffer(body[: h * w * 2], dtype=">u2").reshape(h, w).astype(np.uint16)


def write_mask(path, labels: np.ndarray) -> None:
    """One byte per pixel, row-major; 255 marks unlabeled pixels."""
    atomic_write_bytes(path, np.asarray(labels, dtype=np.uint8).tobytes())


def read_mask(path, height: int, width: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != height * width:
        raise ValueError(f"{path}: expected {height * width} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()


def write_language_map(path, values: np.ndarray) -> None:
    """16-byte header (magic, H, W, d as little-endian u32) then float32 data."""
    values = np.asarray(values)
    h, w, d = values.shape
    header = LANG_MAGIC + struct.pack("<III", h, w, d)
    atomic_write_bytes(path, header + values.astype("<f4").tobytes())


def read_language_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != LANG_MAGIC:
        raise ValueError(f"{path}: not a language map")
    h, w, d = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * h * w * d:
        raise ValueError(f"{path}: truncated language map")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(h, w, d).astype(np.float64)


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY with double xyz and uchar rgb; ``colors`` in [0, 1] or uint8."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors)
    if colors.dtype != np.uint8:
        colors = to_uint8(colors)
    colors = colors.reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, colors):
        x, y, z = (repr(float(v)) for v in p)
        lines.append(f"{x} {y} {z} {int(c[0])} {int(c[1])} {int(c[2])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = 0
    body = 0
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            body = i + 1
            break
    rows = [line.split() for line in lines[body:body + n]]
    pts = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    cols = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8).reshape(-1, 3)
    return pts, cols
