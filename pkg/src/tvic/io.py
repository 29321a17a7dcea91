"""Image and config file helpers.

Grayscale PNG (8 or 16 bit) and binary PGM are read through Pillow and mapped
to ``p / (2**bits - 1)``. Results are written as 16-bit PNG plus a raw
float64 sidecar that round-trips exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .grid import ImageGrid, as_grid

RAW_MAGIC = b"TVIC"
RAW_HEADER = struct.Struct("<4sIII")
RAW_SUFFIXES = (".raw", ".tvic")

_BITS = {"1": 1, "L": 8, "P": 8, "I;16": 16, "I;16B": 16, "I;16L": 16, "I;16N": 16}


class ImageIOError(OSError):
    """Unreadable, unwritable or malformed image file."""


def write_raw(path, grid) -> Path:
    grid = as_grid(grid)
    path = Path(path)
    header = RAW_HEADER.pack(RAW_MAGIC, grid.rows, grid.cols, 0)
    try:
        path.write_bytes(header + np.ascontiguousarray(grid.data, dtype="<f8").tobytes())
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_raw(path, mesh_h: float | None = None) -> ImageGrid:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if len(blob) < RAW_HEADER.size:
        raise ImageIOError(f"{path}: truncated header")
    magic, rows, cols, _ = RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ImageIOError(f"{path}: bad magic {magic!r}")
    body = blob[RAW_HEADER.size:]
    if len(body) != 8 * rows * cols or rows * cols == 0:
        raise ImageIOError(f"{path}: expected {rows}x{cols} float64 values")
    data = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)
    try:
        return ImageGrid(data, mesh_h)
    except ValueError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def read_image(path, mesh_h: float | None = None) -> ImageGrid:
    """Load a grayscale image (PNG, PGM, or raw sidecar) with values in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        return read_raw(path, mesh_h)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N"):
                arr = np.asarray(img, dtype=float)
                bits = 16
            elif mode in _BITS:
                arr = np.asarray(img.convert("L") if mode == "P" else img, dtype=float)
                bits = _BITS[mode]
            else:
                raise ImageIOError(f"{path}: unsupported image mode {mode!r} (grayscale only)")
    except ImageIOError:
        raise
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if mode == "1":
        return ImageGrid(arr.astype(bool).astype(float), mesh_h)
    return ImageGrid(arr / (2**bits - 1), mesh_h)


def write_png(path, grid, bits: int = 16) -> Path:
    """Clip to [0, 1] and quantize to an 8- or 16-bit grayscale PNG."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    grid = as_grid(grid)
    path = Path(path)
    levels = 2**bits - 1
    q = np.rint(np.clip(grid.data, 0.0, 1.0) * levels)
    img = Image.fromarray(q.astype(np.uint8)) if bits == 8 else Image.fromarray(q.astype(np.uint16))
    try:
        img.save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc
    return path


def write_image(path, grid, bits: int = 16) -> tuple[Path, Path]:
    """PNG at ``path`` plus a ``.raw`` sidecar next to it."""
    path = Path(path)
    return write_png(path, grid, bits), write_raw(path.with_suffix(".raw"), grid)


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, keys use dashes or underscores."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ImageIOError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_").lower()] = value
    return out
