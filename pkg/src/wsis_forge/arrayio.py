"""File I/O at the pipeline boundary: NPY arrays, palette mask PNGs, JSON.

Arrays are exchanged as NPY v1.0/2.0, little-endian, C-order. Loading
normalizes dtypes to float64 or int32 so downstream code never sees
platform-dependent widths.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .core import FormatError, ImageGrid, SemanticMap, ShapeError, ValidationError

IGNORE_LABEL = 255


def load_array(path, expected_rank: int, kind: str = "float") -> np.ndarray:
    """Load an NPY file and normalize it to the declared role.

    kind "float" yields float64, kind "int" yields int32. Raises
    FormatError on malformed files, ShapeError on rank mismatch.
    """
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            arr = np.load(fh, allow_pickle=False)
    except (ValueError, OSError, EOFError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: not a readable NPY file ({exc})") from exc
    if arr.ndim != expected_rank:
        raise ShapeError(f"{path}: expected rank {expected_rank}, got rank {arr.ndim}")
    if kind == "float":
        if not np.issubdtype(arr.dtype, np.number):
            raise FormatError(f"{path}: expected a numeric array, got dtype {arr.dtype}")
        out = np.ascontiguousarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise ValidationError(f"{path}: array contains NaN or Inf")
        return out
    if kind == "int":
        if not np.issubdtype(arr.dtype, np.integer):
            raise FormatError(f"{path}: expected an integer array, got dtype {arr.dtype}")
        return np.ascontiguousarray(arr, dtype=np.int32)
    raise ValueError(f"unknown kind {kind!r}, expected 'float' or 'int'")


def save_array(path, array: np.ndarray) -> None:
    """Write an array as little-endian C-order NPY; bitwise invertible by load_array."""
    arr = np.asarray(array)
    if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
        raise ValidationError("refusing to save an array with NaN or Inf")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype("<i4")
    else:
        arr = arr.astype("<f8")
    with open(path, "wb") as fh:
        np.save(fh, np.ascontiguousarray(arr), allow_pickle=False)


def load_mask_png(path) -> SemanticMap:
    """Read an 8-bit single-channel or paletted PNG as a semantic map.

    Pixel value 255 is treated as an ignore label: those pixels are
    remapped to background and recorded in the map's ignore set.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: not a readable PNG ({exc})") from exc
    if img.mode not in ("L", "P"):
        raise FormatError(f"{path}: expected 8-bit gray or paletted PNG, got mode {img.mode}")
    values = np.asarray(img, dtype=np.int32)
    if values.ndim != 2:
        raise FormatError(f"{path}: mask must be single-channel")
    grid = ImageGrid(values.shape[0], values.shape[1])
    ignore = values == IGNORE_LABEL
    labels = np.where(ignore, 0, values)
    num_classes = max(1, int(labels.max()))
    return SemanticMap(
        grid=grid,
        labels=labels,
        num_classes=num_classes,
        ignore=ignore if ignore.any() else None,
    )


def save_mask_png(path, semantic: SemanticMap) -> None:
    """Write a semantic map as a paletted PNG (ignore pixels become 255)."""
    values = semantic.labels.astype(np.uint8)
    if semantic.ignore is not None:
        values = np.where(semantic.ignore, np.uint8(IGNORE_LABEL), values)
    img = Image.fromarray(values, mode="P")
    palette = []
    rng = np.random.default_rng(0)
    for i in range(256):
        palette.extend(int(v) for v in rng.integers(0, 256, size=3))
    img.putpalette(palette)
    img.save(path, format="PNG")


def load_json(path) -> dict | list:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def save_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
