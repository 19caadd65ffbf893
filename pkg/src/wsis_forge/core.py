"""Shared data types and validation for the label pipeline.

Coordinate convention used everywhere: (row=y, col=x), origin at the
top-left pixel, integer pixel centers. Offsets are stored as (dy, dx)
pointing from a pixel toward its instance center.

All container types are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """A file payload is malformed or of an unsupported kind."""


class ShapeError(ValidationError):
    """An array has the wrong rank or inconsistent dimensions."""


@dataclass(frozen=True)
class ImageGrid:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def size(self) -> int:
        return self.height * self.width

    def contains(self, y: int, x: int) -> bool:
        return 0 <= y < self.height and 0 <= x < self.width


def _require_shape(name: str, arr: np.ndarray, shape: tuple[int, ...]):
    if arr.shape != shape:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")


def _require_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")


@dataclass(frozen=True)
class SemanticMap:
    """Per-pixel class labels; 0 is background, 1..num_classes are objects.

    ``ignore`` marks pixels excluded from transfer and loss accumulation
    (e.g. void pixels in palette masks). Ignored pixels carry label 0.
    """

    grid: ImageGrid
    labels: np.ndarray
    num_classes: int
    ignore: np.ndarray | None = None

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int32))
        object.__setattr__(self, "labels", labels)
        _require_shape("labels", labels, self.grid.shape)
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        if labels.size and (labels.min() < 0 or labels.max() > self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}], got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        if self.ignore is not None:
            ign = np.asarray(self.ignore, dtype=bool)
            _require_shape("ignore", ign, self.grid.shape)
            object.__setattr__(self, "ignore", ign)

    def class_mask(self, class_id: int) -> np.ndarray:
        mask = self.labels == class_id
        if self.ignore is not None:
            mask = mask & ~self.ignore
        return mask


@dataclass(frozen=True)
class CenterMap:
    """Class-wise center heatmaps, one channel per class, values in [0, 1]."""

    grid: ImageGrid
    channels: np.ndarray

    def __post_init__(self):
        ch = np.ascontiguousarray(np.asarray(self.channels, dtype=np.float64))
        object.__setattr__(self, "channels", ch)
        if ch.ndim != 3 or ch.shape[1:] != self.grid.shape:
            raise ShapeError(f"channels must be (C, {self.grid.height}, {self.grid.width}), got {ch.shape}")
        _require_finite("center map", ch)
        if ch.size and (ch.min() < 0.0 or ch.max() > 1.0):
            raise ValidationError("center map values must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.channels.shape[0]


@dataclass(frozen=True)
class OffsetMap:
    """Per-pixel 2D vectors (dy, dx) pointing toward instance centers."""

    grid: ImageGrid
    dy: np.ndarray
    dx: np.ndarray

    def __post_init__(self):
        dy = np.ascontiguousarray(np.asarray(self.dy, dtype=np.float64))
        dx = np.ascontiguousarray(np.asarray(self.dx, dtype=np.float64))
        object.__setattr__(self, "dy", dy)
        object.__setattr__(self, "dx", dx)
        _require_shape("dy", dy, self.grid.shape)
        _require_shape("dx", dx, self.grid.shape)
        _require_finite("offset map", dy)
        _require_finite("offset map", dx)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dy, self.dx)


@dataclass(frozen=True)
class ActivationStack:
    """Nonnegative multi-channel activation maps (post-rectification)."""

    grid: ImageGrid
    channels: np.ndarray

    def __post_init__(self):
        ch = np.ascontiguousarray(np.asarray(self.channels, dtype=np.float64))
        object.__setattr__(self, "channels", ch)
        if ch.ndim != 3 or ch.shape[1:] != self.grid.shape:
            raise ShapeError(f"channels must be (K, {self.grid.height}, {self.grid.width}), got {ch.shape}")
        _require_finite("activation stack", ch)
        if ch.size and ch.min() < 0.0:
            raise ValidationError("activations must be nonnegative")

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]


@dataclass(frozen=True)
class Instance:
    """One labeled instance: class, boolean pixel mask, sub-pixel center."""

    class_id: int
    mask: np.ndarray
    center: tuple[float, float]
    score: float = 1.0

    def __post_init__(self):
        mask = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        object.__setattr__(self, "mask", mask)
        if mask.ndim != 2:
            raise ShapeError(f"instance mask must be 2D, got rank {mask.ndim}")
        if not mask.any():
            raise ValidationError("instance mask is empty")
        if self.class_id < 1:
            raise ValidationError(f"class_id must be >= 1, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")
        ys, xs = np.nonzero(mask)
        cy, cx = self.center
        if not (ys.min() <= cy <= ys.max() and xs.min() <= cx <= xs.max()):
            raise ValidationError(
                f"center {self.center} lies outside the mask bounding box "
                f"[{ys.min()}, {ys.max()}] x [{xs.min()}, {xs.max()}]"
            )

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """Centroid (y, x) of a boolean mask at sub-pixel precision."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValidationError("cannot take the centroid of an empty mask")
    return (float(ys.mean()), float(xs.mean()))


@dataclass(frozen=True)
class InstanceLabelSet:
    """A set of disjoint labeled instances plus their guidance region.

    ``guided_region`` is always the union of the instance masks; it is the
    pixel support used when these labels drive a loss.
    """

    grid: ImageGrid
    instances: tuple[Instance, ...]
    guided_region: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        instances = tuple(self.instances)
        object.__setattr__(self, "instances", instances)
        union = np.zeros(self.grid.shape, dtype=bool)
        for idx, inst in enumerate(instances):
            _require_shape(f"instance {idx} mask", inst.mask, self.grid.shape)
            if (union & inst.mask).any():
                raise ValidationError(f"instance {idx} mask overlaps a previous instance")
            union |= inst.mask
        if self.guided_region is None:
            object.__setattr__(self, "guided_region", union)
        else:
            guided = np.asarray(self.guided_region, dtype=bool)
            _require_shape("guided_region", guided, self.grid.shape)
            if not np.array_equal(guided, union):
                raise ValidationError("guided_region must equal the union of instance masks")
            object.__setattr__(self, "guided_region", guided)

    def __len__(self) -> int:
        return len(self.instances)

    @classmethod
    def empty(cls, grid: ImageGrid) -> "InstanceLabelSet":
        return cls(grid=grid, instances=())


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run-length encode a boolean mask as flat [start, length, ...] pairs."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat.astype(np.int8)))
    starts = edges[flat[edges + 1]] + 1
    ends = edges[~flat[edges + 1]] + 1
    if flat[0]:
        starts = np.concatenate(([0], starts))
    if flat[-1]:
        ends = np.concatenate((ends, [flat.size]))
    out: list[int] = []
    for s, e in zip(starts, ends):
        out.extend((int(s), int(e - s)))
    return out


def rle_decode(runs: Sequence[int], grid: ImageGrid) -> np.ndarray:
    """Inverse of :func:`rle_encode` for the given grid."""
    if len(runs) % 2 != 0:
        raise FormatError("run-length payload must hold (start, length) pairs")
    flat = np.zeros(grid.size, dtype=bool)
    for i in range(0, len(runs), 2):
        start, length = runs[i], runs[i + 1]
        if length < 1 or start < 0 or start + length > grid.size:
            raise FormatError(f"run ({start}, {length}) falls outside the grid")
        flat[start : start + length] = True
    return flat.reshape(grid.shape)


def labels_to_json(labels: InstanceLabelSet) -> dict:
    return {
        "grid": {"height": labels.grid.height, "width": labels.grid.width},
        "instances": [
            {
                "class_id": inst.class_id,
                "center": [float(inst.center[0]), float(inst.center[1])],
                "score": float(inst.score),
                "rle": rle_encode(inst.mask),
            }
            for inst in labels.instances
        ],
    }


def labels_from_json(payload: dict) -> InstanceLabelSet:
    try:
        grid = ImageGrid(int(payload["grid"]["height"]), int(payload["grid"]["width"]))
        entries = payload["instances"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed instance label payload: {exc}") from exc
    instances = []
    for entry in entries:
        mask = rle_decode(entry["rle"], grid)
        instances.append(
            Instance(
                class_id=int(entry["class_id"]),
                mask=mask,
                center=(float(entry["center"][0]), float(entry["center"][1])),
                score=float(entry["score"]),
            )
        )
    return InstanceLabelSet(grid=grid, instances=tuple(instances))


def union_masks(masks: Iterable[np.ndarray], grid: ImageGrid) -> np.ndarray:
    out = np.zeros(grid.shape, dtype=bool)
    for m in masks:
        out |= m
    return out
