"""Instance representation: center heatmaps plus 2D offset fields.

Instances are encoded as unnormalized Gaussian bumps on the class-wise
center map (combined by per-pixel maximum) together with offset vectors
pointing from every mask pixel to the instance centroid. Decoding runs
the reverse path: window-max center extraction followed by nearest-center
grouping restricted to same-class foreground.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .core import (
    CenterMap,
    ImageGrid,
    Instance,
    InstanceLabelSet,
    OffsetMap,
    SemanticMap,
    ShapeError,
    ValidationError,
    mask_centroid,
)

DEFAULT_SIGMA = 8.0
DEFAULT_NMS_KERNEL = 7
DEFAULT_CENTER_THRESHOLD = 0.1

Center = tuple[int, int, int, float]  # (class_id, y, x, score)


def gaussian_bump(grid: ImageGrid, center: tuple[float, float], sigma: float) -> np.ndarray:
    ys = np.arange(grid.height, dtype=np.float64)[:, None]
    xs = np.arange(grid.width, dtype=np.float64)[None, :]
    d2 = (ys - center[0]) ** 2 + (xs - center[1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def encode_center_map(labels: InstanceLabelSet, sigma: float = DEFAULT_SIGMA,
                      num_classes: int | None = None) -> CenterMap:
    """Render one Gaussian bump per instance onto its class channel.

    Bumps are unnormalized (peak 1.0 at the center) and overlaps combine
    by per-pixel maximum, so values stay in [0, 1].
    """
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    if num_classes is None:
        num_classes = max((inst.class_id for inst in labels.instances), default=1)
    channels = np.zeros((num_classes, labels.grid.height, labels.grid.width))
    for inst in labels.instances:
        if inst.class_id > num_classes:
            raise ValidationError(f"instance class {inst.class_id} exceeds num_classes {num_classes}")
        ch = inst.class_id - 1
        np.maximum(channels[ch], gaussian_bump(labels.grid, inst.center, sigma), out=channels[ch])
    return CenterMap(grid=labels.grid, channels=channels)


def encode_offset_map(labels: InstanceLabelSet) -> OffsetMap:
    """Offset vectors (dy, dx) from every mask pixel to its instance center.

    Pixels outside the guided region are zero.
    """
    shape = labels.grid.shape
    dy = np.zeros(shape)
    dx = np.zeros(shape)
    ii = np.arange(labels.grid.height, dtype=np.float64)[:, None]
    jj = np.arange(labels.grid.width, dtype=np.float64)[None, :]
    for inst in labels.instances:
        cy, cx = inst.center
        m = inst.mask
        dy[m] = np.broadcast_to(cy - ii, shape)[m]
        dx[m] = np.broadcast_to(cx - jj, shape)[m]
    return OffsetMap(grid=labels.grid, dy=dy, dx=dx)


def _window_maxima(plane: np.ndarray, threshold: float, kernel: int) -> list[tuple[int, int]]:
    """Pixels equal to their windowed max and above threshold, deduplicated.

    When several pixels in one window tie for the max, the lexicographically
    smallest (y, x) is kept, so no two survivors share a window.
    """
    win_max = maximum_filter(plane, size=kernel, mode="constant", cval=-np.inf)
    ys, xs = np.nonzero((plane >= win_max) & (plane > threshold))
    half = kernel // 2
    kept: list[tuple[int, int]] = []
    for y, x in zip(ys.tolist(), xs.tolist()):  # already in raster (lexicographic) order
        if any(abs(y - ky) <= half and abs(x - kx) <= half for ky, kx in kept):
            continue
        kept.append((y, x))
    return kept


def extract_centers(center_map: CenterMap, score_threshold: float = DEFAULT_CENTER_THRESHOLD,
                    nms_kernel: int = DEFAULT_NMS_KERNEL) -> list[Center]:
    """Per-channel local maxima of the center map above a score threshold.

    A pixel is a center when its value equals the windowed max over the
    nms_kernel neighborhood and exceeds score_threshold.
    """
    if not (0.0 <= score_threshold <= 1.0):
        raise ValidationError(f"score_threshold must lie in [0, 1], got {score_threshold}")
    if nms_kernel < 1 or nms_kernel % 2 == 0:
        raise ValidationError(f"nms_kernel must be odd and positive, got {nms_kernel}")
    centers: list[Center] = []
    for ch in range(center_map.num_classes):
        plane = center_map.channels[ch]
        for y, x in _window_maxima(plane, score_threshold, nms_kernel):
            centers.append((ch + 1, y, x, float(plane[y, x])))
    return centers


@dataclass(frozen=True)
class GroupingResult:
    ids: np.ndarray  # per-pixel instance id, 0 = background or unassigned
    unassigned: dict[int, int]  # class id -> foreground pixels with no same-class center

    @property
    def num_unassigned(self) -> int:
        return sum(self.unassigned.values())


def group_instances(centers: Sequence[Sequence], offsets: OffsetMap,
                    foreground: np.ndarray) -> GroupingResult:
    """Assign each foreground pixel to the nearest same-class center.

    The vote position of pixel (i, j) is (i, j) + offset(i, j); distances
    are Euclidean to each center of the pixel's class. Instance ids follow
    the input order of ``centers`` (1-based); ties go to the earlier center.
    Foreground pixels of a class with no center stay id 0 and are counted
    in the result's diagnostics.
    """
    fg = np.asarray(foreground)
    if fg.shape != offsets.grid.shape:
        raise ShapeError(f"foreground shape {fg.shape} does not match grid {offsets.grid.shape}")
    ids = np.zeros(offsets.grid.shape, dtype=np.int32)
    unassigned: dict[int, int] = {}
    if len(centers) == 0 and not (fg > 0).any():
        return GroupingResult(ids=ids, unassigned=unassigned)

    ii = np.arange(offsets.grid.height, dtype=np.float64)[:, None]
    jj = np.arange(offsets.grid.width, dtype=np.float64)[None, :]
    vote_y = ii + offsets.dy
    vote_x = jj + offsets.dx

    by_class: dict[int, list[tuple[int, float, float]]] = {}
    for idx, c in enumerate(centers):
        class_id, cy, cx = int(c[0]), float(c[1]), float(c[2])
        by_class.setdefault(class_id, []).append((idx, cy, cx))

    for class_id in np.unique(fg[fg > 0]).tolist():
        pix = fg == class_id
        cands = by_class.get(class_id)
        if not cands:
            unassigned[class_id] = int(pix.sum())
            continue
        vy = vote_y[pix]
        vx = vote_x[pix]
        cy = np.array([c[1] for c in cands])
        cx = np.array([c[2] for c in cands])
        d2 = (vy[:, None] - cy[None, :]) ** 2 + (vx[:, None] - cx[None, :]) ** 2
        nearest = np.argmin(d2, axis=1)  # first occurrence wins ties = input order
        global_ids = np.array([c[0] + 1 for c in cands], dtype=np.int32)
        ids[pix] = global_ids[nearest]
    return GroupingResult(ids=ids, unassigned=unassigned)


def decode_instances(center_map: CenterMap, offsets: OffsetMap, semantic: SemanticMap,
                     score_threshold: float = DEFAULT_CENTER_THRESHOLD,
                     nms_kernel: int = DEFAULT_NMS_KERNEL) -> InstanceLabelSet:
    """Recover instances from map outputs: extract centers, then group.

    Each instance's score is the center-map value at its generating center;
    stored centers are recomputed as mask centroids. Centers that capture
    no foreground pixels are dropped.
    """
    if center_map.grid != offsets.grid or center_map.grid != semantic.grid:
        raise ShapeError("center, offset and semantic grids must agree")
    centers = extract_centers(center_map, score_threshold, nms_kernel)
    grouping = group_instances(centers, offsets, semantic.labels)
    instances = []
    for idx, (class_id, _y, _x, score) in enumerate(centers):
        mask = grouping.ids == idx + 1
        if not mask.any():
            continue
        instances.append(
            Instance(class_id=class_id, mask=mask, center=mask_centroid(mask), score=score)
        )
    return InstanceLabelSet(grid=center_map.grid, instances=tuple(instances))
