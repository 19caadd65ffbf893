"""Online self-refinement: rebuild labels from current outputs and score them.

The refinement loop decodes the current center/offset/semantic outputs
into a refined label set (clustered centers recovered from the offset
field fill in centers the heatmap missed), re-encodes those labels as
soft targets, and weights their loss contribution by the center map's
confidence at each refined instance's center. Loss support is restricted
to the labeled instance pixels of each label source, so unguided regions
receive exactly zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    CenterMap,
    Instance,
    InstanceLabelSet,
    OffsetMap,
    SemanticMap,
    ShapeError,
    ValidationError,
    mask_centroid,
)
from .representation import (
    DEFAULT_CENTER_THRESHOLD,
    DEFAULT_NMS_KERNEL,
    DEFAULT_SIGMA,
    extract_centers,
    group_instances,
)
from .transfer import DEFAULT_CONNECTIVITY, ccl

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class RefineConfig:
    """Constants of the refinement loop and the joint objective."""

    magnitude_threshold: float = 2.5
    area_target: int = 21
    area_epsilon: int = 3
    lambda_center: float = 200.0
    lambda_offset: float = 0.01
    lambda_sem: float = 20.0
    center_threshold: float = DEFAULT_CENTER_THRESHOLD
    nms_kernel: int = DEFAULT_NMS_KERNEL
    sigma: float = DEFAULT_SIGMA
    connectivity: int = DEFAULT_CONNECTIVITY
    offset_norm: str = "l1"  # "l1" accumulates |ddy| + |ddx|; "l2" the vector norm
    min_instance_area: int = 8  # grouping slivers below this are dropped

    def __post_init__(self):
        if min(self.magnitude_threshold, self.area_target, self.area_epsilon,
               self.center_threshold, self.sigma) <= 0:
            raise ValidationError("all refinement thresholds must be positive")
        if self.area_epsilon >= self.area_target:
            raise ValidationError("area_epsilon must be smaller than area_target")
        if self.offset_norm not in ("l1", "l2"):
            raise ValidationError(f"offset_norm must be 'l1' or 'l2', got {self.offset_norm}")


def center_clustering(offsets: OffsetMap, cfg: RefineConfig = RefineConfig()) -> list[tuple[float, float]]:
    """Recover center points from the offset field's low-magnitude basins.

    Pixels whose offset magnitude falls below the threshold form candidate
    basins (connected components); a basin is trusted only when its area
    sits inside [area_target - eps, area_target + eps], which is the
    footprint an accurate field produces around a true center. Oversized
    basins (typical of an unconverged field) yield nothing.
    """
    magnitude = offsets.magnitude()
    basins = ccl(magnitude < cfg.magnitude_threshold, cfg.connectivity)
    lo = cfg.area_target - cfg.area_epsilon
    hi = cfg.area_target + cfg.area_epsilon
    centers = []
    for cid in range(1, basins.count + 1):
        if lo <= basins.areas[cid] <= hi:
            cy, cx = basins.centroids[cid]
            centers.append((float(cy), float(cx)))
    return centers


def _dedup_clustered(clustered: Sequence[tuple[int, float, float]],
                     extracted: Sequence[tuple[int, int, int, float]],
                     window: int) -> list[tuple[int, float, float]]:
    """Drop clustered centers near a same-class extracted one.

    Extracted centers win because they carry a confidence score. The
    suppression radius is the full nms kernel (not its half): a clustered
    center that close describes the same instance as the heatmap peak,
    and keeping both would split that instance at grouping time.
    """
    kept = []
    for class_id, cy, cx in clustered:
        crowded = any(
            ec == class_id and abs(cy - ey) <= window and abs(cx - ex) <= window
            for ec, ey, ex, _s in extracted
        )
        if not crowded:
            kept.append((class_id, cy, cx))
    return kept


def build_refined_labels(center_out: CenterMap, offset_out: OffsetMap,
                         semantic_out: SemanticMap, cfg: RefineConfig = RefineConfig(),
                         with_clustering: bool = True) -> InstanceLabelSet:
    """Decode current outputs into a refined label set.

    Centers come from heatmap extraction plus (optionally) offset-field
    clustering; clustered centers take the semantic class at their pixel
    and are dropped on background or when an extracted center of the same
    class already occupies their nms window. Grouping runs over the
    semantic foreground; each instance scores the center-map value at its
    generating center. No centers at all yields an empty (valid) set.
    """
    if center_out.grid != offset_out.grid or center_out.grid != semantic_out.grid:
        raise ShapeError("center, offset and semantic grids must agree")
    extracted = extract_centers(center_out, cfg.center_threshold, cfg.nms_kernel)
    combined: list[tuple] = list(extracted)
    if with_clustering:
        tagged = []
        for cy, cx in center_clustering(offset_out, cfg):
            iy = min(max(int(round(cy)), 0), semantic_out.grid.height - 1)
            ix = min(max(int(round(cx)), 0), semantic_out.grid.width - 1)
            class_id = int(semantic_out.labels[iy, ix])
            if class_id > 0:
                tagged.append((class_id, cy, cx))
        for class_id, cy, cx in _dedup_clustered(tagged, extracted, cfg.nms_kernel):
            iy = min(max(int(round(cy)), 0), semantic_out.grid.height - 1)
            ix = min(max(int(round(cx)), 0), semantic_out.grid.width - 1)
            score = float(center_out.channels[class_id - 1, iy, ix])
            combined.append((class_id, cy, cx, score))
    grouping = group_instances(combined, offset_out, semantic_out.labels)
    h, w = center_out.grid.shape
    instances = []
    for idx, entry in enumerate(combined):
        mask = grouping.ids == idx + 1
        if mask.sum() < max(1, cfg.min_instance_area):
            continue
        class_id = int(entry[0])
        # confidence is read at the center point that generated the instance
        gy = min(max(int(round(float(entry[1]))), 0), h - 1)
        gx = min(max(int(round(float(entry[2]))), 0), w - 1)
        score = float(center_out.channels[class_id - 1, gy, gx])
        instances.append(Instance(class_id=class_id, mask=mask,
                                  center=mask_centroid(mask), score=score))
    return InstanceLabelSet(grid=center_out.grid, instances=tuple(instances))


def weight_mask(refined: InstanceLabelSet, center_out: CenterMap) -> np.ndarray:
    """Soft-label weights: each refined instance's region takes that
    instance's confidence (the center map's value at the center point the
    instance was built around, carried as its score); everything else is 0.
    """
    if refined.grid != center_out.grid:
        raise ShapeError("refined labels and center map grids differ")
    w = np.zeros(refined.grid.shape)
    for inst in refined.instances:
        w[inst.mask] = inst.score
    return w


def _check_grids(*maps):
    grid = maps[0].grid
    for m in maps[1:]:
        if m is not None and m.grid != grid:
            raise ShapeError("all maps passed to a loss must share one grid")


def _channel_support(p: np.ndarray, num_channels: int) -> tuple[np.ndarray, int]:
    """Normalize a guidance set to per-channel form.

    A (H, W) set guides every channel at its pixels; a (C, H, W) set
    guides channels individually (class-wise guidance). The pixel count
    used as the loss normalizer is the number of guided pixels, not
    guided (pixel, channel) entries.
    """
    p = np.asarray(p, dtype=bool)
    if p.ndim == 2:
        return np.broadcast_to(p, (num_channels,) + p.shape), int(p.sum())
    if p.ndim == 3 and p.shape[0] == num_channels:
        return p, int(p.any(axis=0).sum())
    raise ShapeError(f"guidance set has shape {p.shape}, expected (H, W) or (C, H, W)")


def loss_center(center_out: CenterMap, pseudo: CenterMap, p_pseudo: np.ndarray,
                refined: CenterMap | None = None, p_refined: np.ndarray | None = None,
                weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Squared-error center loss over the guided pixel sets.

    Mean over |P_pseudo| of (C - C_hat)^2 plus mean over |P_refined| of
    W * (C - C_bar)^2; an empty pixel set contributes zero. Guidance sets
    may be (H, W) pixel sets or (C, H, W) class-wise sets restricting each
    pixel to its own class channel. The returned gradient (w.r.t. the
    output map) is exactly zero outside P_pseudo union P_refined.
    """
    _check_grids(center_out, pseudo, refined)
    num_ch = center_out.channels.shape[0]
    grad = np.zeros_like(center_out.channels)
    loss = 0.0
    sup_p, n_p = _channel_support(p_pseudo, num_ch)
    if n_p > 0:
        diff = (center_out.channels - pseudo.channels) * sup_p
        loss += float((diff * diff).sum()) / n_p
        grad += 2.0 * diff / n_p
    if refined is not None and p_refined is not None:
        sup_r, n_r = _channel_support(p_refined, num_ch)
        if n_r > 0:
            w = np.ones(center_out.grid.shape) if weights is None else weights
            diff = (center_out.channels - refined.channels) * sup_r
            loss += float((w[None, :, :] * diff * diff).sum()) / n_r
            grad += 2.0 * w[None, :, :] * diff / n_r
    return loss, grad


def _l1_term(residual_y: np.ndarray, residual_x: np.ndarray, w: np.ndarray, n: int,
             norm: str) -> tuple[float, np.ndarray, np.ndarray]:
    if norm == "l1":
        loss = float((w * (np.abs(residual_y) + np.abs(residual_x))).sum()) / n
        gy = w * np.sign(residual_y) / n
        gx = w * np.sign(residual_x) / n
    else:
        mag = np.hypot(residual_y, residual_x)
        loss = float((w * mag).sum()) / n
        safe = np.where(mag > 0, mag, 1.0)
        gy = w * residual_y / safe / n
        gx = w * residual_x / safe / n
    return loss, gy, gx


def loss_offset(offset_out: OffsetMap, pseudo: OffsetMap, p_pseudo: np.ndarray,
                refined: OffsetMap | None = None, p_refined: np.ndarray | None = None,
                weights: np.ndarray | None = None, norm: str = "l1",
                ) -> tuple[float, np.ndarray, np.ndarray]:
    """Absolute-error offset loss over the guided pixel sets.

    Both components accumulate (|ddy| + |ddx|), averaged over pixels;
    the subgradient at a zero residual is zero. Returns the loss and the
    gradients w.r.t. dy and dx, zero outside the guided sets.
    """
    _check_grids(offset_out, pseudo, refined)
    grad_y = np.zeros_like(offset_out.dy)
    grad_x = np.zeros_like(offset_out.dx)
    loss = 0.0
    p_pseudo = np.asarray(p_pseudo, dtype=bool)
    n_p = int(p_pseudo.sum())
    if n_p > 0:
        term, gy, gx = _l1_term((offset_out.dy - pseudo.dy) * p_pseudo,
                                (offset_out.dx - pseudo.dx) * p_pseudo,
                                p_pseudo.astype(np.float64), n_p, norm)
        loss += term
        grad_y += gy
        grad_x += gx
    if refined is not None and p_refined is not None:
        p_refined = np.asarray(p_refined, dtype=bool)
        n_r = int(p_refined.sum())
        if n_r > 0:
            w = (np.ones(offset_out.grid.shape) if weights is None else weights) * p_refined
            term, gy, gx = _l1_term((offset_out.dy - refined.dy) * p_refined,
                                    (offset_out.dx - refined.dx) * p_refined, w, n_r, norm)
            loss += term
            grad_y += gy
            grad_x += gx
    return loss, grad_y, grad_x


def loss_sem(sem_probs: np.ndarray, pseudo_sem: SemanticMap) -> tuple[float, np.ndarray, int]:
    """Mean negative log-likelihood of the pseudo semantic labels.

    ``sem_probs`` holds per-pixel class probabilities with channel c for
    class c (background included), rows summing to 1. Support is every
    non-ignore pixel. Probabilities at labeled classes are floored at
    1e-12; the number of floored pixels comes back as a warning counter.
    Returns (loss, gradient w.r.t. the probability stack, clamp count).
    """
    probs = np.asarray(sem_probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[1:] != pseudo_sem.grid.shape:
        raise ShapeError(f"probability stack shape {probs.shape} does not match grid")
    if probs.shape[0] < pseudo_sem.num_classes + 1:
        raise ShapeError(
            f"probability stack has {probs.shape[0]} channels, needs "
            f"{pseudo_sem.num_classes + 1} (background + classes)"
        )
    col_sums = probs.sum(axis=0)
    if not np.allclose(col_sums, 1.0, atol=1e-6):
        raise ValidationError("per-pixel class probabilities must sum to 1")
    support = np.ones(pseudo_sem.grid.shape, dtype=bool)
    if pseudo_sem.ignore is not None:
        support &= ~pseudo_sem.ignore
    n = int(support.sum())
    grad = np.zeros_like(probs)
    if n == 0:
        return 0.0, grad, 0
    ys, xs = np.nonzero(support)
    labels = pseudo_sem.labels[ys, xs]
    picked = probs[labels, ys, xs]
    clamped = int((picked < PROB_FLOOR).sum())
    picked = np.maximum(picked, PROB_FLOOR)
    loss = float(-np.log(picked).sum()) / n
    grad[labels, ys, xs] = -1.0 / (picked * n)
    return loss, grad, clamped


@dataclass(frozen=True)
class LossReport:
    """Weighted joint objective and its gradients per output head."""

    l_center: float
    l_offset: float
    l_sem: float
    total: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        return {"l_center": self.l_center, "l_offset": self.l_offset,
                "l_sem": self.l_sem, "total": self.total}

    def to_json(self) -> dict:
        return self.scalars()


def total_loss(center_part: tuple[float, np.ndarray],
               offset_part: tuple[float, np.ndarray, np.ndarray],
               sem_part: tuple[float, np.ndarray],
               cfg: RefineConfig = RefineConfig()) -> LossReport:
    """Combine the three objectives with the configured weights.

    The total is exactly lambda_center*l_center + lambda_offset*l_offset
    + lambda_sem*l_sem and every gradient is scaled by its head's weight.
    """
    l_center, g_center = center_part
    l_offset, gy, gx = offset_part
    l_sem, g_sem = sem_part[0], sem_part[1]
    total = cfg.lambda_center * l_center + cfg.lambda_offset * l_offset + cfg.lambda_sem * l_sem
    gradients = {
        "center": cfg.lambda_center * g_center,
        "offset_dy": cfg.lambda_offset * gy,
        "offset_dx": cfg.lambda_offset * gx,
        "sem": cfg.lambda_sem * g_sem,
    }
    return LossReport(l_center=l_center, l_offset=l_offset, l_sem=l_sem,
                      total=total, gradients=gradients)
