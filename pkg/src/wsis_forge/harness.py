"""Desk-scale experiment engine over synthetic scenes.

A scene plants shaped instances on a small grid and derives the inputs a
real pipeline would get from upstream networks: a clean semantic map, an
activation stack with one blurred blob per cued instance plus clutter
bumps, and point-style cues. Withheld cues (drop_rate) simulate missing
instances in the pseudo labels.

Training replaces the segmentation CNN with free per-pixel parameter
maps: a pre-sigmoid plane per class for the center head, two scaled
planes for the offsets, and per-class logits for the semantic head.
Plain gradient descent drives them; an optional box filter on the
center/offset parameter gradients stands in for the spatial
generalization a convolutional network would provide (radius 0 turns it
off, leaving a purely local parameterization that cannot propagate
evidence into unguided regions).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .arrayio import save_json
from .core import (
    ActivationStack,
    CenterMap,
    ImageGrid,
    Instance,
    InstanceLabelSet,
    OffsetMap,
    SemanticMap,
    ValidationError,
    labels_to_json,
    mask_centroid,
)
from .peak_attention import (
    AttentionParams,
    Cue,
    PeakCueSet,
    extract_instance_cues,
    sharpen_activations,
)
from .refine import (
    LossReport,
    RefineConfig,
    build_refined_labels,
    loss_center,
    loss_offset,
    loss_sem,
    total_loss,
    weight_mask,
)
from .representation import DEFAULT_SIGMA
from .transfer import labels_to_targets, transfer_knowledge

DEFAULT_IOU_THRESHOLDS = (0.25, 0.5, 0.7, 0.75)
DEFAULT_OFFSET_SCALE = 80.0
DEFAULT_CENTER_INIT = -4.5
DEFAULT_OFFSET_NOISE = 5.0
DEFAULT_SMOOTH_RADIUS = 2
DEFAULT_GATE = 0.7
TP_IOU = 0.5


class TrainingDiverged(RuntimeError):
    """The objective became non-finite during an update."""


class ConfigError(ValueError):
    """An experiment config violates the schema."""

    def __init__(self, keys: Sequence[str]):
        self.keys = list(keys)
        super().__init__("invalid experiment config keys: " + ", ".join(self.keys))


# ---------------------------------------------------------------------------
# Scene generation


@dataclass(frozen=True)
class SceneInstance:
    class_id: int
    shape: str  # disc | rectangle | blob
    center: tuple[float, float]
    size: float


@dataclass(frozen=True)
class SceneSpec:
    grid: ImageGrid
    instances: tuple[SceneInstance, ...]
    drop_rate: float = 0.0
    seed: int = 0
    num_classes: int | None = None
    noise_bumps: int = 0
    drop_bias: str = "largest"  # which members lose their cue: largest | random

    def __post_init__(self):
        if not (0.0 <= self.drop_rate <= 1.0):
            raise ValidationError(f"drop_rate must lie in [0, 1], got {self.drop_rate}")
        if self.drop_bias not in ("largest", "random"):
            raise ValidationError(f"unknown drop_bias {self.drop_bias!r}")
        for inst in self.instances:
            cy, cx = inst.center
            if not (0 <= cy < self.grid.height and 0 <= cx < self.grid.width):
                raise ValidationError(f"instance center {inst.center} is outside the grid")
            if inst.size <= 0:
                raise ValidationError("instance size must be positive")
            if inst.shape not in ("disc", "rectangle", "blob"):
                raise ValidationError(f"unknown shape {inst.shape!r}")

    def resolved_classes(self) -> int:
        if self.num_classes is not None:
            return self.num_classes
        return max((i.class_id for i in self.instances), default=1)


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    truth: InstanceLabelSet
    semantic: SemanticMap
    activations: ActivationStack
    cues: PeakCueSet  # point-style cues for the non-dropped instances
    num_classes: int


def _rasterize(inst: SceneInstance, grid: ImageGrid, rng: np.random.Generator) -> np.ndarray:
    ii = np.arange(grid.height, dtype=np.float64)[:, None]
    jj = np.arange(grid.width, dtype=np.float64)[None, :]
    cy, cx = inst.center
    r = inst.size
    if inst.shape == "disc":
        return (ii - cy) ** 2 + (jj - cx) ** 2 <= r * r
    if inst.shape == "rectangle":
        return (np.abs(ii - cy) <= r) & (np.abs(jj - cx) <= 0.75 * r)
    # blob: a disc plus two jittered satellite discs
    mask = (ii - cy) ** 2 + (jj - cx) ** 2 <= (0.8 * r) ** 2
    for _ in range(2):
        oy, ox = rng.uniform(-0.6 * r, 0.6 * r, size=2)
        rr = 0.6 * r
        mask |= (ii - (cy + oy)) ** 2 + (jj - (cx + ox)) ** 2 <= rr * rr
    return mask


def _interior_anchor(mask: np.ndarray) -> tuple[int, int]:
    """Mask pixel closest to the centroid (the centroid itself can fall
    outside a concave visible region)."""
    cy, cx = mask_centroid(mask)
    ys, xs = np.nonzero(mask)
    k = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    return int(ys[k]), int(xs[k])


def _gaussian(grid: ImageGrid, cy: float, cx: float, sigma: float) -> np.ndarray:
    ii = np.arange(grid.height, dtype=np.float64)[:, None]
    jj = np.arange(grid.width, dtype=np.float64)[None, :]
    return np.exp(-((ii - cy) ** 2 + (jj - cx) ** 2) / (2.0 * sigma * sigma))


def generate_scene(spec: SceneSpec) -> Scene:
    """Materialize a scene spec deterministically.

    Instances paint in list order (later ones win contested pixels); the
    ground truth keeps each instance's visible part. A point cue and an
    activation blob appear for every visible instance except a stratified
    drop_rate fraction per class, whose absence downstream turns them
    into missing instances.
    """
    grid = spec.grid
    num_classes = spec.resolved_classes()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(spec.seed, 0xC0FFEE)))

    owner = np.zeros(grid.shape, dtype=np.int32)
    for idx, inst in enumerate(spec.instances):
        owner[_rasterize(inst, grid, rng)] = idx + 1

    visible: list[tuple[int, np.ndarray]] = []  # (spec index, visible mask)
    for idx, inst in enumerate(spec.instances):
        mask = owner == idx + 1
        if mask.any():
            visible.append((idx, mask))

    labels = np.zeros(grid.shape, dtype=np.int32)
    truth_instances = []
    for idx, mask in visible:
        inst = spec.instances[idx]
        labels[mask] = inst.class_id
        truth_instances.append(Instance(class_id=inst.class_id, mask=mask,
                                        center=mask_centroid(mask), score=1.0))
    truth = InstanceLabelSet(grid=grid, instances=tuple(truth_instances))
    semantic = SemanticMap(grid=grid, labels=labels, num_classes=num_classes)

    # stratified drop: withhold round(drop_rate * n) cues per class, taking
    # the largest members first (or uniformly at random)
    by_class: dict[int, list[int]] = {}
    for pos, (idx, _mask) in enumerate(visible):
        by_class.setdefault(spec.instances[idx].class_id, []).append(pos)
    dropped: set[int] = set()
    for class_id in sorted(by_class):
        members = by_class[class_id]
        k = int(round(spec.drop_rate * len(members)))
        if k <= 0:
            continue
        if spec.drop_bias == "largest":
            by_area = sorted(members, key=lambda pos: (-int(visible[pos][1].sum()), pos))
            dropped.update(by_area[:k])
        else:
            chosen = rng.choice(len(members), size=k, replace=False)
            dropped.update(members[i] for i in np.sort(chosen))

    channels = np.zeros((num_classes, grid.height, grid.width))
    cues: list[Cue] = []
    for pos, (idx, mask) in enumerate(visible):
        if pos in dropped:
            continue
        inst = spec.instances[idx]
        ay, ax = _interior_anchor(mask)
        amplitude = rng.uniform(0.85, 1.0)
        sigma_a = max(1.5, inst.size / 1.5)
        ch = inst.class_id - 1
        np.maximum(channels[ch], amplitude * _gaussian(grid, ay, ax, sigma_a), out=channels[ch])
        cues.append(Cue(class_id=inst.class_id, y=ay, x=ax, score=1.0))
    for ch in range(num_classes):
        for _ in range(spec.noise_bumps):
            by = rng.uniform(0, grid.height - 1)
            bx = rng.uniform(0, grid.width - 1)
            amp = rng.uniform(0.30, 0.55)
            sig = rng.uniform(1.2, 2.2)
            np.maximum(channels[ch], amp * _gaussian(grid, by, bx, sig), out=channels[ch])

    cues.sort(key=lambda c: (c.class_id, c.y, c.x))
    return Scene(spec=spec, truth=truth, semantic=semantic,
                 activations=ActivationStack(grid=grid, channels=channels),
                 cues=PeakCueSet(cues=tuple(cues)), num_classes=num_classes)


def sample_scene_spec(seed: int, grid: ImageGrid, num_classes: int = 2,
                      instances: tuple[int, int] = (4, 4),
                      radius: tuple[float, float] = (2.8, 6.2),
                      shapes: Sequence[str] = ("disc", "rectangle", "blob"),
                      drop_rate: float = 0.0, noise_bumps: int = 0,
                      min_gap: float = 2.0, margin: float = 2.0,
                      pair_spacing: tuple[float, float] = (11.0, 13.5)) -> SceneSpec:
    """Draw a random non-touching layout with paired class placement.

    Instances are distributed round-robin over the classes; members of a
    class after its first are anchored at pair_spacing distance from that
    first member, so every multi-member class forms a spatially coherent
    same-class group. Within a group the first member is drawn from the
    small end of the radius range and later members from the large end
    (large members are discs), giving size-asymmetric pairs. Placement
    rejection-samples centers until no two masks can touch.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x5CE11E)))
    n = int(rng.integers(instances[0], instances[1] + 1))
    counts = {c: n // num_classes + (1 if (c - 1) < n % num_classes else 0)
              for c in range(1, num_classes + 1)}
    span = radius[1] - radius[0]

    def attempt() -> list[SceneInstance] | None:
        placed: list[SceneInstance] = []

        def fits(cy: float, cx: float, size: float) -> bool:
            pad = size + margin
            if not (pad <= cy <= grid.height - 1 - pad and pad <= cx <= grid.width - 1 - pad):
                return False
            return all(
                np.hypot(cy - p.center[0], cx - p.center[1]) >= size + p.size + min_gap
                for p in placed
            )

        for class_id in range(1, num_classes + 1):
            anchor: tuple[float, float] | None = None
            for member in range(counts[class_id]):
                if member == 0 or span <= 0:
                    size = float(rng.uniform(radius[0], radius[0] + 0.3 * span))
                    shape = str(rng.choice(list(shapes)))
                else:
                    size = float(rng.uniform(radius[1] - 0.3 * span, radius[1]))
                    shape = "disc"
                pad = size + margin
                if grid.height - 1 - pad <= pad or grid.width - 1 - pad <= pad:
                    raise ValidationError("grid too small for the requested instance radius")
                pos = None
                for _try in range(200):
                    if anchor is None:
                        cy = float(rng.uniform(pad, grid.height - 1 - pad))
                        cx = float(rng.uniform(pad, grid.width - 1 - pad))
                    else:
                        dist = float(rng.uniform(*pair_spacing))
                        ang = float(rng.uniform(0.0, 2.0 * np.pi))
                        cy = anchor[0] + dist * np.sin(ang)
                        cx = anchor[1] + dist * np.cos(ang)
                    if fits(cy, cx, size):
                        pos = (cy, cx)
                        break
                if pos is None:
                    return None
                placed.append(SceneInstance(class_id=class_id, shape=shape,
                                            center=pos, size=size))
                if anchor is None:
                    anchor = pos
        return placed

    placed = None
    for _restart in range(50):
        placed = attempt()
        if placed is not None:
            break
    if placed is None:
        raise ValidationError(
            f"could not place {n} instances on {grid.shape} without contact")
    return SceneSpec(grid=grid, instances=tuple(placed), drop_rate=drop_rate,
                     seed=seed, num_classes=num_classes, noise_bumps=noise_bumps)


# ---------------------------------------------------------------------------
# Direct-parameterization training


@dataclass(frozen=True)
class TrainState:
    """Free parameter maps standing in for the network's output heads."""

    center_params: np.ndarray  # (C, H, W) pre-sigmoid
    offset_params: np.ndarray  # (2, H, W), offsets are offset_scale * params
    sem_params: np.ndarray     # (C + 1, H, W) logits, channel 0 = background
    iteration: int
    rng: np.random.Generator
    offset_scale: float = DEFAULT_OFFSET_SCALE


def init_train_state(grid: ImageGrid, num_classes: int, seed: int = 0,
                     center_init: float = DEFAULT_CENTER_INIT,
                     offset_scale: float = DEFAULT_OFFSET_SCALE,
                     offset_noise: float = DEFAULT_OFFSET_NOISE) -> TrainState:
    """Fresh parameter maps: a uniformly low center head and an offset head
    holding junk of about offset_noise pixels magnitude, mimicking the
    unstructured output of an untrained network (the clustering area check
    exists to survive exactly that regime)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x7EA1)))
    offset_params = rng.normal(0.0, offset_noise / offset_scale,
                               size=(2, grid.height, grid.width))
    return TrainState(
        center_params=np.full((num_classes, grid.height, grid.width), center_init),
        offset_params=offset_params,
        sem_params=np.zeros((num_classes + 1, grid.height, grid.width)),
        iteration=0,
        rng=rng,
        offset_scale=offset_scale,
    )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


@dataclass(frozen=True)
class ForwardMaps:
    center: CenterMap
    offset: OffsetMap
    sem_probs: np.ndarray
    sem_argmax: SemanticMap


def forward_maps(state: TrainState, grid: ImageGrid, num_classes: int) -> ForwardMaps:
    center = CenterMap(grid=grid, channels=_sigmoid(state.center_params))
    offset = OffsetMap(grid=grid, dy=state.offset_scale * state.offset_params[0],
                       dx=state.offset_scale * state.offset_params[1])
    probs = _softmax(state.sem_params)
    argmax = SemanticMap(grid=grid, labels=probs.argmax(axis=0).astype(np.int32),
                         num_classes=num_classes)
    return ForwardMaps(center=center, offset=offset, sem_probs=probs, sem_argmax=argmax)


@dataclass(frozen=True)
class PseudoSupervision:
    """Pseudo targets plus their guidance supports and the semantic source."""

    center: CenterMap
    offset: OffsetMap
    guided: np.ndarray
    class_support: np.ndarray
    semantic: SemanticMap


def make_supervision(scene: Scene, pseudo_labels: InstanceLabelSet,
                     cfg: RefineConfig = RefineConfig()) -> PseudoSupervision:
    targets = labels_to_targets(pseudo_labels, sigma=cfg.sigma, num_classes=scene.num_classes)
    return PseudoSupervision(center=targets.center, offset=targets.offset,
                             guided=targets.guided, class_support=targets.class_support,
                             semantic=scene.semantic)


def _smooth(grad: np.ndarray, radius: int) -> np.ndarray:
    """Blend each gradient plane with a Gaussian-smoothed copy.

    The raw component keeps every error mode correctable (a pure box
    filter has blind frequencies that let stationary ripples survive);
    the smoothed component couples neighboring parameters, standing in
    for a convolutional network's spatial generalization.
    """
    if radius <= 0:
        return grad
    smoothed = gaussian_filter(grad, sigma=(0, radius, radius), mode="constant")
    return 0.5 * (grad + smoothed)


def train_step(state: TrainState, supervision: PseudoSupervision,
               cfg: RefineConfig = RefineConfig(), *,
               iag_enabled: bool = True, refine_enabled: bool = True,
               clustering_enabled: bool = True, lr: float = 0.5,
               smooth_radius: int = DEFAULT_SMOOTH_RADIUS,
               ) -> tuple[TrainState, LossReport]:
    """One gradient-descent update of the parameter maps.

    With refinement on, refined labels are rebuilt from the current
    outputs every call and contribute their confidence-weighted terms.
    With guidance off, the pseudo and refined loss supports widen to the
    whole grid, so background (and any missing instance) is actively
    supervised toward the encoded targets' zeros.
    """
    grid = supervision.semantic.grid
    num_classes = supervision.semantic.num_classes
    fwd = forward_maps(state, grid, num_classes)
    whole = np.ones(grid.shape, dtype=bool)

    refined_center = refined_offset = None
    p_refined = None
    refined_support = None
    weights = None
    if refine_enabled:
        refined = build_refined_labels(fwd.center, fwd.offset, fwd.sem_argmax, cfg,
                                       with_clustering=clustering_enabled)
        if len(refined) > 0:
            ref_targets = labels_to_targets(refined, sigma=cfg.sigma, num_classes=num_classes)
            refined_center, refined_offset = ref_targets.center, ref_targets.offset
            p_refined = ref_targets.guided if iag_enabled else whole
            refined_support = ref_targets.class_support if iag_enabled else whole
            weights = weight_mask(refined, fwd.center)

    p_pseudo = supervision.guided if iag_enabled else whole
    pseudo_support = supervision.class_support if iag_enabled else whole
    center_part = loss_center(fwd.center, supervision.center, pseudo_support,
                              refined_center, refined_support, weights)
    offset_part = loss_offset(fwd.offset, supervision.offset, p_pseudo,
                              refined_offset, p_refined, weights, norm=cfg.offset_norm)
    sem_loss, sem_grad, _clamped = loss_sem(fwd.sem_probs, supervision.semantic)
    report = total_loss(center_part, offset_part, (sem_loss, sem_grad), cfg)
    if not np.isfinite(report.total):
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}")

    sig = fwd.center.channels
    g_center = report.gradients["center"] * sig * (1.0 - sig)
    g_offset = np.stack([report.gradients["offset_dy"], report.gradients["offset_dx"]])
    g_offset *= state.offset_scale
    probs = fwd.sem_probs
    g_sem_probs = report.gradients["sem"]
    g_sem = probs * (g_sem_probs - (g_sem_probs * probs).sum(axis=0, keepdims=True))

    g_center = _smooth(g_center, smooth_radius)
    g_offset = _smooth(g_offset, smooth_radius)

    new_state = TrainState(
        center_params=state.center_params - lr * g_center,
        offset_params=state.offset_params - lr * g_offset,
        sem_params=state.sem_params - lr * g_sem,
        iteration=state.iteration + 1,
        rng=state.rng,
        offset_scale=state.offset_scale,
    )
    for arr in (new_state.center_params, new_state.offset_params, new_state.sem_params):
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(f"non-finite parameters at iteration {state.iteration}")
    return new_state, report


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class MetricsRow:
    iteration: int
    true_positives: int
    map_by_threshold: dict[float, float]
    losses: dict[str, float] = field(default_factory=dict)

    def csv_values(self) -> list:
        return [
            self.iteration,
            self.true_positives,
            *(f"{self.map_by_threshold[t]:.8f}" for t in DEFAULT_IOU_THRESHOLDS),
            *(f"{self.losses.get(k, 0.0):.10g}" for k in ("l_center", "l_offset", "l_sem", "total")),
        ]


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    if inter == 0:
        return 0.0
    union = int(np.logical_or(a, b).sum())
    return inter / union


def _match_pair(preds: Sequence[Instance], truths: Sequence[Instance],
                threshold: float) -> list[tuple[float, bool]]:
    """Greedy confidence-ordered matching within one scene and one class.

    Returns (score, is_tp) per prediction. A prediction is a true positive
    when its best-IoU unmatched truth reaches the threshold.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(truths)
    out: list[tuple[float, bool]] = []
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, truth in enumerate(truths):
            if taken[j]:
                continue
            iou = _mask_iou(preds[i].mask, truth.mask)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            taken[best_j] = True
            out.append((preds[i].score, True))
        else:
            out.append((preds[i].score, False))
    return out


def _pooled_ap(pairs: Sequence[tuple[InstanceLabelSet, InstanceLabelSet]],
               class_id: int, threshold: float) -> tuple[float, int]:
    """All-point average precision for one class pooled over scene pairs.

    Returns (ap, tp_count). Matching is per scene; the ranked list pools
    every prediction of the class across scenes by descending score.
    """
    scored: list[tuple[float, bool]] = []
    n_truth = 0
    for predicted, truth in pairs:
        preds = [p for p in predicted.instances if p.class_id == class_id]
        truths = [t for t in truth.instances if t.class_id == class_id]
        n_truth += len(truths)
        scored.extend(_match_pair(preds, truths, threshold))
    if n_truth == 0:
        return 0.0, 0
    scored.sort(key=lambda st: -st[0])
    ap = 0.0
    tp_cum = 0
    prev_recall = 0.0
    for rank, (_score, is_tp) in enumerate(scored, start=1):
        if is_tp:
            tp_cum += 1
            recall = tp_cum / n_truth
            ap += (recall - prev_recall) * (tp_cum / rank)
            prev_recall = recall
    return ap, tp_cum


def evaluate_pairs(pairs: Sequence[tuple[InstanceLabelSet, InstanceLabelSet]],
                   iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
                   ) -> MetricsRow:
    """Pooled mAP over all classes present in the truth sets, plus the
    true-positive count at IoU 0.5."""
    classes = sorted({t.class_id for _p, truth in pairs for t in truth.instances})
    map_by_threshold: dict[float, float] = {}
    tp_at_half = 0
    for thr in iou_thresholds:
        aps = []
        tp_total = 0
        for class_id in classes:
            ap, tp = _pooled_ap(pairs, class_id, thr)
            aps.append(ap)
            tp_total += tp
        map_by_threshold[thr] = float(np.mean(aps)) if aps else 0.0
        if thr == TP_IOU:
            tp_at_half = tp_total
    if TP_IOU not in iou_thresholds:
        tp_at_half = sum(_pooled_ap(pairs, c, TP_IOU)[1] for c in classes)
    return MetricsRow(iteration=0, true_positives=tp_at_half,
                      map_by_threshold=map_by_threshold)


def evaluate(predicted: InstanceLabelSet, truth: InstanceLabelSet,
             iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS) -> MetricsRow:
    """Single-scene evaluation; see evaluate_pairs for the protocol."""
    if predicted.grid != truth.grid:
        raise ValidationError("predicted and truth grids differ")
    return evaluate_pairs([(predicted, truth)], iou_thresholds)


# ---------------------------------------------------------------------------
# Experiment runner


@dataclass(frozen=True)
class AblationFlags:
    pam: bool = True
    iag: bool = True
    refine: bool = True
    cluster: bool = True


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    predictions: InstanceLabelSet
    losses: dict[str, float]


@dataclass(frozen=True)
class SceneRun:
    scene: Scene
    pseudo_labels: InstanceLabelSet
    supervision: PseudoSupervision
    records: tuple[IterationRecord, ...]
    final_state: TrainState
    refined_dumps: dict[int, InstanceLabelSet]


def scene_cues(scene: Scene, flags: AblationFlags, gate: float = DEFAULT_GATE,
               cue_threshold: float = 0.5) -> PeakCueSet:
    """Cue source for a run: sharpened activations when the attention
    module is on, raw max-normalized activations otherwise."""
    stack = scene.activations
    if flags.pam:
        params = AttentionParams.identity(stack.num_channels, gate=gate)
        stack = sharpen_activations(stack, params)
    return extract_instance_cues(stack, cue_threshold=cue_threshold)


def train_scene(scene: Scene, flags: AblationFlags, cfg: RefineConfig,
                iterations: int, lr: float, *,
                metrics_interval: int = 1,
                checkpoint_interval: int | None = None,
                smooth_radius: int = DEFAULT_SMOOTH_RADIUS,
                offset_scale: float = DEFAULT_OFFSET_SCALE,
                offset_noise: float = DEFAULT_OFFSET_NOISE,
                center_init: float = DEFAULT_CENTER_INIT,
                seed: int = 0) -> SceneRun:
    """Full single-scene pipeline: cues, transfer, refinement training.

    Records predictions and losses at iteration 0, every metrics_interval,
    and the final iteration. Predictions use the run's own label machinery:
    heatmap center extraction plus, when the run has clustering enabled,
    offset-field clustering as a second center source.
    """
    cues = scene_cues(scene, flags)
    pseudo_labels, _diag = transfer_knowledge(scene.semantic, cues)
    supervision = make_supervision(scene, pseudo_labels, cfg)
    state = init_train_state(scene.spec.grid, scene.num_classes, seed=seed,
                             center_init=center_init, offset_scale=offset_scale,
                             offset_noise=offset_noise)

    def snapshot(st: TrainState, losses: dict[str, float]) -> IterationRecord:
        fwd = forward_maps(st, scene.spec.grid, scene.num_classes)
        preds = build_refined_labels(fwd.center, fwd.offset, fwd.sem_argmax, cfg,
                                     with_clustering=flags.refine and flags.cluster)
        return IterationRecord(iteration=st.iteration, predictions=preds, losses=losses)

    # a zero-rate step measures the objective without touching the state
    _unused, report0 = train_step(state, supervision, cfg, iag_enabled=flags.iag,
                                  refine_enabled=flags.refine,
                                  clustering_enabled=flags.cluster, lr=0.0,
                                  smooth_radius=smooth_radius)
    records = [snapshot(state, report0.scalars())]
    refined_dumps: dict[int, InstanceLabelSet] = {}
    for t in range(1, iterations + 1):
        state, report = train_step(state, supervision, cfg, iag_enabled=flags.iag,
                                   refine_enabled=flags.refine,
                                   clustering_enabled=flags.cluster, lr=lr,
                                   smooth_radius=smooth_radius)
        if t % metrics_interval == 0 or t == iterations:
            records.append(snapshot(state, report.scalars()))
        if checkpoint_interval and (t % checkpoint_interval == 0 or t == iterations):
            if flags.refine:
                fwd = forward_maps(state, scene.spec.grid, scene.num_classes)
                refined_dumps[t] = build_refined_labels(fwd.center, fwd.offset,
                                                        fwd.sem_argmax, cfg,
                                                        with_clustering=flags.cluster)
    return SceneRun(scene=scene, pseudo_labels=pseudo_labels, supervision=supervision,
                    records=tuple(records), final_state=state, refined_dumps=refined_dumps)


EXPERIMENT_SCHEMA: dict = {
    "type": "object",
    "required": ["scenes", "flags", "iterations", "lr", "seed", "output_dir"],
    "additionalProperties": False,
    "properties": {
        "scenes": {
            "type": "object",
            "required": ["count", "height", "width"],
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 8},
                "width": {"type": "integer", "minimum": 8},
                "num_classes": {"type": "integer", "minimum": 1},
                "instances_min": {"type": "integer", "minimum": 1},
                "instances_max": {"type": "integer", "minimum": 1},
                "radius_min": {"type": "number", "exclusiveMinimum": 0},
                "radius_max": {"type": "number", "exclusiveMinimum": 0},
                "drop_rate": {"type": "number", "minimum": 0, "maximum": 1},
                "noise_bumps": {"type": "integer", "minimum": 0},
                "min_gap": {"type": "number", "minimum": 0},
                "shapes": {"type": "array", "items": {"enum": ["disc", "rectangle", "blob"]},
                           "minItems": 1},
            },
        },
        "flags": {
            "type": "object",
            "required": ["pam", "iag", "refine", "cluster"],
            "additionalProperties": False,
            "properties": {
                "pam": {"type": "boolean"},
                "iag": {"type": "boolean"},
                "refine": {"type": "boolean"},
                "cluster": {"type": "boolean"},
            },
        },
        "iterations": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "metrics_interval": {"type": "integer", "minimum": 1},
        "checkpoint_interval": {"type": "integer", "minimum": 1},
        "smooth_radius": {"type": "integer", "minimum": 0},
        "offset_scale": {"type": "number", "exclusiveMinimum": 0},
        "center_init": {"type": "number"},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "threads": {"type": "integer", "minimum": 1},
        "write_curves": {"type": "boolean"},
    },
}

CSV_COLUMNS = ["iteration", "tp", "map25", "map50", "map70", "map75",
               "l_center", "l_offset", "l_sem", "total"]


def validate_experiment_config(config: dict) -> None:
    import re

    import jsonschema

    validator = jsonschema.Draft202012Validator(EXPERIMENT_SCHEMA)
    errors = sorted(validator.iter_errors(config),
                    key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        keys = []
        for err in errors:
            path = ".".join(str(p) for p in err.absolute_path)
            if err.validator == "additionalProperties":
                # name the unexpected keys instead of the containing object
                unexpected = re.findall(r"'([^']+)' (?:was|were) unexpected", err.message)
                extras = re.findall(r"'([^']+)'", err.message) if not unexpected else unexpected
                for key in extras:
                    keys.append(f"{path}.{key}" if path else key)
            else:
                keys.append(path or "<root>")
        raise ConfigError(sorted(set(keys)))
    scenes = config["scenes"]
    lo = scenes.get("instances_min", 4)
    hi = scenes.get("instances_max", 4)
    if lo > hi:
        raise ConfigError(["scenes.instances_min"])
    if scenes.get("radius_min", 3.5) > scenes.get("radius_max", 5.5):
        raise ConfigError(["scenes.radius_min"])


def _build_scenes(config: dict) -> list[Scene]:
    sc = config["scenes"]
    grid = ImageGrid(sc["height"], sc["width"])
    scenes = []
    for idx in range(sc["count"]):
        spec = sample_scene_spec(
            seed=config["seed"] * 100003 + idx,
            grid=grid,
            num_classes=sc.get("num_classes", 2),
            instances=(sc.get("instances_min", 4), sc.get("instances_max", 4)),
            radius=(sc.get("radius_min", 3.5), sc.get("radius_max", 5.5)),
            shapes=tuple(sc.get("shapes", ["disc", "rectangle", "blob"])),
            drop_rate=sc.get("drop_rate", 0.0),
            noise_bumps=sc.get("noise_bumps", 0),
            min_gap=sc.get("min_gap", 2.0),
        )
        scenes.append(generate_scene(spec))
    return scenes


def run_experiment(config: dict, threads: int | None = None) -> dict:
    """Run a configured suite and write metrics plus label dumps.

    Output layout under output_dir: metrics.csv (one row per recorded
    iteration, pooled over scenes), curves.tsv, labels/scene_***/ with
    pseudo, refined and final label JSON dumps.
    """
    validate_experiment_config(config)
    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = AblationFlags(**config["flags"])
    cfg = RefineConfig(sigma=config.get("sigma", DEFAULT_SIGMA))
    iterations = config["iterations"]
    metrics_interval = config.get("metrics_interval", 1)
    checkpoint_interval = config.get("checkpoint_interval", max(1, iterations // 4) if iterations else None)
    scenes = _build_scenes(config)
    worker_count = threads or config.get("threads", 1)

    def run_one(item: tuple[int, Scene]) -> SceneRun:
        idx, scene = item
        return train_scene(
            scene, flags, cfg, iterations, config["lr"],
            metrics_interval=metrics_interval,
            checkpoint_interval=checkpoint_interval,
            smooth_radius=config.get("smooth_radius", DEFAULT_SMOOTH_RADIUS),
            offset_scale=config.get("offset_scale", DEFAULT_OFFSET_SCALE),
            center_init=config.get("center_init", DEFAULT_CENTER_INIT),
            seed=config["seed"] * 7919 + idx,
        )

    items = list(enumerate(scenes))
    if worker_count > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            runs = list(pool.map(run_one, items))
    else:
        runs = [run_one(item) for item in items]

    iters_recorded = [rec.iteration for rec in runs[0].records]
    rows: list[MetricsRow] = []
    for pos, iteration in enumerate(iters_recorded):
        pairs = [(run.records[pos].predictions, run.scene.truth) for run in runs]
        row = evaluate_pairs(pairs)
        mean_losses = {
            key: float(np.mean([run.records[pos].losses[key] for run in runs]))
            for key in ("l_center", "l_offset", "l_sem", "total")
        }
        rows.append(MetricsRow(iteration=iteration, true_positives=row.true_positives,
                               map_by_threshold=row.map_by_threshold, losses=mean_losses))

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())

    if config.get("write_curves", True):
        with open(out_dir / "curves.tsv", "w", encoding="utf-8") as fh:
            fh.write("iteration\ttp\tmap50\n")
            for row in rows:
                fh.write(f"{row.iteration}\t{row.true_positives}\t{row.map_by_threshold[0.5]:.8f}\n")

    labels_dir = out_dir / "labels"
    for idx, run in enumerate(runs):
        scene_dir = labels_dir / f"scene_{idx:03d}"
        scene_dir.mkdir(parents=True, exist_ok=True)
        save_json(scene_dir / "pseudo.json", labels_to_json(run.pseudo_labels))
        for t, refined in sorted(run.refined_dumps.items()):
            save_json(scene_dir / f"refined_iter{t:05d}.json", labels_to_json(refined))
        save_json(scene_dir / "final.json", labels_to_json(run.records[-1].predictions))

    return {
        "metrics_csv": str(csv_path),
        "rows": len(rows),
        "final_map50": rows[-1].map_by_threshold[0.5] if rows else 0.0,
        "final_tp": rows[-1].true_positives if rows else 0,
    }
