"""Semantic knowledge transfer: class regions + instance cues -> pseudo labels.

Connected components of each class's region are instance mask candidates.
A candidate containing exactly one cue of its class becomes a pseudo
instance; candidates with zero or multiple cues stay unguided (a missing
instance and a suspected overlap, respectively). Components below a small
area floor are treated as segmentation noise and never reach cue counting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .arrayio import load_json
from .core import (
    CenterMap,
    FormatError,
    ImageGrid,
    Instance,
    InstanceLabelSet,
    OffsetMap,
    SemanticMap,
    ValidationError,
    mask_centroid,
)
from .peak_attention import Cue, PeakCueSet
from .representation import DEFAULT_SIGMA, encode_center_map, encode_offset_map

DEFAULT_MIN_AREA = 16
DEFAULT_CONNECTIVITY = 8


class _UnionFind:
    """Array-backed disjoint sets with path halving."""

    def __init__(self):
        self.parent: list[int] = []

    def make(self) -> int:
        label = len(self.parent)
        self.parent.append(label)
        return label

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb


@dataclass(frozen=True)
class ComponentSet:
    """Connected components of a binary plane; id 0 means no component."""

    ids: np.ndarray
    count: int

    @cached_property
    def areas(self) -> np.ndarray:
        return np.bincount(self.ids.ravel(), minlength=self.count + 1)

    @cached_property
    def centroids(self) -> np.ndarray:
        """Row (cid, :) holds the (y, x) centroid of component cid."""
        h, w = self.ids.shape
        flat = self.ids.ravel()
        ys = np.repeat(np.arange(h, dtype=np.float64), w)
        xs = np.tile(np.arange(w, dtype=np.float64), h)
        sy = np.bincount(flat, weights=ys, minlength=self.count + 1)
        sx = np.bincount(flat, weights=xs, minlength=self.count + 1)
        areas = np.maximum(self.areas, 1)
        return np.stack([sy / areas, sx / areas], axis=1)

    def mask(self, component_id: int) -> np.ndarray:
        return self.ids == component_id


def ccl(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> ComponentSet:
    """Two-pass connected-component labeling over row runs with union-find.

    The first scan assigns provisional labels to horizontal runs and
    records equivalences against overlapping runs of the previous row;
    the second scan resolves equivalences and renumbers components
    densely from 1 in raster order of their first pixel.
    """
    if connectivity not in (4, 8):
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    if mask.ndim != 2:
        raise ValidationError(f"ccl expects a 2D plane, got rank {mask.ndim}")
    h, w = mask.shape
    ids = np.zeros((h, w), dtype=np.int32)

    padded = np.zeros((h, w + 2), dtype=np.int8)
    padded[:, 1:-1] = mask
    delta = np.diff(padded, axis=1)
    srow, scol = np.nonzero(delta == 1)
    erow, ecol = np.nonzero(delta == -1)
    if srow.size == 0:
        return ComponentSet(ids=ids, count=0)
    # starts and ends are raster-ordered and pair up one-to-one within rows
    row_break = np.searchsorted(srow, np.arange(h + 1))

    uf = _UnionFind()
    run_label = np.empty(srow.size, dtype=np.int64)
    reach = 1 if connectivity == 8 else 0

    prev_lo = prev_hi = 0
    for r in range(h):
        lo, hi = row_break[r], row_break[r + 1]
        p = prev_lo
        for k in range(lo, hi):
            s, e = scol[k], ecol[k]
            label = -1
            # advance past previous-row runs that end before this run's reach
            while p < prev_hi and ecol[p] + reach <= s:
                p += 1
            q = p
            while q < prev_hi and scol[q] < e + reach:
                if label < 0:
                    label = run_label[q]
                else:
                    uf.union(label, run_label[q])
                q += 1
            if label < 0:
                label = uf.make()
            run_label[k] = label
        prev_lo, prev_hi = lo, hi

    dense: dict[int, int] = {}
    for k in range(srow.size):
        root = uf.find(run_label[k])
        cid = dense.get(root)
        if cid is None:
            cid = len(dense) + 1
            dense[root] = cid
        ids[srow[k], scol[k]:ecol[k]] = cid
    return ComponentSet(ids=ids, count=len(dense))


@dataclass
class TransferDiagnostics:
    """Counts of component fates during transfer, overall and per class."""

    adopted: int = 0
    no_cue: int = 0
    multi_cue: int = 0
    too_small: int = 0
    per_class: dict[int, dict[str, int]] = field(default_factory=dict)

    def record(self, class_id: int, fate: str):
        setattr(self, fate, getattr(self, fate) + 1)
        bucket = self.per_class.setdefault(class_id, {"adopted": 0, "no_cue": 0,
                                                      "multi_cue": 0, "too_small": 0})
        bucket[fate] += 1

    def to_json(self) -> dict:
        return {
            "adopted": self.adopted,
            "no_cue": self.no_cue,
            "multi_cue": self.multi_cue,
            "too_small": self.too_small,
            "per_class": {str(k): dict(v) for k, v in sorted(self.per_class.items())},
        }


def transfer_knowledge(wsss: SemanticMap, cues: PeakCueSet,
                       min_area: int = DEFAULT_MIN_AREA,
                       connectivity: int = DEFAULT_CONNECTIVITY,
                       ) -> tuple[InstanceLabelSet, TransferDiagnostics]:
    """Adopt each class component holding exactly one same-class cue.

    Adopted components become pseudo instances with centroid centers and
    score 1.0. Components with no cue or several cues are left unguided;
    the diagnostics record counts every fate. Cue order does not matter.
    """
    diag = TransferDiagnostics()
    instances: list[Instance] = []
    for class_id in range(1, wsss.num_classes + 1):
        class_mask = wsss.class_mask(class_id)
        if not class_mask.any():
            continue
        comps = ccl(class_mask, connectivity)
        if comps.count == 0:
            continue
        counts = np.zeros(comps.count + 1, dtype=np.int64)
        for cue in cues.for_class(class_id):
            if wsss.grid.contains(cue.y, cue.x):
                counts[comps.ids[cue.y, cue.x]] += 1
        areas = comps.areas
        for cid in range(1, comps.count + 1):
            if areas[cid] < min_area:
                diag.record(class_id, "too_small")
                continue
            if counts[cid] == 0:
                diag.record(class_id, "no_cue")
            elif counts[cid] > 1:
                diag.record(class_id, "multi_cue")
            else:
                mask = comps.mask(cid)
                instances.append(Instance(class_id=class_id, mask=mask,
                                          center=mask_centroid(mask), score=1.0))
                diag.record(class_id, "adopted")
    return InstanceLabelSet(grid=wsss.grid, instances=tuple(instances)), diag


@dataclass(frozen=True)
class Targets:
    """Dense training targets distilled from an instance label set.

    ``guided`` is the flat pixel support (union of instance masks);
    ``class_support`` restricts center-map guidance to each pixel's own
    class channel, which keeps other classes' Gaussian tails from being
    imposed on unrelated instances' regions.
    """

    center: CenterMap
    offset: OffsetMap
    guided: np.ndarray
    class_support: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.center.num_classes


def labels_to_targets(labels: InstanceLabelSet, sigma: float = DEFAULT_SIGMA,
                      num_classes: int | None = None) -> Targets:
    """Encode labels into center/offset maps plus their guidance supports."""
    center = encode_center_map(labels, sigma=sigma, num_classes=num_classes)
    support = np.zeros(center.channels.shape, dtype=bool)
    for inst in labels.instances:
        support[inst.class_id - 1] |= inst.mask
    return Targets(
        center=center,
        offset=encode_offset_map(labels),
        guided=labels.guided_region.copy(),
        class_support=support,
    )


def load_point_cues(path, grid: ImageGrid | None = None) -> PeakCueSet:
    """Read point labels as cues: a JSON list of {class_id, y, x} records.

    Point cues carry score 1.0 and behave exactly like extracted cues
    downstream. Out-of-bounds points are rejected (the upper bound is
    checked when a grid is supplied).
    """
    payload = load_json(path)
    if not isinstance(payload, list):
        raise FormatError(f"{Path(path)}: point cues must be a JSON list")
    cues = []
    for i, entry in enumerate(payload):
        try:
            class_id, y, x = int(entry["class_id"]), int(entry["y"]), int(entry["x"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{Path(path)}: malformed point record {i}: {exc}") from exc
        if class_id < 1:
            raise ValidationError(f"point {i}: class_id must be >= 1, got {class_id}")
        if y < 0 or x < 0 or (grid is not None and not grid.contains(y, x)):
            raise ValidationError(f"point {i}: ({y}, {x}) is out of bounds")
        cues.append(Cue(class_id=class_id, y=y, x=x, score=1.0))
    return PeakCueSet(cues=tuple(cues))
