"""Peak-region sharpening of activation stacks and instance-cue extraction.

The sharpening transform keeps, per channel, only activations at or above
a learned fraction of the channel max: a selector takes the spatial max
S of each channel, a small fully connected controller maps the spatially
averaged stack through a sigmoid to a per-channel gate G in (0, 1), and
the product S*G becomes the channel's keep boundary. Everything below the
boundary is zeroed, everything at or above it passes through verbatim.

Channel k of an activation stack corresponds to semantic class k + 1
(class 0 is background and has no channel).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import ActivationStack, FormatError, ShapeError, ValidationError
from .representation import DEFAULT_NMS_KERNEL, _window_maxima

DEFAULT_CUE_THRESHOLD = 0.5


@dataclass(frozen=True)
class AttentionParams:
    """Controller parameters: a K x K linear map plus bias over channel stats."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=np.float64))
        b = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"controller weights must be square, got {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"controller bias must be ({w.shape[0]},), got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValidationError("controller parameters must be finite")

    @property
    def num_channels(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_json(cls, payload: dict) -> "AttentionParams":
        try:
            return cls(weights=np.array(payload["weights"], dtype=np.float64),
                       bias=np.array(payload["bias"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed controller parameter payload: {exc}") from exc

    @classmethod
    def identity(cls, num_channels: int, gate: float = 0.5) -> "AttentionParams":
        """Zero weights with a bias realizing a fixed gate value."""
        if not (0.0 < gate < 1.0):
            raise ValidationError(f"gate must lie in (0, 1), got {gate}")
        bias = np.full(num_channels, np.log(gate / (1.0 - gate)))
        return cls(weights=np.zeros((num_channels, num_channels)), bias=bias)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _boundaries(stack: ActivationStack, params: AttentionParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (S, G, tau): channel maxima, gate values, keep boundaries."""
    if params.num_channels != stack.num_channels:
        raise ShapeError(
            f"controller is sized for {params.num_channels} channels, stack has {stack.num_channels}"
        )
    gap = stack.channels.mean(axis=(1, 2))
    selector = stack.channels.max(axis=(1, 2))
    gate = _sigmoid(params.weights @ gap + params.bias)
    return selector, gate, selector * gate


def sharpen_activations(stack: ActivationStack, params: AttentionParams) -> ActivationStack:
    """Zero every activation below its channel's keep boundary S*G.

    Surviving values pass through unchanged, so the output is pointwise
    either 0 or equal to the input.
    """
    _, _, tau = _boundaries(stack, params)
    kept = np.where(stack.channels >= tau[:, None, None], stack.channels, 0.0)
    return ActivationStack(grid=stack.grid, channels=kept)


class ControllerGradientReport(NamedTuple):
    d_weights: np.ndarray
    d_bias: np.ndarray
    numeric_d_weights: np.ndarray
    numeric_d_bias: np.ndarray
    stable_weights: np.ndarray  # True where the keep mask held across the FD stencil
    stable_bias: np.ndarray
    max_rel_err: float  # over stable coordinates only


def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(a), np.abs(b))
    out = np.zeros_like(scale)
    live = scale > 1e-10
    out[live] = np.abs(a - b)[live] / scale[live]
    return out


def controller_gradient_check(
    stack: ActivationStack,
    params: AttentionParams,
    loss_fn: Callable[[np.ndarray], float] | None = None,
    loss_grad: Callable[[np.ndarray], np.ndarray] | None = None,
    step: float = 1e-5,
    surrogate: str = "shifted",
) -> ControllerGradientReport:
    """Verify the controller's gradient path against central differences.

    The hard keep/zero gate has no usable derivative in the boundary, so
    training flows through a straight-through surrogate that shifts kept
    activations down by the boundary: relu(X - tau). This check computes
    the analytic gradient of the supplied loss through that surrogate
    (keep mask treated as locally constant) and compares it to central
    finite differences of the same function. With surrogate="hard" the
    literal gate is used instead; its gradient is zero away from
    mask-flip points and the check degenerates to 0 == 0.

    Coordinates where the keep mask flips inside the FD stencil sit on a
    kink and are flagged unstable; max_rel_err covers stable ones only.
    """
    if loss_fn is None:
        loss_fn = lambda out: float(np.sum(out * out))
        loss_grad = lambda out: 2.0 * out
    if loss_grad is None:
        raise ValidationError("loss_grad is required when loss_fn is supplied")
    if surrogate not in ("shifted", "hard"):
        raise ValidationError(f"unknown surrogate {surrogate!r}")

    x = stack.channels
    gap = x.mean(axis=(1, 2))
    selector = x.max(axis=(1, 2))

    def forward(weights: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gate = _sigmoid(weights @ gap + bias)
        tau = selector * gate
        mask = x > tau[:, None, None]
        if surrogate == "shifted":
            out = np.maximum(x - tau[:, None, None], 0.0)
        else:
            out = np.where(x >= tau[:, None, None], x, 0.0)
        return out, mask

    out0, mask0 = forward(params.weights, params.bias)
    k = params.num_channels
    if surrogate == "hard":
        d_weights = np.zeros((k, k))
        d_bias = np.zeros(k)
    else:
        g_out = loss_grad(out0)
        d_tau = -(g_out * mask0).sum(axis=(1, 2))
        z = params.weights @ gap + params.bias
        gate = _sigmoid(z)
        d_z = d_tau * selector * gate * (1.0 - gate)
        d_bias = d_z
        d_weights = np.outer(d_z, gap)

    numeric_w = np.zeros((k, k))
    numeric_b = np.zeros(k)
    stable_w = np.zeros((k, k), dtype=bool)
    stable_b = np.zeros(k, dtype=bool)

    def probe(weights, bias):
        out, mask = forward(weights, bias)
        return loss_fn(out), mask

    for i in range(k):
        for j in range(k):
            w = params.weights.copy()
            w[i, j] += step
            lp, mp = probe(w, params.bias)
            w[i, j] -= 2.0 * step
            lm, mm = probe(w, params.bias)
            numeric_w[i, j] = (lp - lm) / (2.0 * step)
            stable_w[i, j] = np.array_equal(mp, mask0) and np.array_equal(mm, mask0)
    for i in range(k):
        b = params.bias.copy()
        b[i] += step
        lp, mp = probe(params.weights, b)
        b[i] -= 2.0 * step
        lm, mm = probe(params.weights, b)
        numeric_b[i] = (lp - lm) / (2.0 * step)
        stable_b[i] = np.array_equal(mp, mask0) and np.array_equal(mm, mask0)

    errs = np.concatenate([
        _rel_err(d_weights, numeric_w)[stable_w].ravel(),
        _rel_err(d_bias, numeric_b)[stable_b].ravel(),
    ])
    max_rel = float(errs.max()) if errs.size else 0.0
    return ControllerGradientReport(
        d_weights=d_weights,
        d_bias=d_bias,
        numeric_d_weights=numeric_w,
        numeric_d_bias=numeric_b,
        stable_weights=stable_w,
        stable_bias=stable_b,
        max_rel_err=max_rel,
    )


class Cue(NamedTuple):
    class_id: int
    y: int
    x: int
    score: float


@dataclass(frozen=True)
class PeakCueSet:
    """Instance presence cues: one point per suspected instance."""

    cues: tuple[Cue, ...]

    def __len__(self) -> int:
        return len(self.cues)

    def for_class(self, class_id: int) -> list[Cue]:
        return [c for c in self.cues if c.class_id == class_id]

    def to_json(self) -> dict:
        return {"cues": [{"class_id": c.class_id, "y": c.y, "x": c.x, "score": c.score}
                         for c in self.cues]}

    @classmethod
    def from_json(cls, payload: dict) -> "PeakCueSet":
        try:
            cues = tuple(
                Cue(int(e["class_id"]), int(e["y"]), int(e["x"]), float(e["score"]))
                for e in payload["cues"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed cue payload: {exc}") from exc
        return cls(cues=cues)


def extract_instance_cues(activations: ActivationStack,
                          cue_threshold: float = DEFAULT_CUE_THRESHOLD,
                          nms_kernel: int = DEFAULT_NMS_KERNEL) -> PeakCueSet:
    """Local maxima of per-channel max-normalized activations above a threshold.

    Channels whose max equals their min carry no localization evidence and
    yield no cues (on such a plateau every pixel would tie the window max).
    Cues come back sorted by (class, score descending, y, x).
    """
    if not (0.0 <= cue_threshold <= 1.0):
        raise ValidationError(f"cue_threshold must lie in [0, 1], got {cue_threshold}")
    cues: list[Cue] = []
    for k in range(activations.num_channels):
        plane = activations.channels[k]
        peak = plane.max()
        if peak <= 0.0 or plane.min() == peak:
            continue
        norm = plane / peak
        for y, x in _window_maxima(norm, cue_threshold, nms_kernel):
            cues.append(Cue(class_id=k + 1, y=y, x=x, score=float(norm[y, x])))
    cues.sort(key=lambda c: (c.class_id, -c.score, c.y, c.x))
    return PeakCueSet(cues=tuple(cues))
