"""TWN-style ternary weight quantization with an identity straight-through estimator."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import NonFiniteInput, PlanMismatch
from .tensor import Tensor, as_tensor, make_op

THRESHOLD_RATIO = 0.7

MATRICES = ("W_Q", "W_K", "W_V", "W_O", "W_1", "W_2")
GROUPS = {
    "GEN": ("W_Q", "W_K"),
    "PROP": ("W_V", "W_O"),
    "FFN": ("W_1", "W_2"),
}
GRANULARITIES = ("per_tensor", "per_row")


@dataclass(frozen=True)
class TernaryWeight:
    codes: np.ndarray  # int8 in {-1, 0, 1}
    scale: np.ndarray  # scalar, or one value per row for per_row granularity

    def reconstruct(self) -> np.ndarray:
        s = self.scale if self.scale.ndim == 0 else self.scale[:, None]
        return (s * self.codes).astype(np.float32)


def _ternarize_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # a: (rows, k); threshold and scale per row
    absw = np.abs(a)
    delta = THRESHOLD_RATIO * absw.mean(axis=1, keepdims=True)
    mask = absw > delta
    count = mask.sum(axis=1)
    total = np.where(mask, absw, 0).sum(axis=1)
    scale = np.where(count > 0, total / np.maximum(count, 1), 0).astype(a.dtype)
    codes = (np.sign(a) * mask).astype(np.int8)
    return codes, scale


def ternarize(w, granularity: str = "per_tensor") -> TernaryWeight:
    """Threshold at 0.7 * mean|w|; the scale is the mean magnitude of the survivors.

    For fixed codes c the scale minimising ||w - s c|| is (w.c)/(c.c), which
    for sign codes is exactly the mean |w| over the non-zero positions.
    """
    w = as_tensor(w).data
    if not np.all(np.isfinite(w)):
        raise NonFiniteInput("ternarize: weight contains NaN or Inf")
    if granularity == "per_tensor":
        codes, scale = _ternarize_rows(w.reshape(1, -1))
        return TernaryWeight(codes.reshape(w.shape), scale.reshape(()))
    if granularity == "per_row":
        if w.ndim != 2:
            raise ValueError("per_row granularity needs a matrix")
        codes, scale = _ternarize_rows(w)
        return TernaryWeight(codes, scale)
    raise ValueError(f"unknown granularity {granularity!r}")


def ste_forward(w: Tensor, granularity: str = "per_tensor") -> Tensor:
    """Forward: ternary reconstruction. Backward: gradient passed through unchanged."""
    tw = ternarize(w, granularity)
    value = tw.reconstruct().astype(w.dtype)
    return make_op(value, (w,), lambda g: (g,))


def least_squares_scale(w: np.ndarray, codes: np.ndarray) -> float:
    c = codes.astype(np.float64).ravel()
    denom = c @ c
    return 0.0 if denom == 0 else float(np.asarray(w, np.float64).ravel() @ c / denom)


@dataclass(frozen=True)
class QuantPlan:
    """Which of the six per-layer matrices run through the quantizer."""

    layers: tuple[frozenset[str], ...]

    def __post_init__(self):
        for i, s in enumerate(self.layers):
            bad = set(s) - set(MATRICES)
            if bad:
                raise PlanMismatch(f"layer {i}: unknown matrices {sorted(bad)}")

    @classmethod
    def none(cls, num_layers: int) -> QuantPlan:
        return cls(tuple(frozenset() for _ in range(num_layers)))

    @classmethod
    def full(cls, num_layers: int) -> QuantPlan:
        return cls(tuple(frozenset(MATRICES) for _ in range(num_layers)))

    @classmethod
    def from_groups(cls, num_layers: int, groups: Iterable[str]) -> QuantPlan:
        mats = frozenset(m for g in groups for m in GROUPS[g])
        return cls(tuple(mats for _ in range(num_layers)))

    def __len__(self) -> int:
        return len(self.layers)

    def quantized(self, layer: int, matrix: str) -> bool:
        return matrix in self.layers[layer]

    def groups(self, layer: int) -> dict[str, bool]:
        """Per sub-layer group: True if every matrix of the group is quantized."""
        s = self.layers[layer]
        return {g: all(m in s for m in mats) for g, mats in GROUPS.items()}

    def to_json(self) -> list[list[str]]:
        return [sorted(s) for s in self.layers]

    @classmethod
    def from_json(cls, obj) -> QuantPlan:
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(tuple(frozenset(x) for x in obj))


def apply_plan(model, plan: QuantPlan, granularity: str = "per_tensor"):
    """Bind ``plan`` to ``model``; the returned callable runs the quantized forward."""
    from .model import forward  # local import: model imports this module

    if len(plan) != model.config.L:
        raise PlanMismatch(f"plan covers {len(plan)} layers, model has {model.config.L}")

    def view(tokens, ti=None):
        return forward(model, tokens, quant=plan, ti=ti, granularity=granularity)

    view.plan = plan
    view.model = model
    return view


def materialize(model, plan: QuantPlan, granularity: str = "per_tensor"):
    """Copy of ``model`` whose flagged matrices hold their ternary reconstruction."""
    if len(plan) != model.config.L:
        raise PlanMismatch(f"plan covers {len(plan)} layers, model has {model.config.L}")
    out = model.clone()
    for i, lw in enumerate(out.layers):
        for m in plan.layers[i]:
            t = getattr(lw, m)
            t.data = ternarize(t, granularity).reconstruct().astype(t.dtype)
    return out
