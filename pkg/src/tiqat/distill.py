"""Distillation losses between a student trace and a (constant) teacher trace."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .model import LayerTrace
from .tensor import Tensor


@dataclass
class LossBreakdown:
    l_trm: float
    l_pred: float
    l_output: float
    total: float
    per_layer_x_mse: list[float] = field(default_factory=list)
    per_layer_as_mse: list[float] = field(default_factory=list)
    per_layer_ao_mse: list[float] = field(default_factory=list)
    l_label: float = 0.0
    total_tensor: Tensor | None = field(default=None, repr=False, compare=False)


def _const(t: Tensor) -> Tensor:
    return Tensor(t.data)


def _check_same(student: LayerTrace, teacher: LayerTrace) -> None:
    if len(student.x) != len(teacher.x) or student.num_layers != teacher.num_layers:
        raise ShapeMismatch("student and teacher traces have different depth")


def _sum(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def loss_trm(student: LayerTrace, teacher: LayerTrace) -> tuple[Tensor, list[float], list[float]]:
    """Sum of MSE over the L+1 hidden states plus MSE over the L pre-softmax score tensors.

    Score MSE is a plain mean over (batch, head, query, key), i.e. a uniform
    average over heads.
    """
    _check_same(student, teacher)
    xs = [T.mse(s, _const(t)) for s, t in zip(student.x, teacher.x)]
    ss = [T.mse(s, _const(t)) for s, t in zip(student.scores, teacher.scores)]
    return _sum(xs + ss), [float(t.data) for t in xs], [float(t.data) for t in ss]


def loss_pred(student_logits: Tensor, teacher_logits: Tensor | np.ndarray,
              regression: bool = False) -> Tensor:
    """Soft cross-entropy against the teacher's softmax; MSE on outputs for regression."""
    tl = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if student_logits.shape != tl.shape:
        raise ShapeMismatch(f"logits {student_logits.shape} vs teacher {tl.shape}")
    if regression:
        return T.mse(student_logits, Tensor(tl))
    return T.soft_cross_entropy(student_logits, Tensor(T.softmax_np(tl)))


def loss_output(student: LayerTrace, teacher: LayerTrace) -> tuple[Tensor, list[float]]:
    """Sum over layers of MSE between student and teacher attention outputs."""
    _check_same(student, teacher)
    terms = [T.mse(s, _const(t)) for s, t in zip(student.ao, teacher.ao)]
    return _sum(terms), [float(t.data) for t in terms]


def label_loss(logits: Tensor, labels: np.ndarray, regression: bool) -> Tensor:
    if regression:
        return T.mse(logits, Tensor(np.asarray(labels, logits.dtype).reshape(logits.shape)))
    onehot = np.eye(logits.shape[-1], dtype=logits.dtype)[np.asarray(labels)]
    return T.soft_cross_entropy(logits, Tensor(onehot))


def distill_loss(student: LayerTrace, teacher: LayerTrace, regression: bool = False,
                 output_loss_active: bool = False, lambda_out: float = 1.0,
                 labels: np.ndarray | None = None, lambda_label: float = 1.0) -> LossBreakdown:
    """total = l_trm + l_pred + lambda_out * l_output (+ optional label loss)."""
    trm, x_mse, as_mse = loss_trm(student, teacher)
    pred = loss_pred(student.logits, teacher.logits, regression)
    total = T.add(trm, pred)
    ao_mse = [float(np.mean((s.data - t.data) ** 2)) for s, t in zip(student.ao, teacher.ao)]
    l_output = 0.0
    if output_loss_active:
        out, ao_mse = loss_output(student, teacher)
        l_output = float(out.data)
        total = T.add(total, T.scale(out, lambda_out))
    l_label = 0.0
    if labels is not None:
        lab = label_loss(student.logits, labels, regression)
        l_label = float(lab.data)
        total = T.add(total, T.scale(lab, lambda_label))
    return LossBreakdown(float(trm.data), float(pred.data), l_output, float(total.data),
                         x_mse, as_mse, ao_mse, l_label, total)
