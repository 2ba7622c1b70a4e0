"""Central finite-difference checks of tape gradients.

Checks run in float64: with eps=1e-3 the f32 rounding noise in the difference
quotient is of the same order as the tolerance, so f32 would test the
arithmetic rather than the derivative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .distill import distill_loss
from .model import ModelConfig, TransformerModel, capture_teacher, forward, init_model

FD_EPS = 1e-3
REL_TOL = 1e-3
FLOOR = 1e-6


@dataclass
class GradCheck:
    name: str
    max_rel_err: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < REL_TOL


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / (|n| + 1e-6) over elements."""
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + FLOOR)))


def check(name: str, fn: Callable[..., T.Tensor], inputs: Sequence[T.Tensor],
          eps: float = FD_EPS) -> GradCheck:
    """Compare the tape gradient of scalar ``fn(*inputs)`` with central differences."""
    for x in inputs:
        x.grad = None
    with T.Tape() as tape:
        tape.backward(fn(*inputs))
    worst, count = 0.0, 0
    for x in inputs:
        if not x.requires_grad:
            continue
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        numeric = np.zeros_like(x.data)
        with T.no_grad():
            for i in np.ndindex(x.shape):
                orig = x.data[i]
                x.data[i] = orig + eps
                up = float(fn(*inputs).data)
                x.data[i] = orig - eps
                down = float(fn(*inputs).data)
                x.data[i] = orig
                numeric[i] = (up - down) / (2 * eps)
        worst = max(worst, rel_err(analytic, numeric))
        count += x.data.size
    return GradCheck(name, worst, count)


def _param(rng: np.random.Generator, shape) -> T.Tensor:
    return T.Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _projector(rng: np.random.Generator):
    """Reduce any output to a scalar with fixed random weights, so every element matters."""
    cache: dict[tuple, T.Tensor] = {}

    def proj(y: T.Tensor) -> T.Tensor:
        if y.shape not in cache:
            cache[y.shape] = T.Tensor(rng.standard_normal(y.shape), dtype=np.float64)
        return T.sum_all(T.mul(y, cache[y.shape]))

    return proj


def primitive_checks(seed: int) -> list[GradCheck]:
    """One finite-difference check per autodiff primitive."""
    rng = np.random.default_rng(seed)
    p = _projector(rng)
    P = lambda *s: _param(rng, s)  # noqa: E731
    ids = rng.integers(0, 3, size=(2, 3))
    probs = T.Tensor(T.softmax_np(rng.standard_normal((3, 4))), dtype=np.float64)
    cases = [
        ("matmul", lambda a, b: p(T.matmul(a, b)), [P(3, 4), P(4, 2)]),
        ("matmul_batched", lambda a, b: p(T.matmul(a, b)), [P(2, 2, 3, 4), P(2, 2, 4, 3)]),
        ("matmul_3d_2d", lambda a, b: p(T.matmul(a, b)), [P(2, 3, 4), P(4, 2)]),
        ("linear", lambda x, w, b: p(T.linear(x, w, b)), [P(2, 3, 4), P(4, 5), P(5)]),
        ("add", lambda a, b: p(T.add(a, b)), [P(2, 3, 4), P(4)]),
        ("sub", lambda a, b: p(T.sub(a, b)), [P(2, 3), P(2, 3)]),
        ("mul", lambda a, b: p(T.mul(a, b)), [P(2, 3, 4), P(3, 4)]),
        ("scale", lambda a: p(T.scale(a, 0.37)), [P(3, 4)]),
        ("gelu", lambda a: p(T.gelu(a)), [P(2, 3, 4)]),
        ("softmax_rows", lambda a: p(T.softmax_rows(a)), [P(2, 3, 4)]),
        ("log_softmax_rows", lambda a: p(T.log_softmax_rows(a)), [P(2, 5)]),
        ("layernorm", lambda a, g, b: p(T.layernorm(a, g, b)), [P(2, 3, 4), P(4), P(4)]),
        ("reshape", lambda a: p(T.reshape(a, (4, 3))), [P(3, 4)]),
        ("transpose", lambda a: p(T.transpose(a)), [P(2, 3, 4)]),
        ("split_heads", lambda a: p(T.split_heads(a, 2)), [P(2, 3, 4)]),
        ("merge_heads", lambda a: p(T.merge_heads(a)), [P(2, 2, 3, 4)]),
        ("concat_last_dim", lambda a, b: p(T.concat_last_dim([a, b])), [P(2, 3), P(2, 4)]),
        ("take_token", lambda a: p(T.take_token(a, 0)), [P(2, 3, 4)]),
        ("embedding_lookup", lambda a: p(T.embedding_lookup(a, ids)), [P(3, 4)]),
        ("sum_all", lambda a: T.sum_all(a), [P(3, 4)]),
        ("mean", lambda a: T.mean(a), [P(3, 4)]),
        ("mse", lambda a, b: T.mse(a, b), [P(2, 3, 4), P(2, 3, 4)]),
        ("soft_cross_entropy", lambda a: T.soft_cross_entropy(a, probs), [P(3, 4)]),
    ]
    return [check(name, fn, inputs) for name, fn, inputs in cases]


TINY = ModelConfig(vocab=6, num_classes=3, L=1, d=8, H=2, d_ff=12, n=6)


def model_check(seed: int, config: ModelConfig = TINY, batch: int = 3) -> GradCheck:
    """Every parameter of a one-layer model under the full distillation loss
    (hidden-state, score, prediction and attention-output terms plus a label term)."""
    rng = np.random.default_rng(seed)
    student = init_model(config, seed).astype(np.float64).requires_grad_(True)
    teacher: TransformerModel = init_model(config, seed + 100).astype(np.float64)
    tokens = rng.integers(0, config.vocab, size=(batch, config.n))
    labels = rng.integers(0, config.num_classes, size=batch)
    trace = capture_teacher(teacher, tokens)

    def loss(*_params):
        _, st = forward(student, tokens)
        lb = distill_loss(st, trace, output_loss_active=True, labels=labels)
        return lb.total_tensor

    return check(f"model_L{config.L}", loss, student.parameters())
