"""Read-only analyses of trained students: layer error profiles, curvature,
loss-landscape slices and attention-map comparisons.

None of these functions modify the model passed in; anything that perturbs
weights works on a private copy.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import stats

from . import tensor as T
from .distill import distill_loss
from .errors import IndexOutOfRange, NonFiniteGradient, ShapeMismatch
from .model import TransformerModel, capture_teacher, forward
from .quant import QuantPlan, materialize

GradFn = Callable[[np.ndarray], np.ndarray]


# -- layer-wise error --------------------------------------------------------

@dataclass
class LayerMseProfile:
    """MSE between student and teacher hidden states; index 0 is the embedding output."""

    values: list[float]

    @property
    def spearman(self) -> float:
        """Rank correlation between layer index and MSE."""
        if len(set(self.values)) < 2:
            return 0.0
        return float(stats.spearmanr(np.arange(len(self.values)), self.values).statistic)

    def to_json(self) -> str:
        return json.dumps({"mse": self.values, "spearman": self.spearman}, indent=2) + "\n"


def layer_mse_profile(student: TransformerModel, teacher: TransformerModel,
                      batches: Iterable[np.ndarray], quant: QuantPlan | None = None,
                      granularity: str = "per_tensor") -> LayerMseProfile:
    """Per-layer MSE(X_student, X_teacher), averaged over batches.

    ``quant`` selects which student matrices run ternary; pass
    ``QuantPlan.full(L)`` to profile the deployed student.
    """
    if student.config.to_dict() != teacher.config.to_dict():
        raise ShapeMismatch("student and teacher configurations differ")
    sums, count = None, 0
    with T.no_grad():
        for tokens in batches:
            _, st = forward(student, tokens, quant=quant, granularity=granularity)
            _, tt = forward(teacher, tokens)
            m = np.array([np.mean((s.data.astype(np.float64) - t.data) ** 2)
                          for s, t in zip(st.x, tt.x)])
            sums = m if sums is None else sums + m
            count += 1
    if count == 0:
        raise ShapeMismatch("no batches given")
    return LayerMseProfile((sums / count).tolist())


# -- curvature ---------------------------------------------------------------

def hvp(grad_fn: GradFn, theta: np.ndarray, v: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Hessian-vector product from a central difference of gradients.

    The step is ``1e-3 / ||v||`` unless ``eps`` overrides it, so the probe
    moves theta by 1e-3 in parameter space whatever the scale of ``v``.
    """
    v = np.asarray(v, np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > 0:
        raise ValueError("hvp direction must be non-zero")
    h = 1e-3 / norm if eps is None else eps
    theta = np.asarray(theta, np.float64)
    g_plus = grad_fn(theta + h * v)
    g_minus = grad_fn(theta - h * v)
    out = (g_plus - g_minus) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise NonFiniteGradient("non-finite gradient while probing curvature")
    return out


@dataclass
class HessianReport:
    eigenvalue: float
    history: list[float] = field(default_factory=list)
    residual: float = math.inf
    converged: bool = False
    iters: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _power_iteration(matvec, dim: int, iters: int, tol: float, seed: int) -> HessianReport:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    history: list[float] = []
    lam, residual = 0.0, math.inf
    for k in range(iters):
        hv = matvec(v)
        lam = float(v @ hv)  # Rayleigh quotient, v has unit norm
        history.append(lam)
        if k > 0:
            residual = abs(lam - history[-2]) / max(abs(lam), 1e-30)
            if residual < tol:
                return HessianReport(lam, history, residual, True, k + 1)
        nrm = float(np.linalg.norm(hv))
        if nrm == 0:
            return HessianReport(0.0, history, 0.0, True, k + 1)
        v = hv / nrm
    return HessianReport(lam, history, residual, False, iters)


def top_eigenvalue(grad_fn: GradFn, theta: np.ndarray, iters: int = 50, tol: float = 1e-2,
                   seed: int = 0) -> HessianReport:
    """Largest-magnitude Hessian eigenvalue by power iteration on finite-difference HVPs.

    Stops once successive estimates differ by less than ``tol`` relative;
    otherwise returns the last estimate with ``converged=False``.
    """
    theta = np.asarray(theta, np.float64)
    return _power_iteration(lambda v: hvp(grad_fn, theta, v), theta.size, iters, tol, seed)


def most_negative_eigenvalue(grad_fn: GradFn, theta: np.ndarray, lam_max: float,
                             iters: int = 50, tol: float = 1e-2, seed: int = 0) -> HessianReport:
    """Power iteration on ``H - lam_max I``: recovers the opposite end of the spectrum
    when ``lam_max`` is the dominant positive eigenvalue."""
    theta = np.asarray(theta, np.float64)
    rep = _power_iteration(lambda v: hvp(grad_fn, theta, v) - lam_max * v,
                           theta.size, iters, tol, seed)
    rep.eigenvalue += lam_max
    rep.history = [h + lam_max for h in rep.history]
    return rep


def flatten(model: TransformerModel) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1).astype(np.float64) for p in model.parameters()])


def distill_grad_fn(student: TransformerModel, teacher: TransformerModel, tokens: np.ndarray,
                    quantized: bool = True, granularity: str = "per_tensor",
                    regression: bool = False) -> tuple[GradFn, np.ndarray]:
    """Gradient of the distillation loss as a function of the flat parameter vector.

    With ``quantized`` the student's six matrices per layer are frozen at
    their ternary reconstructions and the loss is differentiated at that point,
    which is the model that is actually deployed. Everything runs in float64.
    Returns ``(grad_fn, theta0)``.
    """
    plan = QuantPlan.full(student.config.L) if quantized else QuantPlan.none(student.config.L)
    work = materialize(student, plan, granularity).astype(np.float64).requires_grad_(True)
    trace = capture_teacher(teacher.astype(np.float64), tokens)
    params = work.parameters()
    shapes = [p.data.shape for p in params]
    sizes = [p.data.size for p in params]

    def grad_fn(theta: np.ndarray) -> np.ndarray:
        off = 0
        for p, shp, sz in zip(params, shapes, sizes):
            p.data = theta[off:off + sz].reshape(shp).copy()
            off += sz
        work.zero_grad()
        with T.Tape() as tape:
            _, st = forward(work, tokens)
            lb = distill_loss(st, trace, regression)
            tape.backward(lb.total_tensor)
        g = np.concatenate([(np.zeros(sz) if p.grad is None else p.grad.reshape(-1))
                            for p, sz in zip(params, sizes)])
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient in distillation loss")
        return g

    return grad_fn, flatten(work)


# -- loss landscape ----------------------------------------------------------

@dataclass
class LandscapeSlice:
    alphas: list[float]
    betas: list[float]
    losses: list[list[float]]  # losses[i][j] at (alphas[i], betas[j])
    meta: dict = field(default_factory=dict)

    def center(self) -> float:
        return self.losses[len(self.alphas) // 2][len(self.betas) // 2]

    def to_csv(self) -> str:
        lines = ["alpha,beta,loss"]
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                lines.append(f"{a!r},{b!r},{self.losses[i][j]!r}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def _filter_normalized(rng: np.random.Generator, w: np.ndarray) -> np.ndarray:
    d = rng.standard_normal(w.shape)
    if w.ndim < 2:
        return np.zeros_like(d)  # biases and norm parameters stay put
    return d * (np.linalg.norm(w) / np.linalg.norm(d))


def landscape_slice(model, loss_fn: Callable, grid_n: int = 11, seed: int = 0,
                    span: float = 1.0) -> LandscapeSlice:
    """Loss over theta + a*d1 + b*d2 for a, b on a ``grid_n`` x ``grid_n`` grid in [-span, span].

    ``model`` is a :class:`TransformerModel` (``loss_fn`` receives a perturbed
    copy) or a dict of arrays (``loss_fn`` receives a perturbed dict). Each
    direction is Gaussian, rescaled matrix by matrix to the norm of the
    weight it perturbs; 1-D parameters are left unperturbed.
    """
    if grid_n < 3 or grid_n % 2 == 0:
        raise ValueError("grid_n must be odd and >= 3")
    if isinstance(model, TransformerModel):
        work = model.clone()
        slots = work.named_parameters()
        names = [n for n, _ in slots]
        base = {n: t.data.copy() for n, t in slots}

        def assign(arrays):
            for n, t in slots:
                t.data = arrays[n]
    else:
        work = {k: np.array(v, dtype=np.float64) for k, v in model.items()}
        names = list(work)
        base = {k: v.copy() for k, v in work.items()}

        def assign(arrays):
            work.update(arrays)

    rng = np.random.default_rng(seed)
    d1 = {n: _filter_normalized(rng, base[n]) for n in names}
    d2 = {n: _filter_normalized(rng, base[n]) for n in names}
    grid = np.linspace(-span, span, grid_n)
    grid[grid_n // 2] = 0.0
    losses = []
    for a in grid:
        row = []
        for b in grid:
            if a == 0.0 and b == 0.0:
                arrays = {n: base[n].copy() for n in names}
            else:
                arrays = {n: (base[n] + a * d1[n] + b * d2[n]).astype(base[n].dtype)
                          for n in names}
            assign(arrays)
            row.append(float(loss_fn(work)))
        losses.append(row)
    meta = {"seed": seed, "span": span, "grid_n": grid_n,
            "normalization": "per-matrix", "perturbed": [n for n in names if base[n].ndim >= 2]}
    return LandscapeSlice(grid.tolist(), grid.tolist(), losses, meta)


# -- attention maps ----------------------------------------------------------

def _ranks(a: np.ndarray) -> np.ndarray:
    """Position of each key in its row's descending order; ties go to the lower index."""
    order = np.argsort(-a, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(a.shape[-1]), axis=-1)
    return ranks


def ranking_loss(sa_s: np.ndarray, sa_t: np.ndarray) -> float:
    """Mean normalized Kendall-tau distance between student and teacher attention rows.

    Inputs are (..., n, n) maps; every leading index and query row is one
    comparison. A row contributes the fraction of key pairs the two maps
    order differently.
    """
    sa_s, sa_t = np.asarray(sa_s), np.asarray(sa_t)
    if sa_s.shape != sa_t.shape:
        raise ShapeMismatch(f"attention maps {sa_s.shape} vs {sa_t.shape}")
    n = sa_s.shape[-1]
    if n < 2:
        return 0.0
    rs, rt = _ranks(sa_s), _ranks(sa_t)
    ds = np.sign(rs[..., :, None] - rs[..., None, :])
    dt = np.sign(rt[..., :, None] - rt[..., None, :])
    upper = np.triu(np.ones((n, n), bool), k=1)
    discordant = ((ds != dt) & upper).sum(axis=(-2, -1))
    return float(np.mean(discordant / (n * (n - 1) / 2)))


def model_ranking_loss(student: TransformerModel, teacher: TransformerModel, tokens: np.ndarray,
                       quant: QuantPlan | None = None, granularity: str = "per_tensor") -> float:
    """Ranking loss averaged over layers, batch, heads and queries."""
    with T.no_grad():
        _, st = forward(student, tokens, quant=quant, granularity=granularity)
        _, tt = forward(teacher, tokens)
    return float(np.mean([ranking_loss(s.data, t.data) for s, t in zip(st.sa, tt.sa)]))


@dataclass
class AttentionDump:
    layer: int
    head: int
    tokens: list[int]
    map: list[float]  # row-major n x n

    def matrix(self) -> np.ndarray:
        n = len(self.tokens)
        return np.asarray(self.map, dtype=np.float32).reshape(n, n)

    def to_json(self) -> str:
        return json.dumps(asdict(self)) + "\n"


def dump_attention(model: TransformerModel, tokens, layer: int, head: int,
                   quant: QuantPlan | None = None, granularity: str = "per_tensor") -> AttentionDump:
    """Attention map of one head for a single sequence."""
    cfg = model.config
    if not 0 <= layer < cfg.L:
        raise IndexOutOfRange(f"layer {layer} outside [0, {cfg.L})")
    if not 0 <= head < cfg.H:
        raise IndexOutOfRange(f"head {head} outside [0, {cfg.H})")
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    with T.no_grad():
        _, tr = forward(model, ids, quant=quant, granularity=granularity)
    m = tr.sa[layer].data[0, head]
    return AttentionDump(layer, head, ids.tolist(), m.reshape(-1).tolist())
