"""Post-LN Transformer encoder with trace capture and teacher-intervention hooks."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import SequenceTooLong, ShapeMismatch
from .quant import QuantPlan, ste_forward
from .tensor import Tensor

ATTN_SCALES = ("sqrt_d", "sqrt_dh")


@dataclass
class ModelConfig:
    vocab: int
    num_classes: int | None = 2  # None -> scalar regression head
    L: int = 4
    d: int = 32
    H: int = 4
    d_ff: int = 64
    n: int = 16
    attn_scale: str = "sqrt_d"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab", "L", "d", "H", "d_ff", "n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.H:
            raise ValueError(f"d={self.d} is not divisible by H={self.H}")
        if self.num_classes is not None and self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.attn_scale not in ATTN_SCALES:
            raise ValueError(f"attn_scale must be one of {ATTN_SCALES}")

    @property
    def d_h(self) -> int:
        return self.d // self.H

    @property
    def out_dim(self) -> int:
        return 1 if self.num_classes is None else self.num_classes

    @property
    def score_divisor(self) -> float:
        return math.sqrt(self.d if self.attn_scale == "sqrt_d" else self.d_h)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LayerWeights:
    W_Q: Tensor
    b_Q: Tensor
    W_K: Tensor
    b_K: Tensor
    W_V: Tensor
    b_V: Tensor
    W_O: Tensor
    b_O: Tensor
    W_1: Tensor
    b_1: Tensor
    W_2: Tensor
    b_2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    def named(self) -> list[tuple[str, Tensor]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class TransformerModel:
    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    layers: list[LayerWeights]
    head_w: Tensor
    head_b: Tensor

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("token_embedding", self.token_embedding),
               ("position_embedding", self.position_embedding)]
        for i, lw in enumerate(self.layers):
            out += [(f"layers.{i}.{k}", t) for k, t in lw.named()]
        out += [("head_w", self.head_w), ("head_b", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self) -> TransformerModel:
        out = copy.deepcopy(self)
        out.zero_grad()
        return out

    def astype(self, dtype) -> TransformerModel:
        out = self.clone()
        for t in out.parameters():
            t.data = t.data.astype(dtype)
        return out

    def requires_grad_(self, flag: bool = True) -> TransformerModel:
        for t in self.parameters():
            t.requires_grad = flag
        return self


def init_model(config: ModelConfig, seed: int = 0) -> TransformerModel:
    """Gaussian init with std 1/sqrt(fan_in) for matrices, unit std for embeddings."""
    rng = np.random.default_rng(seed)
    d, dff = config.d, config.d_ff

    def mat(rows, cols):
        w = rng.standard_normal((rows, cols)) / math.sqrt(rows)
        return Tensor(w.astype(np.float32), requires_grad=True)

    def vec(size, value=0.0):
        return Tensor(np.full(size, value, np.float32), requires_grad=True)

    layers = [
        LayerWeights(
            W_Q=mat(d, d), b_Q=vec(d), W_K=mat(d, d), b_K=vec(d),
            W_V=mat(d, d), b_V=vec(d), W_O=mat(d, d), b_O=vec(d),
            W_1=mat(d, dff), b_1=vec(dff), W_2=mat(dff, d), b_2=vec(d),
            ln1_gamma=vec(d, 1.0), ln1_beta=vec(d), ln2_gamma=vec(d, 1.0), ln2_beta=vec(d),
        )
        for _ in range(config.L)
    ]
    emb = lambda rows: Tensor(rng.standard_normal((rows, d)).astype(np.float32),  # noqa: E731
                              requires_grad=True)
    return TransformerModel(config, emb(config.vocab), emb(config.n), layers,
                            mat(d, config.out_dim), vec(config.out_dim))


@dataclass
class LayerTrace:
    """Signals captured during one forward pass (batched: leading axis is B).

    ``x[0]`` is the embedding output and ``x[l + 1]`` the output of layer l.
    ``sa`` is the map the layer computed itself; ``sa_used`` the map that
    actually multiplied V (differs only under map intervention).
    """

    x: list[Tensor] = field(default_factory=list)
    q: list[Tensor] = field(default_factory=list)
    k: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)
    scores: list[Tensor] = field(default_factory=list)  # AS, (B, H, n, n)
    sa: list[Tensor] = field(default_factory=list)
    sa_used: list[Tensor] = field(default_factory=list)
    ac: list[Tensor] = field(default_factory=list)
    ao: list[Tensor] = field(default_factory=list)
    y: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.ao)

    def take(self, idx) -> LayerTrace:
        """Sub-batch view; used to slice a cached teacher trace."""
        pick = lambda ts: [Tensor(t.data[idx]) for t in ts]  # noqa: E731
        return LayerTrace(
            pick(self.x), pick(self.q), pick(self.k), pick(self.v), pick(self.scores),
            pick(self.sa), pick(self.sa_used), pick(self.ac), pick(self.ao), pick(self.y),
            None if self.logits is None else Tensor(self.logits.data[idx]),
        )


@dataclass
class InterventionInputs:
    """Teacher signals substituted into the student, per layer (None = no substitution)."""

    ao: list[np.ndarray | None]
    sa: list[np.ndarray | None]

    @classmethod
    def empty(cls, num_layers: int) -> InterventionInputs:
        return cls([None] * num_layers, [None] * num_layers)

    @classmethod
    def from_trace(cls, trace: LayerTrace, replace_ao: bool = False,
                   replace_sa: bool = False, layers=None) -> InterventionInputs:
        L = trace.num_layers
        chosen = set(range(L)) if layers is None else set(layers)
        ao = [trace.ao[l].data if replace_ao and l in chosen else None for l in range(L)]
        sa = [trace.sa[l].data if replace_sa and l in chosen else None for l in range(L)]
        return cls(ao, sa)


def _as_batch(tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2:
        raise ShapeMismatch(f"tokens must be (n,) or (B, n), got {t.shape}")
    return t


def forward(model: TransformerModel, tokens, quant: QuantPlan | None = None,
            ti: InterventionInputs | None = None,
            granularity: str = "per_tensor") -> tuple[Tensor, LayerTrace]:
    cfg = model.config
    ids = _as_batch(tokens)
    B, n = ids.shape
    if n > cfg.n:
        raise SequenceTooLong(f"sequence of length {n} exceeds model maximum {cfg.n}")
    if quant is not None and len(quant) != cfg.L:
        raise ShapeMismatch(f"quant plan covers {len(quant)} layers, model has {cfg.L}")
    if ti is not None and (len(ti.ao) != cfg.L or len(ti.sa) != cfg.L):
        raise ShapeMismatch("intervention inputs must list every layer")

    tr = LayerTrace()
    pos = model.position_embedding
    if n < cfg.n:
        pos = T.embedding_lookup(pos, np.arange(n))
    x = T.add(T.embedding_lookup(model.token_embedding, ids), pos)
    tr.x.append(x)
    inv_scale = 1.0 / cfg.score_divisor

    for l, lw in enumerate(model.layers):
        flags = quant.layers[l] if quant is not None else frozenset()
        w = lambda name: ste_forward(getattr(lw, name), granularity) if name in flags else getattr(lw, name)  # noqa: E731,B023

        q = T.linear(x, w("W_Q"), lw.b_Q)
        k = T.linear(x, w("W_K"), lw.b_K)
        v = T.linear(x, w("W_V"), lw.b_V)
        qh, kh, vh = (T.split_heads(t, cfg.H) for t in (q, k, v))
        scores = T.matmul(qh, T.transpose(kh))
        sa = T.softmax_rows(T.scale(scores, inv_scale))

        sa_used = sa
        if ti is not None and ti.sa[l] is not None:
            if ti.sa[l].shape != sa.shape:
                raise ShapeMismatch(f"layer {l}: teacher map {ti.sa[l].shape} vs {sa.shape}")
            sa_used = Tensor(ti.sa[l])
        ac = T.merge_heads(T.matmul(sa_used, vh))
        ao = T.linear(ac, w("W_O"), lw.b_O)

        resid = ao
        if ti is not None and ti.ao[l] is not None:
            if ti.ao[l].shape != ao.shape:
                raise ShapeMismatch(f"layer {l}: teacher AO {ti.ao[l].shape} vs {ao.shape}")
            resid = Tensor(ti.ao[l])
        y = T.layernorm(T.add(x, resid), lw.ln1_gamma, lw.ln1_beta, cfg.ln_eps)
        h = T.gelu(T.linear(y, w("W_1"), lw.b_1))
        f = T.linear(h, w("W_2"), lw.b_2)
        x = T.layernorm(T.add(y, f), lw.ln2_gamma, lw.ln2_beta, cfg.ln_eps)

        tr.q.append(q)
        tr.k.append(k)
        tr.v.append(v)
        tr.scores.append(scores)
        tr.sa.append(sa)
        tr.sa_used.append(sa_used)
        tr.ac.append(ac)
        tr.ao.append(ao)
        tr.y.append(y)
        tr.x.append(x)

    logits = T.linear(T.take_token(x, 0), model.head_w, model.head_b)
    tr.logits = logits
    return logits, tr


def capture_teacher(teacher: TransformerModel, tokens) -> LayerTrace:
    """Full-precision forward with recording disabled; the trace holds constants."""
    with T.no_grad():
        _, trace = forward(teacher, tokens)
    return trace


def effective_weights(lw: LayerWeights, flags=frozenset(), granularity: str = "per_tensor") -> dict:
    """Numpy view of one layer's weights as the forward pass sees them."""
    from .quant import ternarize

    out = {}
    for name, t in lw.named():
        out[name] = ternarize(t, granularity).reconstruct() if name in flags else t.data
    return out


def mha_tokenwise(trace: LayerTrace, layer: int, weights: dict, X: np.ndarray,
                  num_heads: int) -> np.ndarray:
    """Attention output rebuilt token by token as sum_j alpha_ij f_h(X_j) + b_O.

    ``f_h(x) = (x W^V_h + b^V_h) W^O_h`` where W^O_h are the rows of W^O that
    read head h. Written with explicit loops so it shares no code with
    :func:`forward`. Shapes: X (B, n, d), result (B, n, d).
    """
    alpha = trace.sa_used[layer].data
    X = np.asarray(X, dtype=np.float64)
    B, n, d = X.shape
    if alpha.shape != (B, num_heads, n, n):
        raise ShapeMismatch(f"map shape {alpha.shape} does not match X {X.shape}")
    dh = d // num_heads
    WV, bV, WO, bO = (np.asarray(weights[k], np.float64) for k in ("W_V", "b_V", "W_O", "b_O"))
    out = np.zeros((B, n, d))
    for b in range(B):
        for h in range(num_heads):
            cols = slice(h * dh, (h + 1) * dh)
            f = (X[b] @ WV[:, cols] + bV[cols]) @ WO[cols, :]  # f_h for every token j
            for i in range(n):
                for j in range(n):
                    out[b, i] += alpha[b, h, i, j] * f[j]
        out[b] += bO
    return out
