"""Teacher fine-tuning and scheduled quantization-aware training.

Both loops update latent full-precision weights with Adam under a
linear-warmup / linear-decay learning rate. During QAT the forward pass sees
ternary reconstructions of the weights the iteration plan flags, and the
gradient reaches the latent weights through the straight-through estimator.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, config as C
from . import data as D
from . import tensor as T
from .distill import LossBreakdown, distill_loss, label_loss
from .errors import CheckpointMismatch, DatasetMissing, NonFiniteLoss
from .model import (InterventionInputs, LayerTrace, ModelConfig, TransformerModel,
                    capture_teacher, forward, init_model)
from .quant import QuantPlan
from .schedule import CASE_MODES, IterationPlan, plan_for

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "lr", "total", "l_trm", "l_pred", "l_output",
                  "train_metric", "eval_metric", "phase")
EVAL_CHUNK = 128
TRAIN_METRIC_CAP = 512  # train_metric is scored on this many leading train examples


# -- optimisation ------------------------------------------------------------

def lr_at(it: int, total_iters: int, peak_lr: float, warmup_frac: float = 0.1,
          end_lr_ratio: float = 1e-3) -> float:
    """Linear warmup to ``peak_lr`` then linear decay to ``peak_lr * end_lr_ratio``."""
    warmup = int(round(warmup_frac * total_iters))
    if it < warmup:
        return peak_lr * (it + 1) / warmup
    end_lr = peak_lr * end_lr_ratio
    span = max(total_iters - 1 - warmup, 1)
    frac = min((it - warmup) / span, 1.0)
    return peak_lr + (end_lr - peak_lr) * frac


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter position."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[T.Tensor], lr: float) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def _batches(n_items: int, batch_size: int, seed: int):
    """Endless stream of index batches: reshuffle each epoch, drop the ragged tail."""
    rng = np.random.default_rng(seed)
    bs = min(batch_size, n_items)
    while True:
        perm = rng.permutation(n_items)
        for start in range(0, n_items - bs + 1, bs):
            yield perm[start:start + bs]


# -- evaluation --------------------------------------------------------------

def task_metric(outputs: np.ndarray, labels: np.ndarray, regression: bool) -> float:
    """Accuracy for classification, Pearson correlation for regression."""
    if regression:
        pred = outputs.reshape(-1).astype(np.float64)
        y = np.asarray(labels, np.float64)
        if pred.std() == 0 or y.std() == 0:
            return 0.0
        return float(np.corrcoef(pred, y)[0, 1])
    return float(np.mean(outputs.argmax(axis=-1) == np.asarray(labels)))


def predict(model: TransformerModel, x: np.ndarray, quant: QuantPlan | None = None,
            ti_trace: LayerTrace | None = None, plan: IterationPlan | None = None,
            granularity: str = "per_tensor") -> np.ndarray:
    outs = []
    with T.no_grad():
        for start in range(0, len(x), EVAL_CHUNK):
            idx = slice(start, start + EVAL_CHUNK)
            ti = None
            if ti_trace is not None and plan is not None:
                ti = InterventionInputs.from_trace(ti_trace.take(idx), plan.replace_AO, plan.replace_SA)
            logits, _ = forward(model, x[idx], quant=quant, ti=ti, granularity=granularity)
            outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def evaluate(model: TransformerModel, dataset: D.Dataset, quantized: bool = False,
             split: str = "dev", granularity: str = "per_tensor") -> dict:
    """Deterministic task metric; ``quantized`` runs all six matrices ternary (deployment)."""
    if dataset.vocab > model.config.vocab or dataset.out_dim != model.config.out_dim:
        raise CheckpointMismatch("model head/vocabulary do not match the dataset")
    x, y = dataset.split(split)
    quant = QuantPlan.full(model.config.L) if quantized else None
    out = predict(model, x, quant, granularity=granularity)
    result = {"metric": task_metric(out, y, dataset.is_regression), "n": int(len(y))}
    if dataset.is_regression:
        result["pearson"] = result["metric"]
        result["mse"] = float(np.mean((out.reshape(-1) - y) ** 2))
    else:
        result["accuracy"] = result["metric"]
    return result


# -- helpers -----------------------------------------------------------------

def load_dataset(cfg: C.RunConfig, n_train: int | None = None) -> D.Dataset:
    if cfg.data.path:
        path = Path(cfg.data.path)
        if not path.exists():
            raise DatasetMissing(f"dataset file {path} not found")
        return D.load(path)
    if cfg.data.task not in D.TASKS:
        raise DatasetMissing(f"unknown task {cfg.data.task!r}")
    n_train = cfg.data.n_train if n_train is None else n_train
    return D.generate(cfg.data.task, cfg.data.seed, n_train, cfg.data.n_dev, cfg.model.n)


def teacher_dataset(cfg: C.RunConfig) -> D.Dataset:
    """The teacher's training pool; the QAT train split is its leading prefix."""
    return load_dataset(cfg, max(cfg.teacher.pool, cfg.data.n_train))


def model_config(cfg: C.RunConfig, dataset: D.Dataset) -> ModelConfig:
    m = cfg.model
    return ModelConfig(vocab=dataset.vocab, num_classes=dataset.num_classes, L=m.L, d=m.d,
                       H=m.H, d_ff=m.d_ff, n=m.n, attn_scale=m.attn_scale)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        row = {}
        for k, v in r.items():
            if k == "phase":
                row[k] = v
            elif k == "iter":
                row[k] = int(v)
            else:
                row[k] = float(v) if v != "" else None
        out.append(row)
    return out


def _check_finite(value: float, it: int, what: str, extra: dict | None = None) -> None:
    if not math.isfinite(value):
        diag = {"iter": it, "what": what, **(extra or {})}
        raise NonFiniteLoss(f"non-finite {what} at iteration {it}", diag)


@dataclass
class RunResult:
    model: TransformerModel
    rows: list[dict]
    final: dict
    config: C.RunConfig

    @property
    def final_metric(self) -> float:
        return self.final["metric"]


def write_run(result: RunResult, out_dir: str | Path, ternary: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    C.save(result.config, out / "config.json")
    (out / "metrics.csv").write_text(metrics_csv(result.rows))
    plan = QuantPlan.full(result.model.config.L) if ternary else None
    checkpoint.save_checkpoint(result.model, out / "checkpoint", plan, result.config.quant.granularity)
    return out


# -- teacher -----------------------------------------------------------------

def train_teacher(cfg: C.RunConfig, dataset: D.Dataset | None = None) -> RunResult:
    """Full-precision fine-tuning on task labels for a fixed number of iterations."""
    dataset = teacher_dataset(cfg) if dataset is None else dataset
    mcfg = model_config(cfg, dataset)
    model = init_model(mcfg, seed=cfg.seed)
    params = model.parameters()
    tc, oc = cfg.teacher, cfg.optim
    opt = OptimizerState(oc.beta1, oc.beta2, oc.eps, oc.max_grad_norm)
    batches = _batches(len(dataset.train_y), tc.batch_size, cfg.seed)
    reg = dataset.is_regression
    rows: list[dict] = []

    def eval_row(it, lr=None, loss=None):
        rows.append({
            "iter": it, "lr": lr, "total": loss, "l_trm": 0.0 if loss is not None else None,
            "l_pred": loss, "l_output": 0.0 if loss is not None else None,
            "train_metric": task_metric(predict(model, dataset.train_x[:TRAIN_METRIC_CAP]),
                                        dataset.train_y[:TRAIN_METRIC_CAP], reg),
            "eval_metric": task_metric(predict(model, dataset.dev_x), dataset.dev_y, reg),
            "phase": "teacher",
        })

    eval_row(0)
    for it in range(tc.iters):
        idx = next(batches)
        lr = lr_at(it, tc.iters, tc.peak_lr, oc.warmup_frac, oc.end_lr_ratio)
        model.zero_grad()
        with T.Tape() as tape:
            logits, _ = forward(model, dataset.train_x[idx])
            loss = label_loss(logits, dataset.train_y[idx], reg)
            _check_finite(float(loss.data), it, "teacher loss")
            tape.backward(loss)
        opt.step(params, lr)
        if (it + 1) % tc.eval_every == 0 or it + 1 == tc.iters:
            eval_row(it + 1, lr, float(loss.data))
    final = evaluate(model, dataset)
    return RunResult(model, rows, final, cfg)


# -- QAT ---------------------------------------------------------------------

def teacher_traces(teacher: TransformerModel, x: np.ndarray) -> LayerTrace:
    """Teacher trace for a whole split, computed in chunks and concatenated."""
    parts = [capture_teacher(teacher, x[s:s + EVAL_CHUNK]) for s in range(0, len(x), EVAL_CHUNK)]
    if len(parts) == 1:
        return parts[0]
    cat = lambda name: [T.Tensor(np.concatenate([getattr(p, name)[l].data for p in parts]))  # noqa: E731
                        for l in range(len(getattr(parts[0], name)))]
    return LayerTrace(cat("x"), cat("q"), cat("k"), cat("v"), cat("scores"), cat("sa"),
                      cat("sa_used"), cat("ac"), cat("ao"), cat("y"),
                      T.Tensor(np.concatenate([p.logits.data for p in parts])))


def qat_eval_condition(cfg: C.RunConfig, it: int) -> IterationPlan | None:
    """Controlled cases are scored with their intervention in place; everything else
    is scored in the deployment condition (all matrices ternary, no teacher)."""
    if cfg.schedule.mode in CASE_MODES:
        return plan_for(cfg.schedule, min(it, cfg.schedule.budget.total_iters - 1))
    return None


def _qat_metric(student, teacher_trace, x, y, reg, cfg, it) -> float:
    L = student.config.L
    cond = qat_eval_condition(cfg, it)
    g = cfg.quant.granularity
    if cond is None:
        out = predict(student, x, QuantPlan.full(L), granularity=g)
    else:
        out = predict(student, x, cond.quant(L), teacher_trace, cond, granularity=g)
    return task_metric(out, y, reg)


def qat(cfg: C.RunConfig, teacher: TransformerModel, dataset: D.Dataset | None = None,
        on_iteration=None) -> RunResult:
    """Scheduled QAT of a student against a frozen full-precision teacher."""
    dataset = load_dataset(cfg) if dataset is None else dataset
    mcfg = model_config(cfg, dataset)
    if teacher.config.to_dict() != mcfg.to_dict():
        raise CheckpointMismatch("teacher configuration does not match run config/dataset")
    if cfg.student_init == "teacher":
        student = teacher.clone().requires_grad_(True)
    else:
        student = init_model(mcfg, seed=cfg.seed + 1)
    L = mcfg.L
    reg = dataset.is_regression
    sched = cfg.schedule
    budget = sched.budget
    g = cfg.quant.granularity

    train_trace = teacher_traces(teacher, dataset.train_x)
    dev_trace = teacher_traces(teacher, dataset.dev_x)
    train_cap = train_trace.take(slice(0, TRAIN_METRIC_CAP))
    params = student.parameters()
    oc = cfg.optim
    opt = OptimizerState(oc.beta1, oc.beta2, oc.eps, oc.max_grad_norm)
    batches = _batches(len(dataset.train_y), budget.batch_size, cfg.seed)
    rows: list[dict] = []

    def eval_row(it, lr=None, lb: LossBreakdown | None = None, phase=None):
        rows.append({
            "iter": it, "lr": lr,
            "total": None if lb is None else lb.total,
            "l_trm": None if lb is None else lb.l_trm,
            "l_pred": None if lb is None else lb.l_pred,
            "l_output": None if lb is None else lb.l_output,
            "train_metric": _qat_metric(student, train_cap, dataset.train_x[:TRAIN_METRIC_CAP],
                                        dataset.train_y[:TRAIN_METRIC_CAP], reg, cfg, it),
            "eval_metric": _qat_metric(student, dev_trace, dataset.dev_x, dataset.dev_y,
                                       reg, cfg, it),
            "phase": phase or plan_for(sched, 0).phase,
        })

    eval_row(0)
    for it in range(budget.total_iters):
        plan = plan_for(sched, it)
        idx = next(batches)
        tt = train_trace.take(idx)
        ti = InterventionInputs.from_trace(tt, plan.replace_AO, plan.replace_SA)
        lr = lr_at(it, budget.total_iters, oc.peak_lr, oc.warmup_frac, oc.end_lr_ratio)
        student.zero_grad()
        with T.Tape() as tape:
            _, st = forward(student, dataset.train_x[idx], plan.quant(L), ti, granularity=g)
            labels = dataset.train_y[idx] if cfg.label_loss else None
            lb = distill_loss(st, tt, reg, plan.output_loss_active, cfg.lambda_out, labels)
            _check_finite(lb.total, it, "distillation loss",
                          {"l_trm": lb.l_trm, "l_pred": lb.l_pred, "l_output": lb.l_output})
            tape.backward(lb.total_tensor)
        opt.step(params, lr)
        if on_iteration is not None:
            on_iteration(it, plan, lb)
        if (it + 1) % budget.eval_every == 0 or it + 1 == budget.total_iters:
            eval_row(it + 1, lr, lb, plan.phase)

    final = evaluate(student, dataset, quantized=True, granularity=g)
    if sched.mode in CASE_MODES:
        final["intervened_metric"] = rows[-1]["eval_metric"]
    return RunResult(student, rows, final, cfg)


# -- teacher cache -----------------------------------------------------------

def teacher_key(cfg: C.RunConfig) -> str:
    """Hash of everything that determines the teacher (not the QAT settings)."""
    d = cfg.to_dict()
    data = dict(d["data"])
    data["n_train"] = max(cfg.teacher.pool, cfg.data.n_train)
    payload = json.dumps({"model": d["model"], "teacher": d["teacher"], "data": data,
                          "optim": d["optim"], "seed": d["seed"]}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_teacher(cfg: C.RunConfig, cache_dir: str | Path) -> TransformerModel:
    """Load the teacher for ``cfg`` from ``cache_dir`` or train and store it."""
    path = Path(cache_dir) / f"teacher-{cfg.data.task}-{teacher_key(cfg)}"
    if (path / "checkpoint" / "manifest.json").exists():
        return checkpoint.load_checkpoint(path / "checkpoint")
    result = train_teacher(cfg)
    log.info("teacher %s: dev metric %.4f", path.name, result.final_metric)
    write_run(result, path)
    return result.model
