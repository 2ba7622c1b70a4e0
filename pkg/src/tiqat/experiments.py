"""Desk-scale trend experiments on the synthetic tasks.

Each function trains what it needs (teachers come from an on-disk cache) and
returns plain per-seed numbers; the pass/fail rules live with the callers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from . import data as D
from . import diagnostics as G
from . import train
from .model import TransformerModel
from .quant import QuantPlan

TASKS = ("induction", "copy_pair", "similarity")
SEEDS = (0, 1, 2, 3, 4)


@dataclass
class DeskSetup:
    """Shared settings for the trend experiments.

    Teachers train on a large pool so they generalize; the student then sees
    only the first ``n_train`` of those examples, as in task-specific QAT.
    """

    cache_dir: str = "runs/teachers"
    n_train: int = 256
    n_dev: int = 1024
    teacher_iters: int = 3000
    teacher_lr: float = 3e-3
    pool: int = 16384
    # chosen on held-out seeds 5-7, never on the reported seeds
    total_iters: int = 400
    step1_fraction: float = 0.25
    eval_every: int = 100
    overrides: dict = field(default_factory=dict)

    def config(self, task: str, seed: int, mode: str = "none", **changes) -> C.RunConfig:
        cfg = C.RunConfig().replace(
            seed=seed, model={"attn_scale": "sqrt_dh"},
            data={"task": task, "seed": seed, "n_train": self.n_train, "n_dev": self.n_dev},
            teacher={"iters": self.teacher_iters, "peak_lr": self.teacher_lr, "pool": self.pool,
                     "eval_every": 500},
            schedule={"budget": {"total_iters": self.total_iters,
                                 "step1_fraction": self.step1_fraction,
                                 "eval_every": self.eval_every}})
        return C.with_mode(cfg.replace(**self.overrides).replace(**changes), mode)

    def teacher(self, task: str, seed: int) -> TransformerModel:
        return train.cached_teacher(self.config(task, seed), Path(self.cache_dir))

    def dataset(self, task: str, seed: int) -> D.Dataset:
        return train.load_dataset(self.config(task, seed))

    def qat(self, task: str, seed: int, mode: str, **changes) -> train.RunResult:
        cfg = self.config(task, seed, mode, **changes)
        return train.qat(cfg, self.teacher(task, seed), self.dataset(task, seed))

    def prepare(self, tasks=TASKS, seeds=SEEDS) -> None:
        for t in tasks:
            for s in seeds:
                self.teacher(t, s)


def mode_comparison(setup: DeskSetup, tasks=TASKS, seeds=SEEDS,
                    modes=("none", "ti_o", "ti_m", "ti_g")) -> dict[str, dict[str, list[float]]]:
    """Final dev metric (all matrices ternary, no teacher) per task, mode and seed."""
    return {t: {m: [setup.qat(t, s, m).final_metric for s in seeds] for m in modes}
            for t in tasks}


@dataclass
class ErrorPropagation:
    seed: int
    fresh_mse: list[float]  # ternarized teacher, before any QAT
    fresh_spearman: float
    final_mse: dict[str, float]  # last-layer MSE after QAT, per mode


def error_propagation(setup: DeskSetup, seeds=SEEDS, task: str = "induction",
                      modes=("none", "ti_g"), batch: int = 256) -> list[ErrorPropagation]:
    out = []
    for s in seeds:
        teacher = setup.teacher(task, s)
        x = setup.dataset(task, s).dev_x[:batch]
        full = QuantPlan.full(teacher.config.L)
        fresh = G.layer_mse_profile(teacher, teacher, [x], full)
        final = {m: G.layer_mse_profile(setup.qat(task, s, m).model, teacher, [x], full).values[-1]
                 for m in modes}
        out.append(ErrorPropagation(s, fresh.values, fresh.spearman, final))
    return out


def iters_to_reach(rows: list[dict], target: float) -> float:
    """First logged iteration whose dev metric reaches ``target`` (inf if never)."""
    for r in rows:
        if r["eval_metric"] >= target:
            return r["iter"]
    return math.inf


def case_convergence(setup: DeskSetup, seed: int, task: str = "induction",
                     frac: float = 0.95, **changes) -> dict[str, float]:
    """Iterations for each controlled case to reach ``frac`` of the teacher's dev metric.

    Cases are scored with their intervention in place, so the numbers measure
    how fast the quantized sub-layers recover rather than deployment quality.
    """
    teacher = setup.teacher(task, seed)
    target = frac * train.evaluate(teacher, setup.dataset(task, seed))["metric"]
    return {c: iters_to_reach(setup.qat(task, seed, c, **changes).rows, target)
            for c in ("case1", "case2", "case3", "case4")}


@dataclass
class CurvatureReport:
    seed: int
    reports: dict[str, G.HessianReport]


def hessian_trend(setup: DeskSetup, seeds=SEEDS, task: str = "induction",
                  modes=("none", "ti_g"), batch: int = 64, iters: int = 50,
                  tol: float = 1e-2) -> list[CurvatureReport]:
    out = []
    for s in seeds:
        teacher = setup.teacher(task, s)
        ds = setup.dataset(task, s)
        x = ds.train_x[:batch]
        reps = {}
        for m in modes:
            student = setup.qat(task, s, m).model
            gf, theta = G.distill_grad_fn(student, teacher, x, True, regression=ds.is_regression)
            reps[m] = G.top_eigenvalue(gf, theta, iters, tol, seed=s)
        out.append(CurvatureReport(s, reps))
    return out


def ranking_trend(setup: DeskSetup, seeds=SEEDS, task: str = "induction",
                  modes=("ti_o", "ti_g"), batch: int = 256) -> dict[str, list[float]]:
    """Mean attention ranking loss of the deployed (ternary) student vs. the teacher."""
    out: dict[str, list[float]] = {m: [] for m in modes}
    for s in seeds:
        teacher = setup.teacher(task, s)
        x = setup.dataset(task, s).dev_x[:batch]
        for m in modes:
            student = setup.qat(task, s, m).model
            out[m].append(G.model_ranking_loss(student, teacher, x,
                                               QuantPlan.full(teacher.config.L)))
    return out


def summarize(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0
