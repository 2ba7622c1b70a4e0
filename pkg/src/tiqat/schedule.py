"""Which sub-layers are quantized and which teacher signals are injected, per iteration.

Sub-layer groups: GEN = {W_Q, W_K} (attention map generation),
PROP = {W_V, W_O} (value propagation), FFN = {W_1, W_2}.

Replacing the attention output covers GEN and PROP; replacing the attention
map covers GEN only.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .errors import IterOutOfRange
from .quant import QuantPlan
from .rng import SplitMix64

MODES = ("none", "ti_o", "ti_m", "ti_g", "ti_inverted", "ti_stochastic",
         "case1", "case2", "case3", "case4")
CASE_MODES = ("case1", "case2", "case3", "case4")
TWO_STEP_MODES = ("ti_o", "ti_m", "ti_g", "ti_inverted", "ti_stochastic")

ALL = frozenset({"GEN", "PROP", "FFN"})

# Budget-O/O2/O4 analogues: multipliers on total_iters
BUDGETS = {"O": 1, "O2": 2, "O4": 4}


@dataclass
class TrainingBudget:
    total_iters: int = 600
    step1_fraction: float = 0.1
    phase_split: float = 0.5
    batch_size: int = 32
    eval_every: int = 20

    def scaled(self, name: str) -> TrainingBudget:
        out = TrainingBudget(**asdict(self))
        out.total_iters = self.total_iters * BUDGETS[name]
        return out

    @property
    def step1_end(self) -> int:
        return math.floor(Fraction(repr(self.step1_fraction)) * self.total_iters)

    @property
    def phase1_end(self) -> int:
        f = Fraction(repr(self.step1_fraction)) * Fraction(repr(self.phase_split))
        return math.floor(f * self.total_iters)


@dataclass
class InterventionSchedule:
    mode: str = "ti_g"
    budget: TrainingBudget = field(default_factory=TrainingBudget)
    output_loss_enabled: bool = True
    two_step_enabled: bool = True
    rng_seed: int = 0


@dataclass(frozen=True)
class IterationPlan:
    quant_groups: frozenset
    replace_AO: bool = False
    replace_SA: bool = False
    output_loss_active: bool = False
    phase: str = "step2"

    def __post_init__(self):
        if self.replace_AO and self.replace_SA:
            raise ValueError("attention-output and map replacement are mutually exclusive")

    def quant(self, num_layers: int) -> QuantPlan:
        return QuantPlan.from_groups(num_layers, self.quant_groups)

    def table_row(self) -> dict[str, str]:
        """Render as settings-table cells: 'Q+TI', 'Q' or 'FP' per sub-layer group."""
        covered = {"GEN", "PROP"} if self.replace_AO else {"GEN"} if self.replace_SA else set()
        return {g: ("Q+TI" if g in covered else "Q") if g in self.quant_groups else "FP"
                for g in ("GEN", "PROP", "FFN")}


def _output_phase(s: InterventionSchedule, phase: str) -> IterationPlan:
    return IterationPlan(ALL, replace_AO=True, output_loss_active=s.output_loss_enabled, phase=phase)


def _map_phase(phase: str) -> IterationPlan:
    return IterationPlan(ALL, replace_SA=True, phase=phase)


STEP2 = IterationPlan(ALL, phase="step2")


def stochastic_pick(seed: int, it: int) -> int:
    """0 -> output intervention, 1 -> map intervention; a pure function of (seed, it)."""
    return SplitMix64((seed << 32) ^ it).next() >> 63


def plan_for(schedule: InterventionSchedule, it: int) -> IterationPlan:
    b = schedule.budget
    if not 0 <= it < b.total_iters:
        raise IterOutOfRange(f"iteration {it} outside [0, {b.total_iters})")
    mode = schedule.mode

    if mode == "none":
        return STEP2
    if mode == "case1":
        return _output_phase(schedule, "case")
    if mode == "case2":
        return IterationPlan(frozenset({"FFN"}), phase="case")
    if mode == "case3":
        return _map_phase("case")
    if mode == "case4":
        return IterationPlan(frozenset({"PROP", "FFN"}), phase="case")
    if mode not in TWO_STEP_MODES:
        raise ValueError(f"unknown mode {mode!r}")

    # without two-step QAT the intervention covers the whole run
    in_step1 = it < b.step1_end if schedule.two_step_enabled else True
    if not in_step1:
        return STEP2
    first_half = it < b.phase1_end if schedule.two_step_enabled else it < b.phase_split * b.total_iters
    phase = "step1_phase1" if first_half else "step1_phase2"
    if mode == "ti_o":
        return _output_phase(schedule, phase)
    if mode == "ti_m":
        return _map_phase(phase)
    if mode == "ti_g":
        return _output_phase(schedule, phase) if first_half else _map_phase(phase)
    if mode == "ti_inverted":
        return _map_phase(phase) if first_half else _output_phase(schedule, phase)
    # ti_stochastic
    if stochastic_pick(schedule.rng_seed, it) == 0:
        return _output_phase(schedule, phase)
    return _map_phase(phase)


def validate(schedule: InterventionSchedule) -> list[dict]:
    """Structured problems as ``{"pointer": ..., "message": ...}``; empty means valid."""
    errs = []

    def bad(pointer, message):
        errs.append({"pointer": pointer, "message": message})

    b = schedule.budget
    if schedule.mode not in MODES:
        bad("/mode", f"unknown mode {schedule.mode!r}; expected one of {', '.join(MODES)}")
    if not isinstance(b.total_iters, int) or b.total_iters < 1:
        bad("/budget/total_iters", "total_iters must be a positive integer")
    if not 0 <= b.step1_fraction <= 0.5:
        bad("/budget/step1_fraction",
            "step1_fraction exceeds 0.5" if b.step1_fraction > 0.5 else "step1_fraction is negative")
    if not 0 <= b.phase_split <= 1:
        bad("/budget/phase_split", "phase_split must lie in [0, 1]")
    if b.batch_size < 1:
        bad("/budget/batch_size", "batch_size must be >= 1")
    if b.eval_every < 1:
        bad("/budget/eval_every", "eval_every must be >= 1")
    if schedule.mode in CASE_MODES and schedule.two_step_enabled:
        bad("/two_step_enabled", f"{schedule.mode} is single-phase; two_step_enabled must be false")
    if schedule.mode == "ti_g" and not schedule.two_step_enabled:
        bad("/two_step_enabled", "ti_g requires two_step_enabled")
    return errs


def settings_table(schedule_mode: str, total_iters: int = 1000, step1_fraction: float = 0.1,
           phase_split: float = 0.5) -> dict[str, dict[str, str]]:
    """Quantization-settings view of a mode: row name -> {group: cell}."""
    s = InterventionSchedule(schedule_mode, TrainingBudget(total_iters, step1_fraction, phase_split))
    b = s.budget
    probes = {"Step1-Phase1": 0, "Step1-Phase2": b.phase1_end, "Step2": b.step1_end}
    return {row: plan_for(s, it).table_row() for row, it in probes.items()}
