"""Run-length bookkeeping and the run-jump stopping test.

A *run* is a maximal block of consecutive steps that produced the same step
answer. Generation stops once the latest run-length difference is both at
least ``d_min`` and significantly larger than the earlier differences under
a one-sided, one-sample t-test.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from escot.answers import NO_ANSWER, Answer, StepAnswer, answers_equal
from escot.stats import mean_sd, student_t_sf


class Reason(str, enum.Enum):
    STOPPED = "STOPPED"
    JUMP_BELOW_MIN = "JUMP_BELOW_MIN"
    NOT_SIGNIFICANT = "NOT_SIGNIFICANT"
    TOO_FEW_RUNS = "TOO_FEW_RUNS"
    NO_NEW_RUN = "NO_NEW_RUN"


@dataclass(frozen=True)
class EscotConfig:
    """Stopping-rule hyperparameters.

    ``d_min`` may be ``math.inf`` to disable stopping entirely.
    """

    d_min: float = 10
    alpha: float = 0.05
    min_prior_diffs: int = 2

    def __post_init__(self):
        if not (self.d_min >= 1 and (math.isinf(self.d_min) or float(self.d_min).is_integer())):
            raise ValueError(f"d_min must be a positive integer or inf, got {self.d_min}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.min_prior_diffs) != self.min_prior_diffs or self.min_prior_diffs < 2:
            raise ValueError(f"min_prior_diffs must be an integer >= 2, got {self.min_prior_diffs}")


@dataclass(frozen=True)
class RunState:
    # runs starts as (0,) so the first answered step extends r_1 to 1
    runs: tuple[int, ...] = (0,)
    last_answer: Optional[Answer] = None
    steps_seen: int = 0
    skipped: int = 0

    @property
    def n(self) -> int:
        return len(self.runs)


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: Reason
    step_index: int = 0
    jump: Optional[int] = None
    t_stat: Optional[float] = None
    p_value: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "stop": self.stop,
            "reason": self.reason.value,
            "jump": self.jump,
            "t_stat": _finite_or_str(self.t_stat),
            "p_value": self.p_value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> StopDecision:
        t = d.get("t_stat")
        return cls(
            stop=bool(d["stop"]),
            reason=Reason(d["reason"]),
            step_index=int(d.get("step_index", 0)),
            jump=d.get("jump"),
            t_stat=float(t) if t is not None else None,
            p_value=d.get("p_value"),
        )


def _finite_or_str(x: Optional[float]):
    if x is None or math.isfinite(x):
        return x
    return "inf" if x > 0 else "-inf"


class StepOrderError(ValueError):
    pass


def observe_step(state: RunState, answer: StepAnswer) -> RunState:
    """Fold one step answer into the run state."""
    if answer.step_index != state.steps_seen + 1:
        raise StepOrderError(
            f"expected step {state.steps_seen + 1}, got {answer.step_index}"
        )
    x = answer.normalized
    if x is NO_ANSWER:
        return replace(state, steps_seen=state.steps_seen + 1, skipped=state.skipped + 1)
    if state.last_answer is None or answers_equal(x, state.last_answer):
        runs = state.runs[:-1] + (state.runs[-1] + 1,)
    else:
        runs = state.runs + (1,)
    return RunState(runs, x, state.steps_seen + 1, state.skipped)


def difference_sequence(state_or_runs: RunState | Sequence[int]) -> list[int]:
    runs = state_or_runs.runs if isinstance(state_or_runs, RunState) else state_or_runs
    return [runs[k] - runs[k - 1] for k in range(1, len(runs))]


def run_jump_test(state: RunState, cfg: EscotConfig) -> StopDecision:
    """Decide whether to stop given the current run lengths."""
    diffs = difference_sequence(state)
    step = state.steps_seen
    m = len(diffs) - 1
    if m < cfg.min_prior_diffs:
        return StopDecision(False, Reason.TOO_FEW_RUNS, step, diffs[-1] if diffs else None)
    jump = diffs[-1]
    if jump < cfg.d_min:
        return StopDecision(False, Reason.JUMP_BELOW_MIN, step, jump)
    priors = diffs[:-1]
    mu, sd = mean_sd(priors)
    if sd == 0.0:
        # limit of the statistic for a constant prior sample
        if jump > mu:
            return StopDecision(True, Reason.STOPPED, step, jump, math.inf, 0.0)
        return StopDecision(False, Reason.NOT_SIGNIFICANT, step, jump, None, None)
    t = (jump - mu) / (sd / math.sqrt(m))
    p = student_t_sf(t, m - 1)
    if p < cfg.alpha:
        return StopDecision(True, Reason.STOPPED, step, jump, t, p)
    return StopDecision(False, Reason.NOT_SIGNIFICANT, step, jump, t, p)


@dataclass
class TrajectoryResult:
    stop_step: Optional[int]
    stopped_answer: Optional[Answer]
    trail: list[StopDecision] = field(default_factory=list)
    state: RunState = field(default_factory=RunState)

    @property
    def stopped(self) -> bool:
        return self.stop_step is not None


class RunJumpController:
    """Incremental driver: feed step answers one at a time."""

    def __init__(self, cfg: EscotConfig):
        self.cfg = cfg
        self.state = RunState()
        self.trail: list[StopDecision] = []
        self.stopped = False

    def feed(self, answer: StepAnswer) -> StopDecision:
        if self.stopped:
            raise RuntimeError("trajectory already stopped")
        self.state = observe_step(self.state, answer)
        if answer.normalized is NO_ANSWER:
            decision = StopDecision(False, Reason.NO_NEW_RUN, self.state.steps_seen)
        else:
            decision = run_jump_test(self.state, self.cfg)
        self.trail.append(decision)
        self.stopped = decision.stop
        return decision


def process_trajectory(answers: Iterable[StepAnswer], cfg: EscotConfig) -> TrajectoryResult:
    """Run the stopping rule over a recorded sequence of step answers."""
    ctl = RunJumpController(cfg)
    for a in answers:
        decision = ctl.feed(a)
        if decision.stop:
            return TrajectoryResult(decision.step_index, ctl.state.last_answer, ctl.trail, ctl.state)
    return TrajectoryResult(None, None, ctl.trail, ctl.state)


def as_step_answers(values: Iterable[Optional[Answer]]) -> list[StepAnswer]:
    """Wrap already-normalized answers (``None`` meaning no answer) as steps."""
    out = []
    for i, v in enumerate(values, 1):
        v = NO_ANSWER if v is None else v
        out.append(StepAnswer(i, "" if v is NO_ANSWER else str(v), v))
    return out


def runs_of(values: Iterable[Optional[Answer]]) -> list[int]:
    """Run lengths of a value sequence, ignoring missing answers."""
    runs: list[int] = []
    last = None
    for v in values:
        if v is None or v is NO_ANSWER:
            continue
        if runs and v == last:
            runs[-1] += 1
        else:
            runs.append(1)
            last = v
    return runs


__all__ = [
    "EscotConfig", "Reason", "RunJumpController", "RunState", "StepOrderError",
    "StopDecision", "TrajectoryResult", "as_step_answers", "difference_sequence",
    "observe_step", "process_trajectory", "run_jump_test", "runs_of",
]
