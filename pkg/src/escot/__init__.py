"""Early stopping of chain-of-thought reasoning with a run-jump test.

The reasoning stream is split into steps, each step is probed for an
intermediate answer, and generation halts once the run of identical answers
grows by a statistically unusual jump.
"""

from escot.answers import NO_ANSWER, StepAnswer, build_probe_context, normalize_answer, parse_answer, segment_steps
from escot.estimator import RunJumpStopper
from escot.records import TrajectoryRecord, read_trace, write_trace
from escot.runjump import (
    EscotConfig,
    Reason,
    RunJumpController,
    RunState,
    StopDecision,
    observe_step,
    process_trajectory,
    run_jump_test,
)
from escot.stats import student_t_cdf, student_t_sf
from escot.theory import DynamicsSchedule, event_bound, prop1_bound, theorem1_bound

__version__ = "0.1.0"

__all__ = [
    "NO_ANSWER",
    "DynamicsSchedule",
    "EscotConfig",
    "Reason",
    "RunJumpController",
    "RunJumpStopper",
    "RunState",
    "StepAnswer",
    "StopDecision",
    "TrajectoryRecord",
    "build_probe_context",
    "event_bound",
    "normalize_answer",
    "observe_step",
    "parse_answer",
    "process_trajectory",
    "prop1_bound",
    "read_trace",
    "run_jump_test",
    "segment_steps",
    "student_t_cdf",
    "student_t_sf",
    "theorem1_bound",
    "write_trace",
]
