"""Synthetic answer dynamics and the error bounds for early stopping.

Answers are integers ``1..|A|``; answer ``1`` is the final answer. At step
``t`` the model emits answer 1 with probability ``p_t`` and otherwise one of
the wrong answers uniformly at random.
"""

from __future__ import annotations

import functools
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from escot.answers import NO_ANSWER, answers_equal
from escot.runjump import (
    EscotConfig,
    RunState,
    as_step_answers,
    process_trajectory,
    run_jump_test,
    runs_of,
)
from escot.stats import student_t_isf

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
Z_99 = 2.3263478740408408  # one-sided 99% standard normal quantile
MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class DynamicsSchedule:
    """Answer-space size plus the per-step probability of the final answer."""

    answer_space_size: int
    probs: tuple[float, ...]
    name: str = "custom"

    def __post_init__(self):
        if self.answer_space_size < 2:
            raise ValueError("answer space needs at least two answers")
        if len(self.probs) < 1:
            raise ValueError("schedule needs at least one step")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError("probabilities must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return len(self.probs)

    def __call__(self, t: int) -> float:
        """p_t for 1-based step ``t``."""
        return self.probs[t - 1]

    def violations(self) -> list[str]:
        """Which generative assumptions this schedule breaks, if any."""
        out = []
        if self.probs[-1] != 1.0:
            out.append(f"final-step probability is {self.probs[-1]}, not 1")
        bad = [t for t in range(2, len(self.probs) + 1) if self(t) < self(t - 1)]
        if bad:
            out.append(f"p_t decreases at steps {bad[:5]}")
        return out

    @classmethod
    def from_function(cls, space: int, steps: int, fn: Callable[[int], float], name="custom", clamp_final=True):
        probs = [min(1.0, max(0.0, float(fn(t)))) for t in range(1, steps + 1)]
        if clamp_final:
            probs[-1] = 1.0
        return cls(space, tuple(probs), name)

    @classmethod
    def linear(cls, space: int, steps: int, start: float = 0.0):
        """p_t rising linearly from ``start`` to 1 (``start=0`` gives t/T)."""
        return cls.from_function(space, steps, lambda t: start + (1.0 - start) * t / steps, "linear")

    @classmethod
    def logistic(cls, space: int, steps: int, midpoint: float, steepness: float = 0.3):
        return cls.from_function(
            space, steps, lambda t: 1.0 / (1.0 + math.exp(-steepness * (t - midpoint))), "logistic"
        )

    @classmethod
    def step(cls, space: int, steps: int, change_at: int, low: float = 0.3, high: float = 0.8):
        """``low`` before step ``change_at``, ``high`` from it on, 1 at the end."""
        return cls.from_function(space, steps, lambda t: low if t < change_at else high, "step")

    @classmethod
    def constant(cls, space: int, steps: int, p: float = 1.0):
        return cls.from_function(space, steps, lambda t: p, "constant")


# -- sampling ---------------------------------------------------------------


def _sample_block(schedule: DynamicsSchedule, rng: np.random.Generator, size: int) -> np.ndarray:
    p = np.asarray(schedule.probs)
    u = rng.random((size, schedule.total_steps))
    wrong = rng.integers(2, schedule.answer_space_size + 1, size=(size, schedule.total_steps))
    return np.where(u < p, 1, wrong).astype(np.int16)


def sample_trajectory(schedule: DynamicsSchedule, rng_seed: int) -> list[int]:
    """One synthetic answer sequence; deterministic in ``rng_seed``."""
    return _sample_block(schedule, np.random.default_rng(rng_seed), 1)[0].tolist()


def sample_trajectories(schedule: DynamicsSchedule, n: int, rng_seed: int) -> np.ndarray:
    """``n`` trajectories drawn in fixed-size blocks.

    Block ``b`` uses a generator seeded by ``(rng_seed, b)``, so the output
    does not depend on how blocks are distributed over workers.
    """
    blocks = []
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        rng = np.random.default_rng([rng_seed, b])
        blocks.append(_sample_block(schedule, rng, min(BLOCK_SIZE, n - start)))
    if not blocks:
        return np.zeros((0, schedule.total_steps), dtype=np.int16)
    return np.concatenate(blocks)


# -- bounds -----------------------------------------------------------------


def theorem1_bound(p_q1: float, r_stop: int, r_prev: int) -> float:
    """Error bound for a two-answer space given the stopping run and its predecessor."""
    if not 0.0 < p_q1 < 1.0:
        raise ValueError(f"p_q1 must lie strictly in (0, 1), got {p_q1}")
    _check_runs(r_stop, r_prev)
    ratio = (1.0 - p_q1) / p_q1
    return _odds_to_prob(_safe_pow(ratio, r_stop - r_prev))


def prop1_bound(p_q1: float, r_stop: int, r_prev: int, space: int) -> float:
    """Error bound for three or more answers with uniform wrong-answer mass."""
    if space < 3:
        raise ValueError("prop1_bound needs |A| >= 3; use theorem1_bound for |A| = 2")
    if not 0.0 < p_q1 < 1.0:
        raise ValueError(f"p_q1 must lie strictly in (0, 1), got {p_q1}")
    _check_runs(r_stop, r_prev)
    jump = r_stop - r_prev
    first = _safe_pow(1.0 - p_q1, jump) * (2.0 / (space - 1)) ** r_stop
    second = _safe_pow((1.0 - p_q1) / p_q1 / (space - 1), jump)
    return _odds_to_prob(first + second)


def _odds_to_prob(x: float) -> float:
    # 1 - 1/(1 + x), written without cancellation for tiny x
    return 1.0 if math.isinf(x) else x / (1.0 + x)


def _check_runs(r_stop: int, r_prev: int) -> None:
    if r_stop < 1 or r_prev < 1:
        raise ValueError("run lengths must be positive")


def _safe_pow(base: float, exp: float) -> float:
    try:
        return base ** exp
    except OverflowError:
        return math.inf


def event_bound(p_q1: float, r_stop: int, r_prev: int, space: int) -> float:
    """Bound for one stop event, with the limits at ``p`` in {0, 1} filled in."""
    if p_q1 >= 1.0:
        return 0.0
    if p_q1 <= 0.0:
        return 1.0
    if space == 2:
        return theorem1_bound(p_q1, r_stop, r_prev)
    return prop1_bound(p_q1, r_stop, r_prev, space)


@dataclass(frozen=True)
class StopEvent:
    k: int
    q: int
    r_prev: int
    r_stop: int
    p_q1: float
    stopped_correct: bool
    bound: float

    @property
    def stop_step(self) -> int:
        return self.q + self.r_stop


def stop_event(runs: Sequence[int], stopped_answer, schedule: DynamicsSchedule) -> StopEvent:
    k = len(runs)
    q = sum(runs[:-1])
    p_q1 = schedule(q + 1)
    return StopEvent(
        k, q, runs[-2], runs[-1], p_q1,
        stopped_correct=int(stopped_answer) == 1,
        bound=event_bound(p_q1, runs[-1], runs[-2], schedule.answer_space_size),
    )


# -- vectorized stopping ----------------------------------------------------


@functools.lru_cache(maxsize=4096)
def _critical_value(alpha: float, df: int) -> float:
    return student_t_isf(alpha, df)


@dataclass
class BatchStops:
    stop_step: np.ndarray  # 1-based, -1 when never stopped
    stop_answer: np.ndarray
    n_runs: np.ndarray
    r_prev: np.ndarray
    r_stop: np.ndarray

    @property
    def stopped(self) -> np.ndarray:
        return self.stop_step > 0


def batch_stop(answers: np.ndarray, cfg: EscotConfig) -> BatchStops:
    """Apply the stopping rule to every row of an integer answer matrix.

    Equivalent to :func:`~escot.runjump.process_trajectory` row by row. The
    significance check is done against precomputed critical values; rows whose
    statistic lies within rounding distance of a critical value are re-decided
    by the scalar test.
    """
    answers = np.asarray(answers)
    n, steps = answers.shape
    stop_step = np.full(n, -1, dtype=np.int64)
    stop_answer = np.zeros(n, dtype=np.int64)
    out_runs = np.zeros(n, dtype=np.int64)
    out_prev = np.zeros(n, dtype=np.int64)
    out_stop = np.zeros(n, dtype=np.int64)
    if n == 0 or steps == 0:
        return BatchStops(stop_step, stop_answer, out_runs, out_prev, out_stop)

    runs = np.zeros((n, steps), dtype=np.int64)
    last = answers[:, 0].astype(np.int64)
    n_runs = np.ones(n, dtype=np.int64)
    runs[:, 0] = 1
    s1 = np.zeros(n, dtype=np.int64)
    s2 = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    rows = np.arange(n)
    max_m = steps
    crit = np.full(max_m + 1, np.nan)
    for m in range(2, max_m + 1):
        crit[m] = _critical_value(cfg.alpha, m - 1)

    for col in range(1, steps):
        x = answers[:, col].astype(np.int64)
        same = (x == last) & active
        new = (x != last) & active
        cur = runs[rows, n_runs - 1]
        if new.any():
            # the run being closed turns its difference into a prior
            closes = new & (n_runs >= 2)
            prev = np.where(n_runs >= 2, runs[rows, np.maximum(n_runs - 2, 0)], 0)
            d = cur - prev
            s1 += np.where(closes, d, 0)
            s2 += np.where(closes, d * d, 0)
            runs[rows[new], n_runs[new]] = 1
            n_runs = n_runs + new
            last = np.where(new, x, last)
        runs[rows[same], n_runs[same] - 1] += 1

        m = n_runs - 2
        cur = runs[rows, n_runs - 1]
        prev = runs[rows, np.maximum(n_runs - 2, 0)]
        jump = cur - prev
        cand = active & (m >= cfg.min_prior_diffs) & (jump >= cfg.d_min)
        if not cand.any():
            continue
        idx = np.flatnonzero(cand)
        mm = m[idx]
        S1 = s1[idx]
        var_num = mm * s2[idx] - S1 * S1  # m^2 (m-1) sample variance
        J = jump[idx]
        degenerate = var_num == 0
        fire = np.zeros(idx.size, dtype=bool)
        fire[degenerate] = J[degenerate] * mm[degenerate] > S1[degenerate]
        nd = ~degenerate
        if nd.any():
            mu = S1[nd] / mm[nd]
            sd = np.sqrt(var_num[nd] / (mm[nd] * (mm[nd] - 1.0)))
            t = (J[nd] - mu) / (sd / np.sqrt(mm[nd]))
            c = crit[mm[nd]]
            decided = t > c
            close = np.abs(t - c) <= 1e-7 * (1.0 + np.abs(c))
            for j in np.flatnonzero(close):
                row = idx[nd][j]
                state = RunState(tuple(int(v) for v in runs[row, : n_runs[row]]), 1, col + 1, 0)
                decided[j] = run_jump_test(state, cfg).stop
            fire[nd] = decided
        hit = idx[fire]
        if hit.size:
            stop_step[hit] = col + 1
            stop_answer[hit] = last[hit]
            out_runs[hit] = n_runs[hit]
            out_prev[hit] = prev[hit]
            out_stop[hit] = cur[hit]
            active[hit] = False
    return BatchStops(stop_step, stop_answer, out_runs, out_prev, out_stop)


# -- Monte Carlo and exact validation ----------------------------------------


@dataclass
class MonteCarloResult:
    n_trials: int
    n_stopped: int
    empirical_error: float
    mean_bound: float
    stop_rate: float
    margin: float
    events: list[StopEvent] = field(default_factory=list, repr=False)

    @property
    def holds(self) -> bool:
        return self.empirical_error <= self.mean_bound + self.margin


def _events_from_batch(stops: BatchStops, schedule: DynamicsSchedule) -> list[StopEvent]:
    events = []
    for i in np.flatnonzero(stops.stopped):
        r_stop, r_prev = int(stops.r_stop[i]), int(stops.r_prev[i])
        q = int(stops.stop_step[i]) - r_stop
        p_q1 = schedule(q + 1)
        events.append(StopEvent(
            int(stops.n_runs[i]), q, r_prev, r_stop, p_q1,
            stopped_correct=int(stops.stop_answer[i]) == 1,
            bound=event_bound(p_q1, r_stop, r_prev, schedule.answer_space_size),
        ))
    return events


def monte_carlo_error(
    schedule: DynamicsSchedule,
    cfg: EscotConfig,
    n_trials: int,
    rng_seed: int = 0,
    n_jobs: int = 1,
) -> MonteCarloResult:
    """Empirical early-stop error against the averaged per-event bound.

    ``margin`` is the one-sided 99% normal margin of the paired difference
    ``1[wrong] - bound`` over stopped trials.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    starts = list(range(0, n_trials, BLOCK_SIZE))

    def run_block(b: int) -> list[StopEvent]:
        rng = np.random.default_rng([rng_seed, b])
        size = min(BLOCK_SIZE, n_trials - starts[b])
        return _events_from_batch(batch_stop(_sample_block(schedule, rng, size), cfg), schedule)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            chunks = list(pool.map(run_block, range(len(starts))))
    else:
        chunks = [run_block(b) for b in range(len(starts))]
    events = [e for chunk in chunks for e in chunk]
    return summarize_events(events, n_trials)


def summarize_events(events: list[StopEvent], n_trials: int) -> MonteCarloResult:
    k = len(events)
    if k == 0:
        return MonteCarloResult(n_trials, 0, 0.0, 0.0, 0.0, 0.0, events)
    wrong = np.array([0.0 if e.stopped_correct else 1.0 for e in events])
    bounds = np.array([e.bound for e in events])
    diff = wrong - bounds
    margin = Z_99 * float(diff.std(ddof=1)) / math.sqrt(k) if k > 1 else 1.0
    return MonteCarloResult(
        n_trials, k, float(wrong.mean()), float(bounds.mean()), k / n_trials, margin, events
    )


@dataclass(frozen=True)
class ExactResult:
    exact_error: float
    exact_mean_bound: float
    stop_probability: float
    n_trajectories: int

    @property
    def holds(self) -> bool:
        return self.exact_error <= self.exact_mean_bound


class EnumerationTooLarge(ValueError):
    pass


def exact_small_enumeration(schedule: DynamicsSchedule, cfg: EscotConfig) -> ExactResult:
    """Exact stop-conditional error and expected bound by full enumeration."""
    space, steps = schedule.answer_space_size, schedule.total_steps
    if space ** steps > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"|A|^T = {space}^{steps} exceeds {MAX_ENUMERATION}")
    p = schedule.probs
    stop_mass = err_mass = bound_mass = 0.0
    count = 0
    for seq in itertools.product(range(1, space + 1), repeat=steps):
        prob = 1.0
        for t, x in enumerate(seq):
            prob *= p[t] if x == 1 else (1.0 - p[t]) / (space - 1)
            if prob == 0.0:
                break
        if prob == 0.0:
            continue
        count += 1
        res = process_trajectory(as_step_answers(seq), cfg)
        if not res.stopped:
            continue
        ev = stop_event(res.state.runs, res.stopped_answer, schedule)
        stop_mass += prob
        bound_mass += prob * ev.bound
        if not ev.stopped_correct:
            err_mass += prob
    if stop_mass == 0.0:
        return ExactResult(0.0, 0.0, 0.0, count)
    return ExactResult(err_mass / stop_mass, bound_mass / stop_mass, stop_mass, count)


# -- answer dynamics ----------------------------------------------------------


@dataclass
class DynamicsCurves:
    bins: int
    bin_edges: list[float]
    match_density: list[float]
    match_rate: list[float]
    run_points: list[tuple[float, float]]
    run_curve: list[Optional[float]]


def _bin_of(pos_num: int, pos_den: int, bins: int) -> int:
    # position pos_num/pos_den in (0, 1]; exact integer arithmetic
    return min((pos_num * bins - 1) // pos_den, bins - 1)


def dynamics_curves(
    records: Iterable[Sequence],
    bins: int = 10,
    finals: Optional[Sequence] = None,
) -> DynamicsCurves:
    """Where step answers agree with the final answer, and how runs grow.

    ``records`` are step-answer sequences (``None``/``NO_ANSWER`` for unparsed
    steps). The final answer of each record is ``finals[i]`` if given, else
    its last parsed answer. Match positions ``t/T`` are histogrammed into
    ``bins`` equal bins as a density (mean 1 over the unit interval) and as a
    per-bin agreement rate. Run lengths are placed at ``i/n`` for run ``i``
    of ``n`` and averaged per bin.
    """
    if bins < 1:
        raise ValueError("bins must be positive")
    match_counts = np.zeros(bins)
    step_counts = np.zeros(bins)
    run_sums = np.zeros(bins)
    run_counts = np.zeros(bins)
    points: list[tuple[float, float]] = []
    for i, rec in enumerate(records):
        rec = list(rec)
        steps = len(rec)
        if steps == 0:
            continue
        if finals is not None:
            final = finals[i]
        else:
            final = next((a for a in reversed(rec) if a is not None and a is not NO_ANSWER), NO_ANSWER)
        for t, a in enumerate(rec, 1):
            b = _bin_of(t, steps, bins)
            step_counts[b] += 1
            if a is not None and a is not NO_ANSWER and answers_equal(a, final):
                match_counts[b] += 1
        runs = runs_of(rec)
        for j, r in enumerate(runs, 1):
            points.append((j / len(runs), float(r)))
            b = _bin_of(j, len(runs), bins)
            run_sums[b] += r
            run_counts[b] += 1
    total = match_counts.sum()
    density = (match_counts / total * bins) if total else np.zeros(bins)
    rate = np.divide(match_counts, step_counts, out=np.zeros(bins), where=step_counts > 0)
    run_curve = [float(s / c) if c else None for s, c in zip(run_sums, run_counts)]
    return DynamicsCurves(
        bins,
        [b / bins for b in range(bins + 1)],
        density.tolist(),
        rate.tolist(),
        points,
        run_curve,
    )
