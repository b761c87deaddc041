"""Offline replay, metrics, sweeps, theory validation and live runs."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional, Sequence

from sklearn.model_selection import ParameterGrid

from escot.answers import NO_ANSWER, Answer, StepAnswer, answers_equal, normalize_answer, segment_steps
from escot.client import (
    Backend,
    BackendConfig,
    generate_with_escot,
    majority_vote,
    self_consistency_run,
)
from escot.estimator import RunJumpStopper
from escot.records import TrajectoryRecord
from escot.runjump import EscotConfig, process_trajectory
from escot.theory import (
    DynamicsSchedule,
    dynamics_curves,
    exact_small_enumeration,
    monte_carlo_error,
    sample_trajectories,
)

logger = logging.getLogger(__name__)


@dataclass
class TaskOutcome:
    task_id: str
    total_steps: int
    stop_step: Optional[int]
    stopped_answer: Optional[Answer]
    final_answer: Answer
    output_answer: Answer
    tokens: float
    full_tokens: float
    gold_answer: Optional[str] = None

    @property
    def stopped(self) -> bool:
        return self.stop_step is not None

    @property
    def overlap(self) -> bool:
        # a trajectory that ran to the end returns x_T itself
        return not self.stopped or answers_equal(self.output_answer, self.final_answer)

    @property
    def correct(self) -> Optional[bool]:
        if self.gold_answer is None:
            return None
        return answers_equal(self.output_answer, normalize_answer(str(self.gold_answer)))


@dataclass
class MetricsReport:
    n_tasks: int
    n_skipped: int = 0
    n_with_gold: int = 0
    accuracy: Optional[float] = None
    avg_tokens: float = 0.0
    avg_full_tokens: float = 0.0
    overlap_ratio: Optional[float] = None
    overlap_ratio_stopped: Optional[float] = None
    stop_rate: float = 0.0
    mean_stop_position: Optional[float] = None
    # every task counted; a run to completion exits at 1.0
    mean_exit_position: Optional[float] = None

    def as_row(self) -> dict[str, Any]:
        return asdict(self)

    def summary(self) -> str:
        def fmt(x):
            return "n/a" if x is None else (f"{x:.4f}" if isinstance(x, float) else str(x))
        parts = [f"{k}={fmt(v)}" for k, v in self.as_row().items()]
        return " ".join(parts)


def _mean(xs: Sequence[float]) -> Optional[float]:
    return sum(xs) / len(xs) if xs else None


def metrics_from_outcomes(outcomes: Sequence[TaskOutcome], n_skipped: int = 0) -> MetricsReport:
    n = len(outcomes)
    gold = [o for o in outcomes if o.gold_answer is not None]
    stopped = [o for o in outcomes if o.stopped]
    return MetricsReport(
        n_tasks=n,
        n_skipped=n_skipped,
        n_with_gold=len(gold),
        accuracy=_mean([1.0 if o.correct else 0.0 for o in gold]),
        avg_tokens=_mean([o.tokens for o in outcomes]) or 0.0,
        avg_full_tokens=_mean([o.full_tokens for o in outcomes]) or 0.0,
        overlap_ratio=_mean([1.0 if o.overlap else 0.0 for o in outcomes]),
        overlap_ratio_stopped=_mean([1.0 if o.overlap else 0.0 for o in stopped]),
        stop_rate=(len(stopped) / n) if n else 0.0,
        mean_stop_position=_mean([o.stop_step / o.total_steps for o in stopped]),
        mean_exit_position=_mean([(o.stop_step / o.total_steps) if o.stopped else 1.0 for o in outcomes]),
    )


def _last_parsed(record: TrajectoryRecord) -> Answer:
    for a in reversed(record.step_answers or []):
        if a.normalized is not NO_ANSWER:
            return a.normalized
    fa = record.final_answer
    return NO_ANSWER if fa is None else fa


def _gen_tokens_through(record: TrajectoryRecord, step: int) -> float:
    if record.gen_tokens_through is not None:
        return record.gen_tokens_through[step - 1]
    # no per-step counts recorded: prorate by characters
    steps = segment_steps(record.cot_text)
    if len(steps) >= step and record.cot_text:
        end = min(steps[step - 1].char_span[1] + 1, len(record.cot_text))
        return record.gen_tokens * end / len(record.cot_text)
    return record.gen_tokens * step / max(1, len(record.step_answers or []))


def replay_record(record: TrajectoryRecord, cfg: EscotConfig) -> TaskOutcome:
    answers = record.step_answers or []
    res = process_trajectory(answers, cfg)
    final = _last_parsed(record)
    full = float(record.gen_tokens + record.probe_tokens)
    if res.stopped:
        t = res.stop_step
        tokens = _gen_tokens_through(record, t) + sum(a.probe_tokens for a in answers[:t])
        output = res.stopped_answer
    else:
        tokens = full
        output = final
    return TaskOutcome(
        task_id=record.task_id,
        total_steps=len(answers),
        stop_step=res.stop_step,
        stopped_answer=res.stopped_answer,
        final_answer=final,
        output_answer=output,
        tokens=float(tokens),
        full_tokens=float(record.gen_tokens),
        gold_answer=record.gold_answer,
    )


@dataclass
class ReplayResult:
    outcomes: list[TaskOutcome]
    report: MetricsReport
    skipped: list[str] = field(default_factory=list)

    def outcomes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "total_steps", "stop_step", "stopped_answer", "final_answer",
                    "output_answer", "tokens", "overlap", "correct"])
        for o in self.outcomes:
            w.writerow([o.task_id, o.total_steps, _cell(o.stop_step), _cell(o.stopped_answer),
                        _cell(o.final_answer), _cell(o.output_answer), f"{o.tokens:.6g}",
                        int(o.overlap), _cell(o.correct)])
        return buf.getvalue()


def _cell(v) -> str:
    if v is None or v is NO_ANSWER:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    return str(v)


def replay(records: Iterable[TrajectoryRecord], cfg: EscotConfig, n_jobs: int = 1) -> ReplayResult:
    """Run the stopping rule over recorded traces; no network access."""
    usable, skipped = [], []
    for rec in records:
        if rec.failed or not rec.step_answers:
            skipped.append(rec.task_id)
            continue
        usable.append(rec)
    if skipped:
        logger.warning("skipped %d record(s) without step answers", len(skipped))
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            outcomes = list(pool.map(lambda r: replay_record(r, cfg), usable))
    else:
        outcomes = [replay_record(r, cfg) for r in usable]
    return ReplayResult(outcomes, metrics_from_outcomes(outcomes, len(skipped)), skipped)


@dataclass
class SweepCell:
    d_min: float
    alpha: float
    report: MetricsReport


def sweep(
    records: Sequence[TrajectoryRecord],
    d_mins: Sequence[float],
    alphas: Sequence[float],
    min_prior_diffs: int = 2,
    n_jobs: int = 1,
) -> list[SweepCell]:
    """One replay per ``(alpha, d_min)`` cell, ordered by alpha then d_min."""
    if not d_mins or not alphas:
        raise ValueError("sweep needs at least one d_min and one alpha")
    records = list(records)
    stopper = RunJumpStopper(min_prior_diffs=min_prior_diffs)
    cells = []
    for alpha in alphas:
        for params in ParameterGrid({"d_min": list(d_mins), "alpha": [alpha]}):
            cfg = stopper.set_params(**params).fit().config_
            cells.append(SweepCell(cfg.d_min, cfg.alpha, replay(records, cfg, n_jobs).report))
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    fields = list(MetricsReport(0).as_row())
    w = csv.DictWriter(buf, ["d_min", "alpha", *fields], lineterminator="\n")
    w.writeheader()
    for c in cells:
        w.writerow({"d_min": c.d_min, "alpha": c.alpha, **{k: _cell(v) for k, v in c.report.as_row().items()}})
    return buf.getvalue()


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(report.as_row()), lineterminator="\n")
    w.writeheader()
    w.writerow({k: _cell(v) for k, v in report.as_row().items()})
    return buf.getvalue()


# -- self-consistency over recorded paths ---------------------------------------


@dataclass
class SCTaskOutcome:
    task_id: str
    voted_answer: Optional[Answer]
    cot_voted_answer: Optional[Answer]
    n_paths: int
    mean_tokens: float
    mean_full_tokens: float
    gold_answer: Optional[str] = None


@dataclass
class SCReport:
    n_tasks: int
    accuracy: Optional[float]
    cot_accuracy: Optional[float]
    avg_tokens_per_path: float
    avg_full_tokens_per_path: float


def replay_self_consistency(records: Sequence[TrajectoryRecord], cfg: EscotConfig) -> tuple[list[SCTaskOutcome], SCReport]:
    """Majority vote of replayed paths per task, next to the vote of full paths."""
    groups: dict[str, list[TrajectoryRecord]] = {}
    for rec in records:
        groups.setdefault(rec.task_id, []).append(rec)
    outcomes = []
    for task_id, recs in groups.items():
        res = replay(recs, cfg)
        if not res.outcomes:
            continue
        es = _vote([(o.output_answer, o.tokens) for o in res.outcomes])
        full = _vote([(o.final_answer, o.full_tokens) for o in res.outcomes])
        gold = next((r.gold_answer for r in recs if r.gold_answer is not None), None)
        outcomes.append(SCTaskOutcome(
            task_id, es, full, len(res.outcomes),
            _mean([o.tokens for o in res.outcomes]), _mean([o.full_tokens for o in res.outcomes]), gold,
        ))

    def acc(attr: str) -> Optional[float]:
        g = [o for o in outcomes if o.gold_answer is not None]
        return _mean([1.0 if answers_equal(getattr(o, attr) or NO_ANSWER, normalize_answer(str(o.gold_answer)))
                       else 0.0 for o in g])

    report = SCReport(
        len(outcomes), acc("voted_answer"), acc("cot_voted_answer"),
        _mean([o.mean_tokens for o in outcomes]) or 0.0,
        _mean([o.mean_full_tokens for o in outcomes]) or 0.0,
    )
    return outcomes, report


def _vote(pairs: Sequence[tuple[Answer, float]]) -> Optional[Answer]:
    order = sorted(range(len(pairs)), key=lambda i: (pairs[i][1], i))
    rank = {i: r for r, i in enumerate(order)}
    return majority_vote([a for a, _ in pairs], [rank[i] for i in range(len(pairs))])


# -- theory validation -------------------------------------------------------


@dataclass
class TheoryCell:
    schedule: DynamicsSchedule
    cfg: EscotConfig
    kind: str  # exact | mc
    label: str = ""


@dataclass
class TheoryScenario:
    name: str
    cells: list[TheoryCell]
    trials: int = 100_000
    seed: int = 0


@dataclass
class TheoryRow:
    scenario: str
    cell: str
    kind: str
    space: int
    steps: int
    d_min: float
    alpha: float
    error: float
    bound: float
    margin: float
    stop_rate: float
    verdict: str
    note: str = ""


def _cell_label(s: DynamicsSchedule, cfg: EscotConfig, extra: str = "") -> str:
    return f"{s.name}{extra} |A|={s.answer_space_size} T={s.total_steps} d_min={cfg.d_min:g} alpha={cfg.alpha:g}"


EXACT_CONFIGS = (
    EscotConfig(d_min=1, alpha=0.05),
    EscotConfig(d_min=1, alpha=0.5),
    EscotConfig(d_min=2, alpha=0.2),
    EscotConfig(d_min=2, alpha=0.5),
)


def exact_grid() -> TheoryScenario:
    cells = []
    for steps in (6, 8, 10):
        schedules = [
            DynamicsSchedule.linear(2, steps),
            DynamicsSchedule.logistic(2, steps, midpoint=steps / 2, steepness=1.0),
            DynamicsSchedule.step(2, steps, change_at=steps // 2 + 1),
        ]
        for s in schedules:
            for cfg in EXACT_CONFIGS:
                cells.append(TheoryCell(s, cfg, "exact", _cell_label(s, cfg)))
    return TheoryScenario("theorem1-exact", cells)


def mc_grid(trials: int = 100_000, seed: int = 0) -> TheoryScenario:
    cells = []
    for space in (3, 5, 10):
        for mid in (15, 30):
            s = DynamicsSchedule.logistic(space, 60, midpoint=mid)
            for d_min in (3, 5):
                for alpha in (0.05, 0.2):
                    cfg = EscotConfig(d_min=d_min, alpha=alpha)
                    cells.append(TheoryCell(s, cfg, "mc", _cell_label(s, cfg, f"(mid={mid})")))
    return TheoryScenario("prop1-monte-carlo", cells, trials, seed)


def theorem1_mc_grid(trials: int = 100_000, seed: int = 0) -> TheoryScenario:
    s = DynamicsSchedule.logistic(2, 60, midpoint=20)
    cells = [TheoryCell(s, EscotConfig(d_min=d, alpha=a), "mc", _cell_label(s, EscotConfig(d_min=d, alpha=a), "(mid=20)"))
             for d in (3, 5) for a in (0.05, 0.2)]
    return TheoryScenario("theorem1-monte-carlo", cells, trials, seed)


def default_scenarios(trials: int = 100_000, seed: int = 0) -> list[TheoryScenario]:
    return [exact_grid(), theorem1_mc_grid(trials, seed), mc_grid(trials, seed)]


def validate_theory(scenarios: Sequence[TheoryScenario], n_jobs: int = 1) -> list[TheoryRow]:
    """Check the error bound on every cell; failures become rows, not exceptions."""
    rows = []
    for sc in scenarios:
        for cell in sc.cells:
            s, cfg = cell.schedule, cell.cfg
            base = dict(scenario=sc.name, cell=cell.label or _cell_label(s, cfg), kind=cell.kind,
                        space=s.answer_space_size, steps=s.total_steps, d_min=cfg.d_min, alpha=cfg.alpha)
            problems = s.violations()
            if cell.kind == "exact":
                r = exact_small_enumeration(s, cfg)
                error, bound, margin, rate = r.exact_error, r.exact_mean_bound, 0.0, r.stop_probability
            else:
                r = monte_carlo_error(s, cfg, sc.trials, sc.seed, n_jobs=n_jobs)
                error, bound, margin, rate = r.empirical_error, r.mean_bound, r.margin, r.stop_rate
            if problems:
                verdict, note = "ASSUMPTION_VIOLATED", "; ".join(problems)
            else:
                verdict, note = ("PASS" if error <= bound + margin else "FAIL"), ""
            rows.append(TheoryRow(**base, error=error, bound=bound, margin=margin,
                                  stop_rate=rate, verdict=verdict, note=note))
    return rows


def theory_csv(rows: Sequence[TheoryRow]) -> str:
    buf = io.StringIO()
    names = list(TheoryRow.__dataclass_fields__)
    w = csv.DictWriter(buf, names, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        for k in ("error", "bound", "margin", "stop_rate"):
            d[k] = f"{d[k]:.10g}"
        w.writerow(d)
    return buf.getvalue()


# -- dynamics ------------------------------------------------------------------


def record_answers(record: TrajectoryRecord) -> list[Answer]:
    return [a.normalized for a in (record.step_answers or [])]


def dynamics_report(sequences: Sequence[Sequence[Answer]], bins: int = 10) -> dict[str, str]:
    """The two answer-dynamics curves as CSV tables keyed by table name."""
    usable = [s for s in sequences if len(s) > 0]
    if not usable:
        raise ValueError("dynamics_report needs at least one non-empty record")
    curves = dynamics_curves(usable, bins)
    match = io.StringIO()
    w = csv.writer(match, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "match_density", "match_rate"])
    for i in range(bins):
        w.writerow([f"{curves.bin_edges[i]:.6g}", f"{curves.bin_edges[i + 1]:.6g}",
                    f"{curves.match_density[i]:.6g}", f"{curves.match_rate[i]:.6g}"])
    runs = io.StringIO()
    w = csv.writer(runs, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "mean_run_length"])
    for i in range(bins):
        v = curves.run_curve[i]
        w.writerow([f"{curves.bin_edges[i]:.6g}", f"{curves.bin_edges[i + 1]:.6g}", "" if v is None else f"{v:.6g}"])
    points = io.StringIO()
    w = csv.writer(points, lineterminator="\n")
    w.writerow(["run_position", "run_length"])
    for x, r in curves.run_points:
        w.writerow([f"{x:.6g}", f"{r:g}"])
    return {"match_density": match.getvalue(), "run_curve": runs.getvalue(), "run_points": points.getvalue()}


# -- synthetic traces ------------------------------------------------------------


def synthetic_records(
    schedule: DynamicsSchedule,
    n: int,
    seed: int = 0,
    tokens_per_step: int = 20,
    probe_tokens: int = 6,
) -> list[TrajectoryRecord]:
    """Full (never stopped) traces drawn from a schedule, for replay and sweeps."""
    X = sample_trajectories(schedule, n, seed)
    out = []
    for i, row in enumerate(X):
        answers = [StepAnswer(t, str(v), str(v), probe_tokens) for t, v in enumerate(row.tolist(), 1)]
        steps = schedule.total_steps
        out.append(TrajectoryRecord(
            task_id=f"sim-{i}",
            cot_text="".join(f"step {t}\n" for t in range(1, steps + 1)),
            step_answers=answers,
            gen_tokens_through=[tokens_per_step * t for t in range(1, steps + 1)],
            final_answer="1",
            gold_answer="1",
            gen_tokens=tokens_per_step * steps,
            probe_tokens=probe_tokens * steps,
            mode="simulated",
            sampling={"seed": seed, "schedule": schedule.name, "space": schedule.answer_space_size},
        ))
    return out


# -- live ------------------------------------------------------------------------


@dataclass
class LiveResult:
    records: list[TrajectoryRecord]
    report: MetricsReport
    voted: dict[str, Optional[Answer]] = field(default_factory=dict)

    @property
    def all_failed(self) -> bool:
        return bool(self.records) and all(r.failed for r in self.records)


LIVE_MODES = ("escot", "cot", "full-trace", "escot+sc", "cot+sc")


def live(
    tasks: Sequence[dict],
    backend: Backend,
    bcfg: BackendConfig,
    ecfg: EscotConfig,
    mode: str = "escot",
    n_paths: int = 10,
    seed: int = 0,
) -> LiveResult:
    """Drive the backend over every task; per-task failures are recorded, not raised."""
    if mode not in LIVE_MODES:
        raise ValueError(f"mode must be one of {LIVE_MODES}")
    base_mode, sc = mode.split("+")[0], mode.endswith("+sc")

    def run_task(task: dict) -> tuple[list[TrajectoryRecord], Optional[Answer]]:
        kwargs = dict(task_id=task["task_id"], gold_answer=task.get("gold_answer"), seed=seed)
        if sc:
            res = self_consistency_run(task["question"], backend, bcfg, ecfg, n_paths, mode=base_mode, **kwargs)
            return res.records, res.voted_answer
        rec = generate_with_escot(task["question"], backend, bcfg, ecfg, mode=base_mode, **kwargs)
        return [rec], rec.output_answer

    workers = 1 if sc else max(1, bcfg.parallelism)
    with ThreadPoolExecutor(workers) as pool:
        results = list(pool.map(run_task, tasks))
    records = [r for recs, _ in results for r in recs]
    voted = {t["task_id"]: v for t, (_, v) in zip(tasks, results)}

    outcomes = []
    for task, (recs, answer) in zip(tasks, results):
        ok = [r for r in recs if not r.failed]
        if not ok:
            continue
        mean_tokens = sum(r.total_tokens for r in ok) / len(ok)
        stopped = [r for r in ok if r.stop_step is not None]
        first = ok[0]
        steps = len(first.step_answers or [])
        outcomes.append(TaskOutcome(
            task_id=task["task_id"],
            total_steps=max(steps, 1),
            stop_step=first.stop_step if not sc and stopped else None,
            stopped_answer=first.stopped_answer if not sc else None,
            final_answer=answer if answer is not None else NO_ANSWER,
            output_answer=answer if answer is not None else NO_ANSWER,
            tokens=mean_tokens,
            full_tokens=sum(r.gen_tokens for r in ok) / len(ok),
            gold_answer=task.get("gold_answer"),
        ))
    report = metrics_from_outcomes(outcomes, n_skipped=len(tasks) - len(outcomes))
    # the full-length answer of an early-stopped run is never observed live
    report.overlap_ratio = report.overlap_ratio_stopped = None
    report.mean_stop_position = report.mean_exit_position = None
    report.stop_rate = (sum(1 for r in records if not r.failed and r.stop_step is not None)
                        / max(1, sum(1 for r in records if not r.failed)))
    return LiveResult(records, report, voted)


def finite_or_inf(x: str) -> float:
    return math.inf if x.lower() in ("inf", "infinity", "none") else float(x)
