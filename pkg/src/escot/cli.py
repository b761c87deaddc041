"""Command line entry point: ``escot <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from escot import harness
from escot.client import BackendConfig, OpenAIBackend
from escot.records import read_tasks, read_trace, write_trace
from escot.runjump import EscotConfig
from escot.theory import DynamicsSchedule, monte_carlo_error, sample_trajectories

logger = logging.getLogger("escot")


def _float_list(s: str) -> list[float]:
    return [harness.finite_or_inf(x) for x in s.split(",") if x.strip()]


def _add_escot_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-min", type=harness.finite_or_inf, default=10, help="minimum run-length jump (inf disables stopping)")
    p.add_argument("--alpha", type=float, default=0.05, help="t-test significance level")
    p.add_argument("--min-prior-diffs", type=int, default=2)


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tasks", required=True, help="JSONL file of {task_id, question, gold_answer?}")
    p.add_argument("--base-url", default="http://localhost:8000")
    p.add_argument("--model", default="Qwen/QwQ-32B")
    p.add_argument("--api", choices=["completions", "chat", "reprompt"], default="completions")
    p.add_argument("--api-key-env", default="ESCOT_API_KEY")
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=16384)
    p.add_argument("--parallelism", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-requests", action="store_true", help="append raw requests to OUT/requests.jsonl")


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--space", type=int, default=2, help="answer-space size |A|")
    p.add_argument("--steps", type=int, default=60, help="steps per trajectory T")
    p.add_argument("--schedule", choices=["linear", "logistic", "step", "constant"], default="logistic")
    p.add_argument("--midpoint", type=float, default=None, help="logistic midpoint (default T/3)")
    p.add_argument("--steepness", type=float, default=0.3)
    p.add_argument("--change-at", type=int, default=None, help="step-schedule switch step (default T/2)")
    p.add_argument("--low", type=float, default=0.3)
    p.add_argument("--high", type=float, default=0.8)
    p.add_argument("--p", type=float, default=1.0, help="constant-schedule probability")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escot", description="Early stopping of chain-of-thought by run-length jumps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("replay", help="replay a recorded trace offline")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)
    _add_escot_flags(p)

    p = sub.add_parser("sweep", help="replay over a d_min x alpha grid")
    p.add_argument("--trace", required=True)
    p.add_argument("--d-min", type=_float_list, default=[3, 5, 7, 10, 15, 20])
    p.add_argument("--alpha", type=_float_list, default=[0.01, 0.05, 0.1, 0.2])
    p.add_argument("--min-prior-diffs", type=int, default=2)
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("simulate", help="Monte Carlo error vs bound for a synthetic schedule")
    _add_schedule_flags(p)
    _add_escot_flags(p)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--emit-trace", type=int, default=0, metavar="N", help="also write N synthetic traces")
    p.add_argument("--out", default=None)

    p = sub.add_parser("validate-theory", help="check the error bounds on the default grids")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--only", choices=["exact", "mc", "all"], default="all")
    p.add_argument("--out", default=None)

    p = sub.add_parser("dynamics", help="answer-dynamics curves from a trace or a simulation")
    p.add_argument("--trace", default=None)
    _add_schedule_flags(p)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", default=None)

    for name, help_ in (("live", "drive a live backend"), ("sc", "self-consistency")):
        p = sub.add_parser(name, help=help_)
        _add_backend_flags(p)
        _add_escot_flags(p)
        if name == "live":
            p.add_argument("--mode", choices=list(harness.LIVE_MODES), default="escot")
        else:
            p.add_argument("--mode", choices=["escot", "cot"], default="escot")
            p.add_argument("--trace", default=None, help="vote over recorded paths instead of calling a backend")
        p.add_argument("--paths", type=int, default=10)
        p.add_argument("--out", default="escot-out")
    # sc can run offline from a trace, so the tasks file is optional there
    for action in sub.choices["sc"]._actions:
        if action.dest == "tasks":
            action.required = False
    return parser


def _escot_config(args) -> EscotConfig:
    return EscotConfig(d_min=args.d_min, alpha=args.alpha, min_prior_diffs=args.min_prior_diffs)


def _schedule(args) -> DynamicsSchedule:
    T = args.steps
    if args.schedule == "linear":
        return DynamicsSchedule.linear(args.space, T)
    if args.schedule == "logistic":
        mid = args.midpoint if args.midpoint is not None else T / 3
        return DynamicsSchedule.logistic(args.space, T, mid, args.steepness)
    if args.schedule == "step":
        return DynamicsSchedule.step(args.space, T, args.change_at or T // 2, args.low, args.high)
    return DynamicsSchedule.constant(args.space, T, args.p)


def _emit(out: Optional[str], name: str, text: str) -> None:
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text, encoding="utf-8")
        logger.info("wrote %s", path / name)
    else:
        sys.stdout.write(text)


def cmd_replay(args) -> int:
    res = harness.replay(read_trace(args.trace), _escot_config(args), args.jobs)
    _emit(args.out, "replay_tasks.csv", res.outcomes_csv())
    _emit(args.out, "replay_report.csv", harness.report_csv(res.report))
    print(res.report.summary(), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    cells = harness.sweep(read_trace(args.trace), args.d_min, args.alpha, args.min_prior_diffs, args.jobs)
    _emit(args.out, "sweep.csv", harness.sweep_csv(cells))
    return 0


def cmd_simulate(args) -> int:
    schedule = _schedule(args)
    cfg = _escot_config(args)
    res = monte_carlo_error(schedule, cfg, args.trials, args.seed, n_jobs=args.jobs)
    lines = ["k,q,r_prev,r_stop,p_q1,stopped_correct,bound"]
    lines += [f"{e.k},{e.q},{e.r_prev},{e.r_stop},{e.p_q1:.10g},{int(e.stopped_correct)},{e.bound:.10g}"
              for e in res.events]
    if args.out:
        _emit(args.out, "events.csv", "\n".join(lines) + "\n")
    summary = {
        "trials": res.n_trials, "stopped": res.n_stopped, "stop_rate": res.stop_rate,
        "empirical_error": res.empirical_error, "mean_bound": res.mean_bound,
        "margin_99": res.margin, "holds": res.holds, "assumption_violations": schedule.violations(),
    }
    print(json.dumps(summary, indent=2))
    if args.emit_trace:
        recs = harness.synthetic_records(schedule, args.emit_trace, args.seed)
        path = write_trace(Path(args.out or ".") / "synthetic_trace.jsonl", recs)
        logger.info("wrote %s", path)
    return 0


def cmd_validate(args) -> int:
    scenarios = []
    if args.only in ("exact", "all"):
        scenarios.append(harness.exact_grid())
    if args.only in ("mc", "all"):
        scenarios += [harness.theorem1_mc_grid(args.trials, args.seed), harness.mc_grid(args.trials, args.seed)]
    rows = harness.validate_theory(scenarios, n_jobs=args.jobs)
    _emit(args.out, "theory.csv", harness.theory_csv(rows))
    failed = [r for r in rows if r.verdict == "FAIL"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells pass", file=sys.stderr)
    return 1 if failed else 0


def cmd_dynamics(args) -> int:
    if args.trace:
        seqs = [harness.record_answers(r) for r in read_trace(args.trace)]
    else:
        seqs = [[str(v) for v in row] for row in sample_trajectories(_schedule(args), args.trials, args.seed).tolist()]
    tables = harness.dynamics_report(seqs, args.bins)
    for name, text in tables.items():
        if args.out:
            _emit(args.out, f"{name}.csv", text)
        elif name != "run_points":
            sys.stdout.write(f"# {name}\n{text}")
    return 0


def _backend(args):
    bcfg = BackendConfig(
        base_url=args.base_url, model=args.model, api_key_env=args.api_key_env,
        temperature=args.temperature, top_p=args.top_p, top_k=args.top_k,
        max_total_tokens=args.max_tokens, api=args.api, parallelism=args.parallelism,
    )
    log_path = None
    if args.log_requests:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        log_path = str(Path(args.out) / "requests.jsonl")
    return bcfg, OpenAIBackend(bcfg, log_path=log_path)


def cmd_live(args, mode: Optional[str] = None) -> int:
    bcfg, backend = _backend(args)
    tasks = read_tasks(args.tasks)
    res = harness.live(tasks, backend, bcfg, _escot_config(args), mode or args.mode, args.paths, args.seed)
    write_trace(Path(args.out) / "trace.jsonl", res.records)
    _emit(args.out, "live_report.csv", harness.report_csv(res.report))
    print(res.report.summary(), file=sys.stderr)
    return 2 if res.all_failed else 0


def cmd_sc(args) -> int:
    if args.trace:
        outcomes, report = harness.replay_self_consistency(read_trace(args.trace), _escot_config(args))
        lines = ["task_id,voted_answer,cot_voted_answer,n_paths,mean_tokens,mean_full_tokens"]
        lines += [f"{o.task_id},{o.voted_answer or ''},{o.cot_voted_answer or ''},{o.n_paths},"
                  f"{o.mean_tokens:.6g},{o.mean_full_tokens:.6g}" for o in outcomes]
        _emit(args.out, "sc_tasks.csv", "\n".join(lines) + "\n")
        print(json.dumps(report.__dict__), file=sys.stderr)
        return 0
    if not args.tasks:
        print("sc needs --tasks or --trace", file=sys.stderr)
        return 2
    return cmd_live(args, mode=f"{args.mode}+sc")


COMMANDS = {
    "replay": cmd_replay,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "validate-theory": cmd_validate,
    "dynamics": cmd_dynamics,
    "live": cmd_live,
    "sc": cmd_sc,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"escot: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
