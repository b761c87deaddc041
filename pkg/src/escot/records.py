"""Trajectory records and the line-delimited JSON trace format.

One JSON object per line. Recognized keys::

    task_id          str
    prompt           full rendered prompt text
    question         user question (optional)
    cot_text         chain-of-thought text as generated (truncated at a stop)
    step_answers     [{step_index, raw, normalized, probe_tokens,
                       gen_tokens_through?}]   normalized null = no answer
    final_answer     str | null
    gold_answer      str | null
    stop_step        int | null
    stopped_answer   str | null
    gen_tokens       int   main-stream completion tokens
    probe_tokens     int   total probe cost (elicitation prompt + probe output)
    decision_trail   [{step_index, stop, reason, jump, t_stat, p_value}]
    status           "ok" | "failed"
    mode             escot | cot | full-trace | ...
    model, sampling  metadata

Unknown keys are kept in ``extra`` and written back unchanged.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from escot.answers import NO_ANSWER, Answer, StepAnswer, answer_from_json, answer_to_json
from escot.runjump import StopDecision

_KNOWN = {
    "task_id", "prompt", "question", "cot_text", "step_answers", "final_answer",
    "gold_answer", "stop_step", "stopped_answer", "gen_tokens", "probe_tokens",
    "decision_trail", "status", "mode", "model", "sampling",
}


@dataclass
class TrajectoryRecord:
    task_id: str
    prompt: str = ""
    question: Optional[str] = None
    cot_text: str = ""
    step_answers: Optional[list[StepAnswer]] = None
    # per-step cumulative main-stream tokens, parallel to step_answers
    gen_tokens_through: Optional[list[int]] = None
    final_answer: Optional[Answer] = None
    gold_answer: Optional[str] = None
    stop_step: Optional[int] = None
    stopped_answer: Optional[Answer] = None
    gen_tokens: int = 0
    probe_tokens: int = 0
    decision_trail: list[StopDecision] = field(default_factory=list)
    status: str = "ok"
    mode: str = "escot"
    model: Optional[str] = None
    sampling: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def total_tokens(self) -> int:
        return self.gen_tokens + self.probe_tokens

    @property
    def output_answer(self) -> Optional[Answer]:
        """What the method returns: the stopped answer, else the final one."""
        return self.stopped_answer if self.stop_step is not None else self.final_answer

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = dict(self.extra)
        d.update({
            "task_id": self.task_id,
            "prompt": self.prompt,
            "question": self.question,
            "cot_text": self.cot_text,
            "step_answers": None if self.step_answers is None else [
                _step_to_dict(a, None if self.gen_tokens_through is None else self.gen_tokens_through[i])
                for i, a in enumerate(self.step_answers)
            ],
            "final_answer": answer_to_json(self.final_answer),
            "gold_answer": self.gold_answer,
            "stop_step": self.stop_step,
            "stopped_answer": answer_to_json(self.stopped_answer),
            "gen_tokens": self.gen_tokens,
            "probe_tokens": self.probe_tokens,
            "decision_trail": [s.to_dict() for s in self.decision_trail],
            "status": self.status,
            "mode": self.mode,
            "model": self.model,
            "sampling": self.sampling,
        })
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrajectoryRecord:
        steps = d.get("step_answers")
        answers = through = None
        if steps is not None:
            answers = [
                StepAnswer(int(s["step_index"]), s.get("raw", ""), answer_from_json(s.get("normalized")),
                           int(s.get("probe_tokens", 0)))
                for s in steps
            ]
            if steps and all("gen_tokens_through" in s for s in steps):
                through = [int(s["gen_tokens_through"]) for s in steps]
        final = d.get("final_answer")
        stopped = d.get("stopped_answer")
        return cls(
            task_id=str(d["task_id"]),
            prompt=d.get("prompt", ""),
            question=d.get("question"),
            cot_text=d.get("cot_text", ""),
            step_answers=answers,
            gen_tokens_through=through,
            final_answer=None if final is None else final,
            gold_answer=d.get("gold_answer"),
            stop_step=d.get("stop_step"),
            stopped_answer=None if stopped is None else stopped,
            gen_tokens=int(d.get("gen_tokens", 0)),
            probe_tokens=int(d.get("probe_tokens", 0)),
            decision_trail=[StopDecision.from_dict(x) for x in d.get("decision_trail") or []],
            status=d.get("status", "ok"),
            mode=d.get("mode", "escot"),
            model=d.get("model"),
            sampling=d.get("sampling") or {},
            extra={k: v for k, v in d.items() if k not in _KNOWN},
        )


def _step_to_dict(a: StepAnswer, through: Optional[int]) -> dict[str, Any]:
    d = {
        "step_index": a.step_index,
        "raw": a.raw,
        "normalized": answer_to_json(a.normalized),
        "probe_tokens": a.probe_tokens,
    }
    if through is not None:
        d["gen_tokens_through"] = through
    return d


class TraceFormatError(ValueError):
    pass


def read_trace(path: str | os.PathLike) -> list[TrajectoryRecord]:
    return list(iter_trace(path))


def iter_trace(path: str | os.PathLike) -> Iterator[TrajectoryRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield TrajectoryRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise TraceFormatError(f"{path}:{lineno}: {exc}") from exc


def write_trace(path: str | os.PathLike, records: Iterable[TrajectoryRecord], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def read_tasks(path: str | os.PathLike) -> list[dict[str, Any]]:
    """Tasks file: one ``{task_id, question, gold_answer?}`` object per line."""
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "question" not in obj:
                raise TraceFormatError(f"{path}:{lineno}: task has no 'question'")
            obj.setdefault("task_id", str(lineno))
            obj["task_id"] = str(obj["task_id"])
            tasks.append(obj)
    return tasks


def answer_or_none(a: Optional[Answer]) -> Optional[Answer]:
    return None if a is NO_ANSWER else a
