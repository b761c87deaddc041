"""Step segmentation, answer elicitation context and answer normalization."""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass
from typing import Optional, Union

logger = logging.getLogger(__name__)

ELICIT_SUFFIX = "The final answer is"


class _Sentinel(enum.Enum):
    NO_ANSWER = "NO_ANSWER"

    def __repr__(self) -> str:
        return self.value

    def __bool__(self) -> bool:
        return False


NO_ANSWER = _Sentinel.NO_ANSWER
Answer = Union[str, _Sentinel]


@dataclass(frozen=True)
class Step:
    index: int
    text: str
    char_span: tuple[int, int]


@dataclass(frozen=True)
class StepAnswer:
    step_index: int
    raw: str
    normalized: Answer
    probe_tokens: int = 0

    def __post_init__(self):
        if self.probe_tokens < 0:
            raise ValueError("probe_tokens must be nonnegative")

    @classmethod
    def from_raw(cls, step_index: int, raw: str, probe_tokens: int = 0) -> StepAnswer:
        return cls(step_index, raw, normalize_answer(raw), probe_tokens)


def segment_steps(cot_text: str, complete: bool = True) -> list[Step]:
    """Split a chain of thought into newline-delimited steps.

    Blank or whitespace-only segments are dropped and the survivors are
    numbered from 1. A trailing segment with no newline after it is kept only
    when ``complete`` is true, i.e. the stream has finished.
    """
    steps: list[Step] = []
    start = 0
    n = len(cot_text)
    while start <= n:
        end = cot_text.find("\n", start)
        if end < 0:
            if not complete:
                break
            end = n
        segment = cot_text[start:end]
        if segment.strip():
            steps.append(Step(len(steps) + 1, segment, (start, end)))
        start = end + 1
    return steps


def build_probe_context(prompt: str, cot_prefix: str) -> str:
    """Context used to elicit the current answer after ``cot_prefix``."""
    return f"{prompt}{cot_prefix}\n{ELICIT_SUFFIX}"


@dataclass(frozen=True)
class ParsedAnswer:
    value: Answer
    unbalanced_box: bool = False


_BOX_RE = re.compile(r"\\boxed\s*\{")
_TRAILING_PUNCT = ".,;:!"
_WS_RE = re.compile(r"\s+")


def _boxed_contents(text: str) -> list[Optional[str]]:
    """Contents of every ``\\boxed{...}``; ``None`` marks an unbalanced box."""
    out: list[Optional[str]] = []
    for m in _BOX_RE.finditer(text):
        depth = 1
        i = m.end()
        while i < len(text):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    break
            i += 1
        out.append(text[m.end():i] if depth == 0 else None)
    return out


def _clean(s: str) -> str:
    prev = None
    while s != prev:
        prev = s
        s = s.strip()
        s = s.rstrip(_TRAILING_PUNCT).strip()
        if len(s) >= 2 and s[0] == "$" and s[-1] == "$":
            s = s[1:-1]
        boxes = _boxed_contents(s)
        if boxes and boxes[0] is not None and s.startswith("\\boxed"):
            m = _BOX_RE.match(s)
            if m and m.end() + len(boxes[0]) + 1 == len(s):
                s = boxes[0]
        s = _WS_RE.sub(" ", s)
    if s and all(ch.isalpha() or ch == " " for ch in s):
        s = s.lower()
    return s


def _parse_once(raw: str, last_box: bool) -> tuple[str, bool]:
    boxes = _boxed_contents(raw)
    unbalanced = any(b is None for b in boxes)
    good = [b for b in boxes if b is not None]
    if good:
        candidate = good[-1] if last_box else good[0]
    else:
        candidate = raw.split("\n", 1)[0]
        if unbalanced:
            # drop the dangling box opener so it cannot leak into the answer
            candidate = _BOX_RE.sub("", candidate)
    return _clean(candidate), unbalanced


def parse_answer(raw: str, *, last_box: bool = False) -> ParsedAnswer:
    """Normalize a probe continuation and report parse diagnostics.

    Takes the first ``\\boxed{}`` (the last one with ``last_box``), else the
    text before the first newline, then strips whitespace, trailing sentence
    punctuation and ``$...$`` and collapses internal whitespace. Purely
    alphabetic answers are lowercased so that letter choices compare without
    regard to case. Nested boxes are peeled until the result is stable.
    """
    value, unbalanced = _parse_once(raw, last_box)
    if unbalanced:
        logger.debug("unbalanced \\boxed in %r", raw)
    for _ in range(16):
        if "\\boxed" not in value:
            break
        again, _ = _parse_once(value, False)
        if again == value:
            break
        value = again
    return ParsedAnswer(value if value else NO_ANSWER, unbalanced)


def normalize_answer(raw: str) -> Answer:
    return parse_answer(raw).value


def extract_final_answer(completion: str) -> Answer:
    """Answer from the last ``\\boxed{}`` in a finished completion, if any."""
    if not any(b is not None for b in _boxed_contents(completion)):
        return NO_ANSWER
    return parse_answer(completion, last_box=True).value


def answers_equal(a: Answer, b: Answer) -> bool:
    """Normalized string equality; ``NO_ANSWER`` equals nothing, itself included."""
    if a is NO_ANSWER or b is NO_ANSWER:
        return False
    return a == b


def answer_to_json(a: Optional[Answer]) -> Optional[str]:
    return None if a is None or a is NO_ANSWER else a


def answer_from_json(v: Optional[str]) -> Answer:
    return NO_ANSWER if v is None else v
