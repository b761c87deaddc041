"""Live generation against an OpenAI-compatible server with early stopping.

The main chain of thought is streamed. Whenever a newline completes a
non-blank step, consumption of the stream pauses and a separate short probe
request asks for the current answer on ``prompt + cot_prefix + "\\nThe final
answer is"``. The answer is fed to the run-jump controller; on a stop the
stream is closed, so nothing beyond the in-flight chunk is consumed.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Optional, Protocol, Sequence, Union

import httpx

from escot.answers import (
    ELICIT_SUFFIX,
    NO_ANSWER,
    Answer,
    StepAnswer,
    answers_equal,
    build_probe_context,
    extract_final_answer,
)
from escot.records import TrajectoryRecord
from escot.runjump import EscotConfig, RunJumpController

logger = logging.getLogger(__name__)

SYSTEM_TEMPLATE = (
    "You are a helpful and harmless assistant. You are {model_name} developed by {developer}. "
    "You should think step-by-step and put your final answer within \\boxed{{}}."
)
_DEVELOPERS = {"qwq": ("QwQ", "Alibaba"), "qwen": ("Qwen", "Alibaba"), "deepseek": ("DeepSeek", "DeepSeek")}


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "http://localhost:8000"
    model: str = "Qwen/QwQ-32B"
    api_key_env: str = "ESCOT_API_KEY"
    temperature: float = 0.6
    top_p: Optional[float] = 0.9
    top_k: Optional[int] = None
    max_total_tokens: int = 16384
    probe_max_tokens: int = 32
    # tokens of the appended "\nThe final answer is"; charged to each probe
    probe_prompt_tokens: int = 5
    request_timeout: float = 600.0
    retry_attempts: int = 3
    backoff_base: float = 0.5
    api: str = "completions"  # completions | chat | reprompt
    parallelism: int = 4

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.probe_max_tokens < 1:
            raise ValueError("probe_max_tokens must be >= 1")
        if self.retry_attempts < 0:
            raise ValueError("retry_attempts must be >= 0")
        if self.api not in ("completions", "chat", "reprompt"):
            raise ValueError(f"unknown api mode {self.api!r}")


def build_messages(question: str, model: str) -> list[dict[str, str]]:
    key = next((k for k in _DEVELOPERS if k in model.lower()), None)
    name, dev = _DEVELOPERS.get(key, (model.split("/")[-1], "its developers"))
    return [
        {"role": "system", "content": SYSTEM_TEMPLATE.format(model_name=name, developer=dev)},
        {"role": "user", "content": question},
    ]


def render_chatml(messages: Sequence[Mapping[str, str]]) -> str:
    """ChatML rendering ending with an open assistant turn (Qwen family)."""
    body = "".join(f"<|im_start|>{m['role']}\n{m['content']}<|im_end|>\n" for m in messages)
    return body + "<|im_start|>assistant\n"


@dataclass(frozen=True)
class PromptParts:
    messages: tuple
    rendered: str


@dataclass(frozen=True)
class Chunk:
    text: str
    tokens: int = 1
    usage_completion_tokens: Optional[int] = None
    finish_reason: Optional[str] = None


@dataclass(frozen=True)
class Completion:
    text: str
    completion_tokens: int
    usage_reported: bool = False


class BackendError(RuntimeError):
    def __init__(self, message: str, status_code: Optional[int] = None):
        super().__init__(message)
        self.status_code = status_code


class CapabilityError(BackendError):
    pass


class Backend(Protocol):
    def prepare(self, question: str) -> PromptParts: ...

    def stream_cot(self, parts: PromptParts, *, max_tokens: int, temperature: float, seed: int) -> Iterator[Chunk]: ...

    def probe(self, parts: PromptParts, cot_prefix: str, *, seed: int) -> Completion: ...


_TOKEN_RE = re.compile(r"[^\S\n]*\S+|[^\S\n]*\n|[^\S\n]+")


def stub_tokenize(text: str) -> list[str]:
    """Word-ish tokens whose concatenation is exactly ``text``."""
    return _TOKEN_RE.findall(text)


_STUB_ANSWER_RE = re.compile(r"answer\s*(?:is|=|:)?\s*([^\s,;]+)", re.IGNORECASE)


def default_stub_probe(cot_prefix: str) -> str:
    """Reads ``answer X`` off the last non-blank line of the prefix."""
    lines = [ln for ln in cot_prefix.split("\n") if ln.strip()]
    if lines:
        m = _STUB_ANSWER_RE.search(lines[-1])
        if m:
            return f" \\boxed{{{m.group(1).rstrip('.')}}}."
    return " hmm"


class ScriptedBackend:
    """Deterministic in-process backend for tests and dry runs.

    ``cot`` maps a question (and seed, temperature) to the full chain of
    thought; ``probe_fn`` maps the probed prefix to the probe continuation.
    Every streamed chunk is one token from :func:`stub_tokenize`.
    """

    supports_continuation = True

    def __init__(
        self,
        cot: Union[Mapping[str, str], Callable[[str, int, float], str]],
        probe_fn: Callable[[str], str] = default_stub_probe,
        report_usage: bool = True,
        fail_questions: Sequence[str] = (),
    ):
        self._cot = cot
        self.probe_fn = probe_fn
        self.report_usage = report_usage
        self.fail_questions = set(fail_questions)
        self._lock = threading.Lock()
        self.emitted_tokens = 0
        self.usage_completion_tokens = 0
        self.requests = 0

    def cot_for(self, question: str, seed: int, temperature: float) -> str:
        if callable(self._cot):
            return self._cot(question, seed, temperature)
        return self._cot[question]

    def prepare(self, question: str) -> PromptParts:
        msgs = tuple(build_messages(question, "stub"))
        return PromptParts(msgs, render_chatml(msgs))

    def _question(self, parts: PromptParts) -> str:
        return parts.messages[-1]["content"]

    def stream_cot(self, parts, *, max_tokens, temperature, seed):
        question = self._question(parts)
        with self._lock:
            self.requests += 1
        if question in self.fail_questions:
            raise BackendError(f"scripted failure for {question!r}")
        tokens = stub_tokenize(self.cot_for(question, seed, temperature))[:max_tokens]
        for i, tok in enumerate(tokens):
            with self._lock:
                self.emitted_tokens += 1
            last = i == len(tokens) - 1
            usage = len(tokens) if (last and self.report_usage) else None
            if last and self.report_usage:
                with self._lock:
                    self.usage_completion_tokens += len(tokens)
            yield Chunk(tok, 1, usage, ("stop" if last else None))

    def probe(self, parts, cot_prefix, *, seed):
        with self._lock:
            self.requests += 1
        text = self.probe_fn(cot_prefix).split("\n", 1)[0]
        n = len(stub_tokenize(text))
        if self.report_usage:
            with self._lock:
                self.usage_completion_tokens += n
        return Completion(text, n, self.report_usage)


class OpenAIBackend:
    """OpenAI-compatible HTTP backend (``/v1/completions`` or ``/v1/chat/completions``)."""

    def __init__(self, config: BackendConfig, log_path: Optional[str] = None, client: Optional[httpx.Client] = None):
        self.config = config
        self.log_path = log_path
        self._log_lock = threading.Lock()
        key = os.environ.get(config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(
            base_url=config.base_url.rstrip("/"), headers=headers, timeout=config.request_timeout
        )

    @property
    def supports_continuation(self) -> bool:
        return self.config.api != "reprompt"

    def prepare(self, question: str) -> PromptParts:
        msgs = tuple(build_messages(question, self.config.model))
        return PromptParts(msgs, render_chatml(msgs))

    def _sampling(self, temperature: float, seed: int) -> dict:
        body = {"model": self.config.model, "temperature": temperature, "seed": seed}
        if self.config.top_p is not None and temperature > 0:
            body["top_p"] = self.config.top_p
        if self.config.top_k is not None and temperature > 0:
            body["top_k"] = self.config.top_k
        return body

    def _log(self, entry: dict) -> None:
        if not self.log_path:
            return
        with self._log_lock, open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")

    def _post(self, path: str, body: dict) -> dict:
        last_exc: Exception | None = None
        for attempt in range(self.config.retry_attempts + 1):
            try:
                resp = self.client.post(path, json=body)
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(f"HTTP {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                data = resp.json()
                self._log({"path": path, "request": body, "response": data})
                return data
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                if isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code < 500 \
                        and exc.response.status_code != 429:
                    raise BackendError(str(exc), exc.response.status_code) from exc
                last_exc = exc
                if attempt < self.config.retry_attempts:
                    time.sleep(self.config.backoff_base * 2 ** attempt)
        raise BackendError(f"{path} failed after {self.config.retry_attempts + 1} attempts: {last_exc}")

    def _stream_lines(self, path: str, body: dict) -> Iterator[dict]:
        attempt = 0
        while True:
            started = False
            try:
                with self.client.stream("POST", path, json=body) as resp:
                    if resp.status_code == 429 or resp.status_code >= 500:
                        raise httpx.HTTPStatusError(f"HTTP {resp.status_code}", request=resp.request, response=resp)
                    if resp.status_code >= 400:
                        raise BackendError(f"{path}: HTTP {resp.status_code}")
                    for line in resp.iter_lines():
                        if not line.startswith("data:"):
                            continue
                        payload = line[5:].strip()
                        if payload == "[DONE]":
                            return
                        started = True
                        yield json.loads(payload)
                    return
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                # a stream that already produced text cannot be replayed transparently
                if started or attempt >= self.config.retry_attempts:
                    raise BackendError(f"stream {path} failed: {exc}") from exc
                time.sleep(self.config.backoff_base * 2 ** attempt)
                attempt += 1

    def stream_cot(self, parts, *, max_tokens, temperature, seed):
        body = self._sampling(temperature, seed)
        body.update({"max_tokens": max_tokens, "stream": True, "stream_options": {"include_usage": True}})
        if self.config.api == "completions":
            path = "/v1/completions"
            body["prompt"] = parts.rendered
        else:
            path = "/v1/chat/completions"
            body["messages"] = list(parts.messages)
        self._log({"path": path, "request": body, "stream": True})
        for event in self._stream_lines(path, body):
            usage = (event.get("usage") or {}).get("completion_tokens")
            for choice in event.get("choices") or []:
                if "text" in choice:
                    text = choice.get("text") or ""
                else:
                    delta = choice.get("delta") or {}
                    text = (delta.get("reasoning_content") or "") + (delta.get("content") or "")
                if text or choice.get("finish_reason"):
                    yield Chunk(text, 1 if text else 0, None, choice.get("finish_reason"))
            if usage is not None:
                yield Chunk("", 0, int(usage), None)

    def probe(self, parts, cot_prefix, *, seed):
        cfg = self.config
        body = self._sampling(cfg.temperature, seed)
        body.update({"max_tokens": cfg.probe_max_tokens, "stop": ["\n"]})
        if cfg.api == "completions":
            path = "/v1/completions"
            body["prompt"] = build_probe_context(parts.rendered, cot_prefix)
            data = self._post(path, body)
            text = data["choices"][0].get("text", "")
        else:
            path = "/v1/chat/completions"
            msgs = list(parts.messages)
            if cfg.api == "chat":
                # continue a partial assistant turn (vLLM / SGLang convention)
                msgs.append({"role": "assistant", "content": f"{cot_prefix}\n{ELICIT_SUFFIX}"})
                body.update({"continue_final_message": True, "add_generation_prompt": False})
            else:
                msgs.append({"role": "assistant", "content": cot_prefix})
                msgs.append({"role": "user", "content": ELICIT_SUFFIX})
            body["messages"] = msgs
            try:
                data = self._post(path, body)
            except BackendError as exc:
                if cfg.api == "chat" and exc.status_code in (400, 422):
                    raise CapabilityError(
                        "server rejected assistant-prefix continuation; "
                        "use api='reprompt' (CLI: --api reprompt) to re-prompt with the transcript"
                    ) from exc
                raise
            text = data["choices"][0].get("message", {}).get("content") or ""
        usage = (data.get("usage") or {}).get("completion_tokens")
        text = text.split("\n", 1)[0]
        if usage is None:
            return Completion(text, max(1, len(stub_tokenize(text))) if text else 0, False)
        return Completion(text, int(usage), True)


# -- generation ---------------------------------------------------------------


@dataclass
class GenerationStats:
    usage_completion_tokens: int = 0
    usage_complete: bool = True
    requests: int = 0


def generate_with_escot(
    question: str,
    backend: Backend,
    bcfg: BackendConfig,
    ecfg: EscotConfig,
    *,
    task_id: str = "0",
    gold_answer: Optional[str] = None,
    seed: int = 0,
    temperature: Optional[float] = None,
    mode: str = "escot",
) -> TrajectoryRecord:
    """Generate one chain of thought, probing each step and stopping early.

    ``mode`` is ``escot`` (probe and stop), ``full-trace`` (probe every step
    but never stop; the trail still records what the rule would decide) or
    ``cot`` (no step probes; one final-answer parse at the end).
    """
    if mode not in ("escot", "full-trace", "cot"):
        raise ValueError(f"unknown mode {mode!r}")
    temp = bcfg.temperature if temperature is None else temperature
    parts = backend.prepare(question)
    rec = TrajectoryRecord(
        task_id=task_id, prompt=parts.rendered, question=question, gold_answer=gold_answer,
        mode=mode, model=bcfg.model,
        sampling={"temperature": temp, "top_p": bcfg.top_p, "top_k": bcfg.top_k, "seed": seed},
        step_answers=None if mode == "cot" else [],
        gen_tokens_through=None if mode == "cot" else [],
    )
    if not getattr(backend, "supports_continuation", True) or bcfg.api == "reprompt":
        rec.extra["probe_mode"] = "reprompt"
    ctl = RunJumpController(ecfg)
    stats = GenerationStats()
    cot = ""
    scan = 0
    chunk_tokens = 0
    usage_main: Optional[int] = None
    step_index = 0
    stopped = False

    def probe_step(end: int) -> bool:
        nonlocal step_index
        step_index += 1
        comp = backend.probe(parts, cot[:end], seed=seed * 100003 + step_index)
        _account(stats, comp)
        sa = StepAnswer.from_raw(step_index, comp.text, comp.completion_tokens + bcfg.probe_prompt_tokens)
        rec.step_answers.append(sa)
        rec.gen_tokens_through.append(chunk_tokens)
        rec.probe_tokens += sa.probe_tokens
        if ctl.stopped:
            return False
        decision = ctl.feed(sa)
        return decision.stop and mode == "escot"

    stream = backend.stream_cot(parts, max_tokens=bcfg.max_total_tokens, temperature=temp, seed=seed)
    stats.requests += 1
    try:
        for chunk in stream:
            cot += chunk.text
            chunk_tokens += chunk.tokens
            if chunk.usage_completion_tokens is not None:
                usage_main = chunk.usage_completion_tokens
            if mode == "cot":
                continue
            while True:
                nl = cot.find("\n", scan)
                if nl < 0:
                    break
                seg_start, scan = scan, nl + 1
                if cot[seg_start:nl].strip() and probe_step(nl):
                    stopped = True
                    break
            if stopped:
                break
        if not stopped and mode != "cot" and cot[scan:].strip():
            probe_step(len(cot))
    except CapabilityError:
        raise
    except BackendError as exc:
        logger.warning("task %s failed: %s", task_id, exc)
        rec.status = "failed"
        rec.extra["error"] = str(exc)
    finally:
        close = getattr(stream, "close", None)
        if close:
            close()

    rec.gen_tokens = usage_main if (usage_main is not None and not stopped) else chunk_tokens
    if usage_main is None:
        stats.usage_complete = False
    else:
        stats.usage_completion_tokens += usage_main
    if stopped:
        rec.cot_text = cot[:scan]
        rec.stop_step = step_index
        rec.stopped_answer = ctl.state.last_answer
    else:
        rec.cot_text = cot
    rec.decision_trail = list(ctl.trail)
    if rec.status == "ok" and not stopped:
        rec.final_answer = _final_answer(rec, backend, parts, cot, seed, stats, bcfg)
    rec.extra["usage_completion_tokens"] = stats.usage_completion_tokens if stats.usage_complete else None
    rec.extra["requests"] = stats.requests + len(rec.step_answers or [])
    return rec


def _account(stats: GenerationStats, comp: Completion) -> None:
    if comp.usage_reported:
        stats.usage_completion_tokens += comp.completion_tokens
    else:
        stats.usage_complete = False


def _final_answer(rec, backend, parts, cot, seed, stats, bcfg) -> Answer:
    boxed = extract_final_answer(cot)
    if boxed is not NO_ANSWER:
        return boxed
    if rec.step_answers:
        return rec.step_answers[-1].normalized
    comp = backend.probe(parts, cot.rstrip("\n"), seed=seed * 100003)
    _account(stats, comp)
    rec.probe_tokens += comp.completion_tokens + bcfg.probe_prompt_tokens
    rec.extra["final_probe"] = comp.text
    return StepAnswer.from_raw(1, comp.text).normalized


def assumption1_probe(question: str, backend: Backend, bcfg: BackendConfig, n_samples: int = 10) -> float:
    """Share of sampled final answers that agree with the greedy final answer."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    never = EscotConfig(d_min=float("inf"))
    greedy = generate_with_escot(question, backend, bcfg, never, seed=0, temperature=0.0, mode="cot")
    hits = 0
    for i in range(n_samples):
        rec = generate_with_escot(question, backend, bcfg, never, seed=i + 1, mode="cot")
        if answers_equal(rec.final_answer or NO_ANSWER, greedy.final_answer or NO_ANSWER):
            hits += 1
    return hits / n_samples


def majority_vote(answers: Sequence[Optional[Answer]], completion_order: Sequence[int]) -> Optional[Answer]:
    """Most common answer; ties go to the answer of the earliest-completing path.

    ``completion_order[i]`` ranks path ``i`` (smaller completes earlier).
    Missing answers do not vote.
    """
    counts = Counter(a for a in answers if a is not None and a is not NO_ANSWER)
    if not counts:
        return None
    best = max(counts.values())
    tied = {a for a, c in counts.items() if c == best}
    for i in sorted(range(len(answers)), key=lambda i: completion_order[i]):
        if answers[i] in tied:
            return answers[i]
    return None  # unreachable


@dataclass
class SelfConsistencyResult:
    voted_answer: Optional[Answer]
    records: list[TrajectoryRecord] = field(default_factory=list)
    failed: bool = False

    @property
    def mean_tokens(self) -> float:
        ok = [r for r in self.records if not r.failed]
        return sum(r.total_tokens for r in ok) / len(ok) if ok else 0.0


def vote_records(records: Sequence[TrajectoryRecord]) -> SelfConsistencyResult:
    """Vote over finished paths; a path completes earlier if it spent fewer tokens."""
    ok = [r for r in records if not r.failed]
    if not ok:
        return SelfConsistencyResult(None, list(records), failed=True)
    order = [(r.total_tokens, i) for i, r in enumerate(ok)]
    ranks = {key: rank for rank, key in enumerate(sorted(order))}
    voted = majority_vote([r.output_answer for r in ok], [ranks[k] for k in order])
    return SelfConsistencyResult(voted, list(records))


def self_consistency_run(
    question: str,
    backend: Backend,
    bcfg: BackendConfig,
    ecfg: EscotConfig,
    n_paths: int = 10,
    *,
    task_id: str = "0",
    gold_answer: Optional[str] = None,
    seed: int = 0,
    mode: str = "escot",
) -> SelfConsistencyResult:
    """``n_paths`` independent generations with distinct seeds, then a majority vote."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")

    def one(i: int) -> TrajectoryRecord:
        rec = generate_with_escot(question, backend, bcfg, ecfg, task_id=task_id,
                                  gold_answer=gold_answer, seed=seed + i, mode=mode)
        rec.extra["path"] = i
        return rec

    with ThreadPoolExecutor(max(1, min(bcfg.parallelism, n_paths))) as pool:
        records = list(pool.map(one, range(n_paths)))
    return vote_records(records)
