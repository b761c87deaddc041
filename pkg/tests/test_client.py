import json
import math

import httpx
import pytest

from escot.answers import NO_ANSWER, StepAnswer, extract_final_answer, segment_steps
from escot.client import (
    BackendConfig,
    BackendError,
    CapabilityError,
    OpenAIBackend,
    ScriptedBackend,
    assumption1_probe,
    build_messages,
    default_stub_probe,
    generate_with_escot,
    majority_vote,
    render_chatml,
    self_consistency_run,
    stub_tokenize,
)
from escot.runjump import EscotConfig, process_trajectory
from stubs import stub_cot

BCFG = BackendConfig(parallelism=2)
ECFG = EscotConfig(d_min=3, alpha=0.2)


def stub(**kw):
    return ScriptedBackend(lambda q, seed, temp: stub_cot(q, seed, temp), **kw)


def oracle_answers(cot: str) -> list[StepAnswer]:
    """Step answers a perfect pause-and-probe would see on the full text."""
    out = []
    for s in segment_steps(cot):
        prefix = cot[: s.char_span[1]]
        out.append(StepAnswer.from_raw(s.index, default_stub_probe(prefix)))
    return out


def test_prompt_template():
    msgs = build_messages("What is 2+2?", "Qwen/QwQ-32B")
    assert msgs[0]["content"].startswith("You are a helpful and harmless assistant. You are QwQ")
    assert "put your final answer within \\boxed{}." in msgs[0]["content"]
    assert msgs[1] == {"role": "user", "content": "What is 2+2?"}
    assert render_chatml(msgs).endswith("<|im_start|>assistant\n")


def test_stub_tokenize_is_lossless():
    for text in ("a b\n\nc  d\n", "", "x", stub_cot("q", 3)):
        assert "".join(stub_tokenize(text)) == text


@pytest.mark.parametrize("question", [f"question {i}" for i in range(15)])
def test_live_matches_text_oracle(question):
    rec = generate_with_escot(question, stub(), BCFG, ECFG, seed=1)
    cot = stub_cot(question, 1)
    want = oracle_answers(cot)
    res = process_trajectory(want, ECFG)
    assert [a.normalized for a in rec.step_answers] == [a.normalized for a in want[: len(rec.step_answers)]]
    assert rec.stop_step == res.stop_step
    assert rec.stopped_answer == res.stopped_answer
    assert rec.decision_trail == res.trail
    if rec.stop_step is not None:
        assert len(segment_steps(rec.cot_text)) == rec.stop_step and rec.final_answer is None
    else:
        assert rec.cot_text == cot and rec.final_answer == extract_final_answer(cot)


def test_abort_on_stop_consumes_no_extra_tokens():
    stopped = 0
    for i in range(30):
        backend = stub()
        rec = generate_with_escot(f"question {i}", backend, BCFG, ECFG, seed=0)
        if rec.stop_step is None:
            continue
        stopped += 1
        assert backend.emitted_tokens == rec.gen_tokens == rec.gen_tokens_through[-1]
        assert backend.emitted_tokens == len(stub_tokenize(rec.cot_text))
        assert backend.emitted_tokens < len(stub_tokenize(stub_cot(f"question {i}", 0)))
    assert stopped >= 10


@pytest.mark.parametrize("prompt_tokens", [0, 5])
def test_token_conservation(prompt_tokens):
    bcfg = BackendConfig(probe_prompt_tokens=prompt_tokens)
    never = EscotConfig(d_min=math.inf)
    for i in range(10):
        backend = stub()
        rec = generate_with_escot(f"question {i}", backend, bcfg, never)
        n = len(rec.step_answers)
        assert rec.probe_tokens == sum(a.probe_tokens for a in rec.step_answers)
        assert rec.total_tokens == backend.usage_completion_tokens + prompt_tokens * n
        assert rec.extra["usage_completion_tokens"] == backend.usage_completion_tokens
        assert rec.extra["requests"] == backend.requests == n + 1


def test_infinite_d_min_is_plain_cot():
    for i in range(5):
        q = f"question {i}"
        rec = generate_with_escot(q, stub(), BCFG, EscotConfig(d_min=math.inf), seed=2)
        cot = generate_with_escot(q, stub(), BCFG, EscotConfig(d_min=math.inf), seed=2, mode="cot")
        assert rec.stop_step is None and rec.stopped_answer is None
        assert rec.cot_text == cot.cot_text and rec.final_answer == cot.final_answer
        assert rec.gen_tokens == cot.gen_tokens
        assert cot.step_answers is None and cot.probe_tokens == 0


def test_garbage_probe_never_stops():
    rec = generate_with_escot("question 3", stub(probe_fn=lambda p: " ???"), BCFG, EscotConfig(d_min=1, alpha=0.5))
    assert rec.step_answers and all(a.normalized == "???" for a in rec.step_answers)
    rec = generate_with_escot("question 3", stub(probe_fn=lambda p: "   "), BCFG, EscotConfig(d_min=1, alpha=0.5))
    assert all(a.normalized is NO_ANSWER for a in rec.step_answers)
    assert rec.stop_step is None and rec.cot_text == stub_cot("question 3", 0)
    assert rec.final_answer is not None


def test_full_trace_mode_records_every_step():
    q = "question 4"
    full = generate_with_escot(q, stub(), BCFG, ECFG, mode="full-trace")
    assert full.stop_step is None and len(full.step_answers) == len(segment_steps(stub_cot(q, 0)))
    es = generate_with_escot(q, stub(), BCFG, ECFG)
    assert full.decision_trail[: len(es.decision_trail)] == es.decision_trail


def test_final_probe_when_no_box():
    backend = ScriptedBackend({"q": "thinking\nstill thinking"}, probe_fn=lambda p: " 41.")
    rec = generate_with_escot("q", backend, BCFG, EscotConfig(d_min=math.inf), mode="cot")
    assert rec.final_answer == "41" and rec.probe_tokens == 1 + BCFG.probe_prompt_tokens


def test_backend_failure_marks_record():
    rec = generate_with_escot("bad", stub(fail_questions=["bad"]), BCFG, ECFG, task_id="x")
    assert rec.status == "failed" and "scripted failure" in rec.extra["error"]


def test_determinism():
    a = generate_with_escot("question 8", stub(), BCFG, ECFG, seed=4)
    b = generate_with_escot("question 8", stub(), BCFG, ECFG, seed=4)
    assert a.to_json() == b.to_json()


def test_assumption1_shares():
    always = ScriptedBackend(lambda q, s, t: "work\n\\boxed{42}")
    assert assumption1_probe("q", always, BCFG, 10) == 1.0
    alternating = ScriptedBackend(lambda q, s, t: f"work\n\\boxed{{{42 if s % 2 else 41}}}")
    assert assumption1_probe("q", alternating, BCFG, 10) == 0.5
    with pytest.raises(ValueError):
        assumption1_probe("q", always, BCFG, 0)


def test_majority_vote_rules():
    assert majority_vote(["A", "A", "B"], [0, 1, 2]) == "A"
    assert majority_vote(["A", "B"], [1, 0]) == "B"
    assert majority_vote(["A", "B"], [0, 1]) == "A"
    assert majority_vote([NO_ANSWER, None, "C"], [0, 1, 2]) == "C"
    assert majority_vote([None, NO_ANSWER], [0, 1]) is None


def test_self_consistency_single_path_equals_plain_run():
    sc = self_consistency_run("question 5", stub(), BCFG, ECFG, n_paths=1, seed=3)
    plain = generate_with_escot("question 5", stub(), BCFG, ECFG, seed=3)
    rec = sc.records[0]
    rec.extra.pop("path")
    assert rec.to_json() == plain.to_json()
    assert sc.voted_answer == plain.output_answer


def test_self_consistency_tie_goes_to_cheaper_path():
    cots = {0: "a\n" * 9 + "\\boxed{1}", 1: "b\n" * 2 + "\\boxed{2}"}
    backend = ScriptedBackend(lambda q, s, t: cots[s], probe_fn=lambda p: " x")
    sc = self_consistency_run("q", backend, BCFG, EscotConfig(d_min=math.inf), n_paths=2, mode="cot")
    assert sc.voted_answer == "2"


def test_self_consistency_failures():
    failing = stub(fail_questions=["q"])
    sc = self_consistency_run("q", failing, BCFG, ECFG, n_paths=3)
    assert sc.failed and sc.voted_answer is None
    with pytest.raises(ValueError):
        self_consistency_run("q", failing, BCFG, ECFG, n_paths=0)


def test_config_validation():
    for bad in (dict(temperature=-1), dict(probe_max_tokens=0), dict(retry_attempts=-1), dict(api="grpc")):
        with pytest.raises(ValueError):
            BackendConfig(**bad)


# -- HTTP backend over a mock transport ---------------------------------------


def sse(events):
    body = "".join(f"data: {json.dumps(e)}\n\n" for e in events) + "data: [DONE]\n\n"
    return httpx.Response(200, content=body.encode(), headers={"content-type": "text/event-stream"})


class FakeServer:
    """Answers completions requests; the CoT is streamed one line per event."""

    def __init__(self, cot, api="completions", fail_first=0, reject_prefix=False):
        self.cot = cot
        self.api = api
        self.fail_first = fail_first
        self.reject_prefix = reject_prefix
        self.requests = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append((request.url.path, body))
        if self.fail_first:
            self.fail_first -= 1
            return httpx.Response(503)
        if body.get("stream"):
            pieces = [ln + "\n" for ln in self.cot.split("\n")]
            pieces[-1] = pieces[-1].rstrip("\n")
            if request.url.path.endswith("/chat/completions"):
                events = [{"choices": [{"delta": {"content": p}, "finish_reason": None}]} for p in pieces]
            else:
                events = [{"choices": [{"text": p, "finish_reason": None}]} for p in pieces]
            events.append({"choices": [], "usage": {"completion_tokens": len(pieces) * 3}})
            return sse(events)
        if self.reject_prefix and body.get("continue_final_message"):
            return httpx.Response(400, json={"error": "unsupported"})
        if request.url.path.endswith("/chat/completions"):
            prefix = body["messages"][-1]["content"] if self.api == "chat" else body["messages"][-2]["content"]
            text = default_stub_probe(prefix.replace("\nThe final answer is", ""))
            return httpx.Response(200, json={"choices": [{"message": {"content": text}}], "usage": {"completion_tokens": 2}})
        prefix = body["prompt"].rsplit("<|im_start|>assistant\n", 1)[1].replace("\nThe final answer is", "")
        return httpx.Response(200, json={"choices": [{"text": default_stub_probe(prefix)}], "usage": {"completion_tokens": 2}})


COT = "\n".join([f"answer {x}" for x in ["1", "2", "3", "2", "4", "4"] + ["5"] * 12]) + "\n\\boxed{5}"


def http_backend(server, **cfg):
    bcfg = BackendConfig(backoff_base=0.0, **cfg)
    client = httpx.Client(transport=httpx.MockTransport(server), base_url="http://test")
    return bcfg, OpenAIBackend(bcfg, client=client)


@pytest.mark.parametrize("api", ["completions", "chat", "reprompt"])
def test_http_backend_matches_scripted(api):
    server = FakeServer(COT, api=api)
    bcfg, backend = http_backend(server, api=api)
    rec = generate_with_escot("q", backend, bcfg, EscotConfig(d_min=3, alpha=0.2))
    ref = generate_with_escot("q", ScriptedBackend({"q": COT}), bcfg, EscotConfig(d_min=3, alpha=0.2))
    assert rec.stop_step == ref.stop_step is not None
    assert [a.normalized for a in rec.step_answers] == [a.normalized for a in ref.step_answers]
    assert (rec.extra.get("probe_mode") == "reprompt") == (api == "reprompt")
    path, body = server.requests[1]
    assert body["max_tokens"] == 32 and body["stop"] == ["\n"]
    if api == "completions":
        assert body["prompt"].endswith("answer 1\nThe final answer is")
    elif api == "chat":
        assert body["continue_final_message"] and body["messages"][-1]["role"] == "assistant"
    else:
        assert body["messages"][-1] == {"role": "user", "content": "The final answer is"}


def test_http_sampling_parameters_sent():
    server = FakeServer(COT)
    bcfg, backend = http_backend(server, top_k=20)
    generate_with_escot("q", backend, bcfg, EscotConfig(d_min=math.inf), seed=9)
    _, body = server.requests[0]
    assert body["temperature"] == 0.6 and body["top_p"] == 0.9 and body["top_k"] == 20
    assert body["seed"] == 9 and body["stream"] and body["stream_options"] == {"include_usage": True}


def test_http_usage_recorded_when_not_stopped():
    server = FakeServer(COT)
    bcfg, backend = http_backend(server)
    rec = generate_with_escot("q", backend, bcfg, EscotConfig(d_min=math.inf))
    lines = len(COT.split("\n"))
    assert rec.gen_tokens == lines * 3
    assert rec.extra["usage_completion_tokens"] == lines * 3 + 2 * lines
    assert rec.final_answer == "5"


def test_http_retries_transient_errors():
    server = FakeServer(COT, fail_first=2)
    bcfg, backend = http_backend(server, retry_attempts=3)
    rec = generate_with_escot("q", backend, bcfg, EscotConfig(d_min=math.inf))
    assert rec.status == "ok"
    server = FakeServer(COT, fail_first=10)
    bcfg, backend = http_backend(server, retry_attempts=1)
    rec = generate_with_escot("q", backend, bcfg, EscotConfig(d_min=math.inf))
    assert rec.status == "failed"


def test_http_prefix_rejection_names_fallback():
    server = FakeServer(COT, api="chat", reject_prefix=True)
    bcfg, backend = http_backend(server, api="chat")
    with pytest.raises(CapabilityError, match="reprompt"):
        generate_with_escot("q", backend, bcfg, ECFG)


def test_http_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401)

    bcfg, backend = http_backend(handler, retry_attempts=3)
    with pytest.raises(BackendError) as info:
        backend.probe(backend.prepare("q"), "x", seed=0)
    assert info.value.status_code == 401 and len(calls) == 1


def test_http_request_log(tmp_path):
    server = FakeServer(COT)
    bcfg = BackendConfig(backoff_base=0.0)
    client = httpx.Client(transport=httpx.MockTransport(server), base_url="http://test")
    log = tmp_path / "req.jsonl"
    backend = OpenAIBackend(bcfg, log_path=str(log), client=client)
    generate_with_escot("q", backend, bcfg, ECFG)
    entries = [json.loads(x) for x in log.read_text().splitlines()]
    assert entries[0]["stream"] and all("request" in e for e in entries)
