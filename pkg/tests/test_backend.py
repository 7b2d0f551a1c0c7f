import json
import threading
import time

import httpx
import pytest

from recheck.backend import (
    ChatCompletionsBackend,
    Completion,
    FinishReason,
    Fixture,
    FixtureEntry,
    FixturePolicy,
    GenerationRequest,
    MalformedResponseError,
    Message,
    RateLimitedError,
    RequestRejectedError,
    ScriptedBackend,
    TokenUsage,
    TransportError,
    UnmatchedError,
    effective_parallelism,
    estimate_tokens,
    fingerprint,
    generate_batch,
)


def req(text="hi", **kw) -> GenerationRequest:
    return GenerationRequest([Message("user", text)], **kw)


class TestRequest:
    def test_defaults(self):
        r = req()
        assert (r.temperature, r.top_p, r.max_tokens) == (0.6, 1.0, 32768)

    @pytest.mark.parametrize("kw", [{"temperature": -1}, {"top_p": 0}, {"top_p": 1.5}, {"max_tokens": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            req(**kw)

    def test_empty_messages(self):
        with pytest.raises(ValueError):
            GenerationRequest([])

    def test_body_fields(self):
        body = req(model_id="m", seed=3).body()
        assert body["model"] == "m" and body["seed"] == 3
        assert body["messages"] == [{"role": "user", "content": "hi"}]
        assert "seed" not in req().body()

    def test_fingerprint_sensitivity(self):
        base = fingerprint(req())
        assert base == fingerprint(req())
        for other in (req("ho"), req(temperature=0.7), req(seed=1), req(model_id="x"), req(max_tokens=5)):
            assert fingerprint(other) != base


class TestScripted:
    def test_sequential_replay(self):
        b = ScriptedBackend(["A", "B"])
        assert b.generate(req()).text == "A"
        assert b.generate(req()).text == "B"
        with pytest.raises(UnmatchedError):
            b.generate(req())

    def test_whitespace_estimator(self):
        assert ScriptedBackend(["one two three"]).generate(req()).token_usage.completion_tokens == 3
        assert estimate_tokens("  a\n\tb  ") == 2 and estimate_tokens("") == 0

    def test_fixture_usage_wins(self):
        c = ScriptedBackend([FixtureEntry(None, "x y", 11, 99, FinishReason.LENGTH)]).generate(req())
        assert c.token_usage == TokenUsage(11, 99) and c.finish_reason is FinishReason.LENGTH

    def test_sixteen_repeats(self):
        b = ScriptedBackend([f"sample {i}" for i in range(16)])
        outs = [b.generate(req(temperature=0.6)).text for _ in range(16)]
        assert len(set(outs)) == 16 and len(b.requests) == 16

    def test_by_fingerprint(self, tmp_path):
        a, other = req("a"), req("b")
        fx = Fixture([FixtureEntry(fingerprint(a), "for a")], FixturePolicy.BY_FINGERPRINT)
        path = tmp_path / "fx.jsonl"
        fx.dump(path)
        b = ScriptedBackend(Fixture.load(path))
        assert not b.sequential
        assert b.generate(a).text == b.generate(a).text == "for a"
        with pytest.raises(UnmatchedError):
            b.generate(other)

    def test_duplicate_fingerprints_rejected(self):
        with pytest.raises(ValueError):
            Fixture([FixtureEntry("f", "a"), FixtureEntry("f", "b")], FixturePolicy.BY_FINGERPRINT)

    def test_load_round_trip(self, tmp_path):
        entries = [FixtureEntry(None, "t1", None, 4), FixtureEntry(None, "t2", 1, 2, FinishReason.LENGTH)]
        path = tmp_path / "f.jsonl"
        Fixture(entries).dump(path)
        loaded = Fixture.load(path)
        assert loaded.entries == entries and loaded.policy is FixturePolicy.SEQUENTIAL

    def test_bad_line(self, tmp_path):
        path = tmp_path / "f.jsonl"
        path.write_text('{"response": {}}\n')
        with pytest.raises(ValueError, match="f.jsonl:1"):
            Fixture.load(path)

    def test_deterministic(self):
        texts = ["a b", "c"]
        runs = [[ScriptedBackend(texts).generate(req()) for _ in range(1)] for _ in range(2)]
        assert runs[0] == runs[1]

    def test_sequential_forces_serial(self):
        assert effective_parallelism(ScriptedBackend(["a"]), 8) == 1
        fp = Fixture([FixtureEntry("f", "a")], FixturePolicy.BY_FINGERPRINT)
        assert effective_parallelism(ScriptedBackend(fp), 8) == 8


class Instrumented:
    """Counts outstanding calls; sleeps so overlap is observable."""

    def __init__(self, fail_at=None, delay=0.01):
        self.lock = threading.Lock()
        self.outstanding = 0
        self.peak = 0
        self.order = []
        self.fail_at = fail_at
        self.delay = delay

    def generate(self, request):
        with self.lock:
            self.outstanding += 1
            self.peak = max(self.peak, self.outstanding)
            self.order.append(request.messages[0].content)
        try:
            time.sleep(self.delay)
            i = int(request.messages[0].content)
            if i == self.fail_at:
                raise UnmatchedError(f"no entry for {i}")
            return Completion(f"out {i}", TokenUsage(1, 1))
        finally:
            with self.lock:
                self.outstanding -= 1


class TestBatch:
    def test_serial(self):
        b = Instrumented()
        out = generate_batch(b, [req(str(i)) for i in range(10)], 1)
        assert b.peak == 1
        assert b.order == [str(i) for i in range(10)]
        assert [c.text for c in out] == [f"out {i}" for i in range(10)]

    def test_bound(self):
        b = Instrumented()
        out = generate_batch(b, [req(str(i)) for i in range(10)], 4)
        assert 1 < b.peak <= 4
        assert [c.text for c in out] == [f"out {i}" for i in range(10)]

    def test_positional_error(self):
        out = generate_batch(Instrumented(fail_at=3), [req(str(i)) for i in range(10)], 4)
        assert isinstance(out[3], UnmatchedError)
        assert sum(isinstance(o, Completion) for o in out) == 9

    def test_invalid_bound(self):
        with pytest.raises(ValueError):
            generate_batch(Instrumented(), [req("0")], 0)


# -- live client over a mock transport ---------------------------------------

OK_BODY = {
    "choices": [{"message": {"role": "assistant", "content": "hello there"}, "finish_reason": "stop"}],
    "usage": {"prompt_tokens": 7, "completion_tokens": 2},
}


def live(handler, **kw):
    sleeps = []
    backend = ChatCompletionsBackend("http://model.local/", "secret", transport=httpx.MockTransport(handler),
                                     sleep=sleeps.append, **kw)
    return backend, sleeps


def scripted_statuses(*statuses, body=OK_BODY):
    seen = []

    def handler(request: httpx.Request):
        seen.append(request)
        status = statuses[min(len(seen) - 1, len(statuses) - 1)]
        return httpx.Response(status, json=body if status == 200 else {"error": "x"})

    return handler, seen


class TestLive:
    def test_success(self):
        handler, seen = scripted_statuses(200)
        b, sleeps = live(handler)
        c = b.generate(req(model_id="m", seed=1))
        assert c.text == "hello there" and c.token_usage == TokenUsage(7, 2)
        assert c.finish_reason is FinishReason.STOP
        r = seen[0]
        assert str(r.url) == "http://model.local/v1/chat/completions"
        assert r.headers["Authorization"] == "Bearer secret"
        body = json.loads(r.content)
        assert body == {"model": "m", "messages": [{"role": "user", "content": "hi"}],
                        "temperature": 0.6, "top_p": 1.0, "max_tokens": 32768, "seed": 1}
        assert sleeps == []

    def test_retry_then_success(self):
        handler, seen = scripted_statuses(429, 503, 200)
        b, sleeps = live(handler)
        assert b.generate(req()).text == "hello there"
        assert len(seen) == 3 and len(sleeps) == 2
        assert 1.0 <= sleeps[0] <= 2.0 and 2.0 <= sleeps[1] <= 4.0

    def test_rate_limit_exhausted(self):
        handler, seen = scripted_statuses(429)
        b, sleeps = live(handler)
        with pytest.raises(RateLimitedError):
            b.generate(req())
        assert len(seen) == 5 == b.attempts

    def test_server_error_exhausted(self):
        handler, seen = scripted_statuses(500)
        b, _ = live(handler, max_retries=2)
        with pytest.raises(TransportError):
            b.generate(req())
        assert len(seen) == 3

    def test_client_error_not_retried(self):
        handler, seen = scripted_statuses(400)
        b, _ = live(handler)
        with pytest.raises(RequestRejectedError):
            b.generate(req())
        assert len(seen) == 1

    def test_network_error_retried(self):
        def handler(request):
            raise httpx.ConnectError("refused")

        b, sleeps = live(handler, max_retries=1)
        with pytest.raises(TransportError):
            b.generate(req())
        assert b.attempts == 2 and len(sleeps) == 1

    def test_malformed(self):
        b, _ = live(lambda r: httpx.Response(200, json={"choices": []}))
        with pytest.raises(MalformedResponseError):
            b.generate(req())

    def test_missing_usage_estimated(self):
        body = {"choices": [{"message": {"content": "a b c d"}, "finish_reason": "length"}]}
        b, _ = live(lambda r: httpx.Response(200, json=body))
        c = b.generate(req("x y"))
        assert c.token_usage == TokenUsage(2, 4) and c.finish_reason is FinishReason.LENGTH

    def test_env_configuration(self, monkeypatch):
        monkeypatch.setenv("DC_BASE_URL", "http://env.local")
        monkeypatch.setenv("DC_API_KEY", "k")
        b = ChatCompletionsBackend()
        assert b.url == "http://env.local/v1/chat/completions" and b.api_key == "k"

    def test_no_base_url(self, monkeypatch):
        monkeypatch.delenv("DC_BASE_URL", raising=False)
        with pytest.raises(ValueError):
            ChatCompletionsBackend()
