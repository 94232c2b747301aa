import json
import threading
import time

import pytest
from hypothesis import given, strategies as st

from taxoguide.llm import (
    AuthError,
    ChatRequest,
    LLMClient,
    OpenAICompatibleProvider,
    PricingTable,
    ProviderReply,
    RateLimited,
    ResponseCache,
    ScriptedProvider,
    TransportError,
    UnknownModel,
    UsageRecord,
    cost_report,
    load_usage_log,
)


class Flaky:
    provider_id = "flaky"

    def __init__(self, failures, exc=RateLimited):
        self.failures = failures
        self.exc = exc
        self.calls = 0

    def send(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.exc("try later")
        return ProviderReply("ok", 3, 1)


def test_cache_key_covers_every_field():
    base = ChatRequest.user("m", "hi")
    variants = [
        ChatRequest.user("m2", "hi"),
        ChatRequest.user("m", "hi!"),
        ChatRequest.user("m", "hi", temperature=0.5),
        ChatRequest.user("m", "hi", max_output_tokens=10),
        ChatRequest("m", (("system", "s"), ("user", "hi"))),
    ]
    keys = {base.cache_key()} | {v.cache_key() for v in variants}
    assert len(keys) == 6
    assert base.cache_key() == ChatRequest.user("m", "hi").cache_key()


@given(st.text(max_size=30), st.text(max_size=30))
def test_cache_key_unique_per_prompt(a, b):
    ka, kb = ChatRequest.user("m", a).cache_key(), ChatRequest.user("m", b).cache_key()
    assert (ka == kb) == (a == b)


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatRequest("m", (("robot", "x"),))
    with pytest.raises(ValueError):
        ChatRequest.user("m", "x", max_output_tokens=0)


def test_cache_hit_costs_nothing(tmp_path):
    provider = ScriptedProvider(lambda r: "answer text")
    client = LLMClient(provider, ResponseCache(tmp_path / "c.jsonl"))
    text, u1 = client.complete(ChatRequest.user("gpt-4o", "a b c"), stage="judge")
    assert (text, u1.input_tokens, u1.output_tokens, u1.cached) == ("answer text", 3, 2, False)
    text2, u2 = client.complete(ChatRequest.user("gpt-4o", "a b c"), stage="judge")
    assert text2 == text and u2.cached and (u2.input_tokens, u2.output_tokens, u2.latency_seconds) == (0, 0, 0.0)
    assert provider.calls == 1 and client.cache_hits == 1

    # a fresh client over the same file replays without calling the provider
    provider2 = ScriptedProvider(lambda r: "different")
    again = LLMClient(provider2, ResponseCache(tmp_path / "c.jsonl"))
    assert again.complete(ChatRequest.user("gpt-4o", "a b c"))[0] == "answer text"
    assert provider2.calls == 0


def test_cache_tolerates_torn_line(tmp_path):
    path = tmp_path / "c.jsonl"
    client = LLMClient(ScriptedProvider(lambda r: "x"), ResponseCache(path))
    client.complete(ChatRequest.user("m", "p"))
    with open(path, "a") as fh:
        fh.write('{"key": "abc", "compl')
    assert len(ResponseCache(path)) == 1


def test_retry_with_backoff():
    sleeps = []
    provider = Flaky(3)
    client = LLMClient(provider, sleep=sleeps.append, seed=1)
    text, usage = client.complete(ChatRequest.user("m", "p"))
    assert text == "ok" and provider.calls == 4
    assert len(sleeps) == 3
    for attempt, s in enumerate(sleeps):
        assert 0.8 * 2**attempt <= s <= 1.2 * 2**attempt


def test_retries_exhausted():
    client = LLMClient(Flaky(99, TransportError), sleep=lambda s: None, max_attempts=5)
    with pytest.raises(TransportError) as info:
        client.complete(ChatRequest.user("m", "p"))
    assert info.value.request_id
    assert client.provider.calls == 5


def test_auth_not_retried():
    client = LLMClient(Flaky(99, AuthError), sleep=lambda s: pytest.fail("slept"))
    with pytest.raises(AuthError):
        client.complete(ChatRequest.user("m", "p"))
    assert client.provider.calls == 1


def test_missing_key_is_auth_error(monkeypatch):
    monkeypatch.delenv("TAXOGUIDE_TEST_KEY", raising=False)
    p = OpenAICompatibleProvider(api_key_env="TAXOGUIDE_TEST_KEY")
    with pytest.raises(AuthError):
        p.send(ChatRequest.user("m", "p"))


def test_concurrency_bound():
    active, peak = [0], [0]
    lock = threading.Lock()

    class Slow:
        provider_id = "slow"

        def send(self, request):
            with lock:
                active[0] += 1
                peak[0] = max(peak[0], active[0])
            time.sleep(0.01)
            with lock:
                active[0] -= 1
            return ProviderReply("x", 1, 1)

    client = LLMClient(Slow(), max_concurrency=3)
    threads = [threading.Thread(target=client.complete, args=(ChatRequest.user("m", str(i)),)) for i in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert peak[0] <= 3


def test_scripted_mapping():
    p = ScriptedProvider({"hello": "world", ScriptedProvider.digest("long prompt"): "by digest"})
    assert p.send(ChatRequest.user("m", "hello")).text == "world"
    assert p.send(ChatRequest.user("m", "long prompt")).text == "by digest"
    with pytest.raises(TransportError):
        p.send(ChatRequest.user("m", "unknown"))


# -- cost accounting ---------------------------------------------------------------


def usage(i, o, lat=1.0, model="gpt-3.5-turbo", stage="inference", cached=False):
    return UsageRecord("r", i, o, lat, model, stage, cached)


def test_cost_formulas():
    recs = [usage(100, 50, 2.0), usage(300, 150, 4.0, stage="rerank")]
    r = cost_report(recs, PricingTable(), 2, {"embedding": 1.0})
    assert r.overall.avg_tokens == 300
    assert r.overall.avg_cost_usd == pytest.approx((400 * 0.5 + 200 * 1.5) / 1e6 / 2)
    assert r.overall.avg_seconds == pytest.approx(3.5)
    assert r.overall.throughput_records_per_second == pytest.approx(1 / 3.5)
    assert set(r.per_stage) == {"inference", "rerank", "embedding"}
    assert r.per_stage["embedding"].avg_tokens == 0


def test_unknown_model_priced():
    with pytest.raises(UnknownModel):
        cost_report([usage(1, 1, model="mystery")], PricingTable(), 1)
    # cached records carry no tokens and need no price
    assert cost_report([usage(0, 0, 0.0, model="mystery", cached=True)], PricingTable(), 1).overall.avg_cost_usd == 0


def test_pricing_file(tmp_path):
    p = tmp_path / "prices.json"
    p.write_text(json.dumps({"m": {"input": 1, "output": 2}}))
    assert PricingTable.from_file(p).price("m") == (1.0, 2.0)
    with pytest.raises(ValueError):
        PricingTable({"m": (-1.0, 1.0)})


@given(st.lists(st.tuples(st.integers(0, 5000), st.integers(0, 5000), st.sampled_from(["inference", "rerank", "judge"])), min_size=1, max_size=30), st.integers(1, 50))
def test_accounting_conservation(rows, n):
    """Per-stage totals add up to the overall line."""
    recs = [usage(i, o, 0.5, stage=s) for i, o, s in rows]
    r = cost_report(recs, PricingTable(), n)
    assert sum(l.total_input_tokens for l in r.per_stage.values()) == r.overall.total_input_tokens
    assert sum(l.avg_tokens for l in r.per_stage.values()) == pytest.approx(r.overall.avg_tokens)
    assert sum(l.avg_cost_usd for l in r.per_stage.values()) == pytest.approx(r.overall.avg_cost_usd)
    assert r.overall.total_input_tokens + r.overall.total_output_tokens == sum(i + o for i, o, _ in rows)


def test_usage_log_round_trip(tmp_path):
    recs = [usage(1, 2), usage(3, 4, stage="rerank", cached=True)]
    path = tmp_path / "u.jsonl"
    path.write_text("".join(json.dumps(u.to_dict()) + "\n" for u in recs))
    assert load_usage_log(path) == recs


def test_usage_validation():
    with pytest.raises(ValueError):
        usage(-1, 0)
    with pytest.raises(ValueError):
        usage(1, 1, stage="lunch")
