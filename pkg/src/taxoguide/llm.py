"""Chat-completion access: deterministic requests, response cache, retries, cost accounting."""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Protocol, Sequence

STAGES = ("inference", "rerank", "judge", "assess", "embed")
ROLES = ("system", "user", "assistant")

# USD per 1M tokens (input, output), March 2025 list prices. Edit or override via a JSON file.
DEFAULT_PRICING = {
    "gpt-3.5-turbo": (0.5, 1.5),
    "gpt-4o": (2.5, 10.0),
}


class LLMError(Exception):
    def __init__(self, message: str, request_id: Optional[str] = None):
        super().__init__(message)
        self.request_id = request_id

    def __str__(self) -> str:
        base = super().__str__()
        return f"{base} (request {self.request_id})" if self.request_id else base


class AuthError(LLMError):
    pass


class RateLimited(LLMError):
    pass


class TransportError(LLMError):
    pass


class UnknownModel(LLMError, KeyError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_output_tokens: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for role, content in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            if not isinstance(content, str):
                raise TypeError("message content must be text")
        if self.max_output_tokens is not None and self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @classmethod
    def user(cls, model_id: str, prompt: str, **kw) -> "ChatRequest":
        return cls(model_id, (("user", prompt),), **kw)

    @property
    def prompt(self) -> str:
        """Content of the last user message."""
        return next(c for r, c in reversed(self.messages) if r == "user")

    def cache_key(self) -> str:
        payload = json.dumps(
            {
                "model_id": self.model_id,
                "messages": [list(m) for m in self.messages],
                "temperature": self.temperature,
                "max_output_tokens": self.max_output_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class UsageRecord:
    request_id: str
    input_tokens: int
    output_tokens: int
    latency_seconds: float
    model_id: str
    stage: str
    cached: bool = False

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")
        if self.latency_seconds < 0:
            raise ValueError("latency must be non-negative")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "UsageRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class ProviderReply:
    text: str
    input_tokens: int
    output_tokens: int


class ChatProvider(Protocol):
    provider_id: str

    def send(self, request: ChatRequest) -> ProviderReply: ...


def rough_token_count(text: str) -> int:
    """Whitespace token count, used by offline providers."""
    return len(text.split())


class ScriptedProvider:
    """Offline provider: a callable or a prompt→completion mapping answers each request."""

    provider_id = "scripted"

    def __init__(self, script: Callable[[ChatRequest], str] | Mapping[str, str], default: Optional[str] = None):
        self.script = script
        self.default = default
        self.calls = 0
        self._lock = threading.Lock()

    @staticmethod
    def digest(prompt: str) -> str:
        return hashlib.sha256(prompt.encode("utf-8")).hexdigest()

    def send(self, request: ChatRequest) -> ProviderReply:
        with self._lock:
            self.calls += 1
        if callable(self.script):
            text = self.script(request)
        else:
            prompt = request.prompt
            text = self.script.get(prompt, self.script.get(self.digest(prompt), self.default))
            if text is None:
                raise TransportError("scripted provider has no completion for this prompt")
        inp = sum(rough_token_count(c) for _, c in request.messages)
        return ProviderReply(text, inp, rough_token_count(text))


class OpenAICompatibleProvider:
    """Any endpoint implementing ``POST /chat/completions`` in the OpenAI format."""

    def __init__(
        self,
        base_url: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.provider_id = f"openai-compatible:{self.base_url}"
        self._client = None
        self._lock = threading.Lock()

    def _http(self):
        import httpx

        with self._lock:
            if self._client is None:
                self._client = httpx.Client(timeout=self.timeout)
        return self._client

    def send(self, request: ChatRequest) -> ProviderReply:
        import httpx

        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthError(f"environment variable {self.api_key_env} is not set")
        body = {
            "model": request.model_id,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        try:
            resp = self._http().post(
                f"{self.base_url}/chat/completions",
                headers={"Authorization": f"Bearer {key}"},
                json=body,
            )
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code == 429:
            raise RateLimited(f"HTTP 429: {resp.text[:200]}")
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        usage = data.get("usage") or {}
        text = data["choices"][0]["message"].get("content") or ""
        return ProviderReply(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))


class ResponseCache:
    """Completions keyed by request digest, persisted as append-only JSON lines.

    Files from separate runs can be concatenated; the first entry for a key wins.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.RLock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        continue  # torn final line from an interrupted run
                    self._entries.setdefault(rec["key"], rec)

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Optional[dict]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, request: ChatRequest, reply: ProviderReply) -> None:
        rec = {
            "key": key,
            "model_id": request.model_id,
            "completion": reply.text,
            "input_tokens": reply.input_tokens,
            "output_tokens": reply.output_tokens,
        }
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = rec
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


class LLMClient:
    """Wraps a provider with caching, bounded concurrency and retry with backoff."""

    def __init__(
        self,
        provider: ChatProvider,
        cache: Optional[ResponseCache] = None,
        max_concurrency: int = 8,
        max_attempts: int = 5,
        base_delay: float = 1.0,
        jitter: float = 0.2,
        sleep: Callable[[float], None] = time.sleep,
        seed: Optional[int] = None,
    ):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        self.provider = provider
        self.cache = cache if cache is not None else ResponseCache()
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.jitter = jitter
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max_concurrency)
        self._rng = random.Random(seed)
        self._rng_lock = threading.Lock()
        self.cache_hits = 0
        self.calls = 0
        self._count_lock = threading.Lock()

    def backoff(self, attempt: int) -> float:
        with self._rng_lock:
            factor = self._rng.uniform(1 - self.jitter, 1 + self.jitter)
        return self.base_delay * (2**attempt) * factor

    def complete(self, request: ChatRequest, stage: str = "inference") -> tuple[str, UsageRecord]:
        key = request.cache_key()
        request_id = key[:16]
        hit = self.cache.get(key)
        if hit is not None:
            with self._count_lock:
                self.cache_hits += 1
            return hit["completion"], UsageRecord(request_id, 0, 0, 0.0, request.model_id, stage, cached=True)

        last: Optional[LLMError] = None
        for attempt in range(self.max_attempts):
            try:
                with self._slots:
                    start = time.perf_counter()
                    reply = self.provider.send(request)
                    latency = time.perf_counter() - start
            except AuthError as exc:
                exc.request_id = request_id
                raise
            except (RateLimited, TransportError) as exc:
                exc.request_id = request_id
                last = exc
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff(attempt))
                continue
            with self._count_lock:
                self.calls += 1
            self.cache.put(key, request, reply)
            usage = UsageRecord(request_id, reply.input_tokens, reply.output_tokens, latency, request.model_id, stage)
            return reply.text, usage
        assert last is not None
        raise last


@dataclass(frozen=True)
class PricingTable:
    prices: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_PRICING))

    def __post_init__(self) -> None:
        for model, (p_in, p_out) in self.prices.items():
            if p_in < 0 or p_out < 0:
                raise ValueError(f"negative price for {model}")

    @classmethod
    def from_file(cls, path: str | Path) -> "PricingTable":
        """JSON object: ``{"model": {"input": usd_per_1m, "output": usd_per_1m}}``."""
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        prices = {}
        for model, p in raw.items():
            prices[model] = (float(p["input"]), float(p["output"])) if isinstance(p, Mapping) else tuple(map(float, p))
        return cls(prices)

    def price(self, model_id: str) -> tuple[float, float]:
        try:
            return self.prices[model_id]
        except KeyError:
            raise UnknownModel(f"no price for model {model_id!r}") from None


@dataclass(frozen=True)
class CostLine:
    avg_tokens: float
    avg_cost_usd: float
    avg_seconds: float
    throughput_records_per_second: Optional[float]
    total_input_tokens: int
    total_output_tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CostReport:
    n_records: int
    overall: CostLine
    per_stage: dict[str, CostLine]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "overall": self.overall.to_dict(),
            "per_stage": {k: v.to_dict() for k, v in self.per_stage.items()},
        }


def _cost_line(usages: Sequence[UsageRecord], pricing: PricingTable, n: int, extra_seconds: float) -> CostLine:
    tin = sum(u.input_tokens for u in usages)
    tout = sum(u.output_tokens for u in usages)
    usd = 0.0
    for u in usages:
        if u.input_tokens or u.output_tokens:
            p_in, p_out = pricing.price(u.model_id)
            usd += u.input_tokens * p_in + u.output_tokens * p_out
    seconds = (sum(u.latency_seconds for u in usages) + extra_seconds) / n
    return CostLine(
        avg_tokens=(tin + tout) / n,
        avg_cost_usd=usd / 1e6 / n,
        avg_seconds=seconds,
        throughput_records_per_second=(1.0 / seconds) if seconds > 0 else None,
        total_input_tokens=tin,
        total_output_tokens=tout,
    )


def cost_report(
    usages: Iterable[UsageRecord],
    pricing: PricingTable,
    n_records: int,
    extra_seconds: Optional[Mapping[str, float]] = None,
) -> CostReport:
    """Per-record averages of tokens, dollars and seconds, overall and by stage.

    ``extra_seconds`` adds non-LLM time (embedding, retrieval) to a stage's total.
    """
    if n_records < 1:
        raise ValueError("n_records must be >= 1")
    usages = list(usages)
    extra = dict(extra_seconds or {})
    stages = sorted({u.stage for u in usages} | set(extra))
    per_stage = {
        s: _cost_line([u for u in usages if u.stage == s], pricing, n_records, extra.get(s, 0.0)) for s in stages
    }
    overall = _cost_line(usages, pricing, n_records, sum(extra.values()))
    return CostReport(n_records, overall, per_stage)


def load_usage_log(path: str | Path) -> list[UsageRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(UsageRecord.from_dict(json.loads(line)))
    return out
