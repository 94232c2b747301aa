"""Infer, retrieve, rerank: the three-stage classifier and its batch runner."""

from __future__ import annotations

import json
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .llm import ChatRequest, LLMClient, LLMError, UsageRecord
from .prompting import (
    GroundedExample,
    InferenceOutput,
    PredictedLabel,
    Unparseable,
    load_cot_examples,
    load_default_pool,
    parse_inference_output,
    parse_rerank_output,
    pipeline_template,
    render_inference_prompt,
    render_rerank_prompt,
    select_examples,
)
from .retrieval import (
    EmbeddingProvider,
    EmptyInference,
    RetrievalError,
    RetrievalIndex,
    ScoredCandidate,
    embed,
    make_query,
)
from .taxonomy import Taxonomy, TaxonomyError

STAGE_VARIANTS = ("full", "no_rerank", "inference_only")
_DEPTHS = {"occupation": (10, 10, 1), "skill": (50, 10, 2)}


class PipelineError(Exception):
    pass


class ConfigMismatch(PipelineError, ValueError):
    pass


class BatchAborted(PipelineError):
    def __init__(self, message: str, batch: "BatchResult"):
        super().__init__(message)
        self.batch = batch


@dataclass(frozen=True)
class PipelineConfig:
    """One experimental cell. ``m``, ``n``, ``k`` default per task kind; ``unit`` per stages."""

    task_kind: str = "occupation"
    reasoning: str = "tgre"
    unit: Optional[str] = None
    stages: str = "full"
    m: Optional[int] = None
    n: Optional[int] = None
    k: Optional[int] = None
    seed: int = 0
    inference_model: str = "gpt-3.5-turbo"
    rerank_model: Optional[str] = None
    quote_style: str = "double"
    max_output_tokens: Optional[int] = None
    failure_threshold: float = 0.5

    def __post_init__(self) -> None:
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        if self.task_kind not in _DEPTHS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        set_("reasoning", self.reasoning.lower())
        if self.reasoning not in ("tgre", "cot"):
            raise ValueError(f"unknown reasoning {self.reasoning!r}")
        if self.stages not in STAGE_VARIANTS:
            raise ValueError(f"unknown stages {self.stages!r}")
        if self.unit is None:
            set_("unit", "none" if self.stages == "inference_only" else "sentence")
        if self.stages == "inference_only" and self.unit != "none":
            raise ValueError("inference_only runs use unit 'none'")
        if self.stages != "inference_only" and self.unit not in ("sentence", "label"):
            raise ValueError(f"retrieval unit must be sentence or label, got {self.unit!r}")
        m, n, k = _DEPTHS[self.task_kind]
        set_("m", self.m if self.m is not None else m)
        set_("n", self.n if self.n is not None else n)
        set_("k", self.k if self.k is not None else k)
        if min(self.m, self.n, self.k) < 1:
            raise ValueError("m, n and k must be positive")
        if self.n > self.m:
            raise ValueError(f"n ({self.n}) may not exceed m ({self.m})")
        if self.rerank_model is None:
            set_("rerank_model", self.inference_model)
        if not 0.0 <= self.failure_threshold <= 1.0:
            raise ValueError("failure_threshold must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ExampleSet:
    inference: tuple[GroundedExample, ...]
    rerank: tuple[GroundedExample, ...]


def _demo_options(
    example: GroundedExample,
    config: PipelineConfig,
    taxonomy: Taxonomy,
    index: RetrievalIndex,
    embedder: EmbeddingProvider,
) -> GroundedExample:
    """Fill a demo's options from retrieval, with its gold labels ranked first."""
    inf = InferenceOutput(example.rationale, tuple(PredictedLabel(l) for l in example.labels), "")
    (qvec,) = embed(embedder, [make_query(inf, index.unit)])
    found = [taxonomy[c.entity_id].label for c in index.search_vector(qvec, config.m)]
    gold = list(example.labels)
    options = list(dict.fromkeys(found + [g for g in gold if g not in found]))[: max(config.m, len(gold))]
    ranked = gold + [o for o in options if o not in gold]
    return replace(example, options=tuple(options), ranked_output=tuple(ranked[: config.n]))


def prepare_examples(
    config: PipelineConfig,
    taxonomy: Taxonomy,
    pool: Optional[Sequence] = None,
    index: Optional[RetrievalIndex] = None,
    embedder: Optional[EmbeddingProvider] = None,
) -> ExampleSet:
    """Pick ``k`` demonstrations with the config seed and complete their rerank data."""
    rng = random.Random(config.seed)
    if config.reasoning == "cot":
        chosen = select_examples(load_cot_examples(config.task_kind), config.k, rng)
        return ExampleSet(tuple(chosen), tuple(chosen))
    pool = list(pool) if pool is not None else load_default_pool(config.task_kind)
    chosen = select_examples(pool, config.k, rng, taxonomy, config.task_kind, config.quote_style)
    rerank = []
    if config.stages == "full":
        for ex in chosen:
            if ex.options is None or ex.ranked_output is None:
                if index is None or embedder is None:
                    raise ValueError("pool instances without options need an index to build rerank demos")
                ex = _demo_options(ex, config, taxonomy, index, embedder)
            rerank.append(ex)
    return ExampleSet(tuple(chosen), tuple(rerank))


@dataclass
class ClassificationResult:
    instance_id: str
    input: str
    status: str = "ok"  # ok | unclassifiable | failed
    error: Optional[str] = None
    inference: Optional[InferenceOutput] = None
    inference_unparseable: bool = False
    query: Optional[str] = None
    retrieved: list[ScoredCandidate] = field(default_factory=list)
    final: list[str] = field(default_factory=list)
    dropped_rerank_lines: int = 0
    rerank_unparseable: bool = False
    rerank_none_declared: bool = False
    usage: list[UsageRecord] = field(default_factory=list)
    stage_timings: dict[str, float] = field(default_factory=dict)

    @property
    def retrieved_ids(self) -> list[str]:
        return [c.entity_id for c in self.retrieved]

    def to_record(self) -> dict:
        """Deterministic fields only; usage and timings live in sidecar files."""
        return {
            "instance_id": self.instance_id,
            "input": self.input,
            "status": self.status,
            "error": self.error,
            "inference": self.inference.to_dict() if self.inference else None,
            "inference_raw": self.inference.raw if self.inference else None,
            "inference_unparseable": self.inference_unparseable,
            "query": self.query,
            "retrieved": [c.to_dict() for c in self.retrieved],
            "final": list(self.final),
            "dropped_rerank_lines": self.dropped_rerank_lines,
            "rerank_unparseable": self.rerank_unparseable,
            "rerank_none_declared": self.rerank_none_declared,
        }


def check_compatible(config: PipelineConfig, taxonomy: Taxonomy, index, embedder) -> None:
    if config.stages == "inference_only":
        return
    if index is None or embedder is None:
        raise ConfigMismatch("retrieval stages need an index and an embedding provider")
    if index.unit != config.unit:
        raise ConfigMismatch(f"index unit {index.unit!r} != config unit {config.unit!r}")
    if index.taxonomy_name != taxonomy.name or len(index) != len(taxonomy):
        raise ConfigMismatch(f"index was built for {index.taxonomy_name}, not {taxonomy.name}")
    if index.provider_id != embedder.provider_id:
        raise ConfigMismatch(f"index embeddings come from {index.provider_id}, not {embedder.provider_id}")


def classify(
    config: PipelineConfig,
    x: str,
    taxonomy: Taxonomy,
    index: Optional[RetrievalIndex],
    embedder: Optional[EmbeddingProvider],
    client: LLMClient,
    examples: ExampleSet,
    instance_id: str = "",
) -> ClassificationResult:
    check_compatible(config, taxonomy, index, embedder)
    res = ClassificationResult(instance_id, x)

    # inference
    prompt = render_inference_prompt(pipeline_template(config.task_kind, config.reasoning, "inference"), examples.inference, x)
    req = ChatRequest.user(config.inference_model, prompt, max_output_tokens=config.max_output_tokens)
    t0 = time.perf_counter()
    raw, usage = client.complete(req, stage="inference")
    res.stage_timings["inference"] = time.perf_counter() - t0
    res.usage.append(usage)
    try:
        res.inference = parse_inference_output(raw, config.task_kind)
    except Unparseable:
        res.inference_unparseable = True

    if config.stages == "inference_only":
        if res.inference is not None:
            res.final = res.inference.label_texts()
        else:
            res.status = "unclassifiable"
        return res

    # retrieval
    if res.inference is None:
        res.query = raw.strip() or None
    elif res.inference.none_declared and config.unit == "label":
        res.query = None
    else:
        try:
            res.query = make_query(res.inference, config.unit)
        except EmptyInference:
            res.query = None
    if not res.query:
        res.status = "unclassifiable"
        return res

    t0 = time.perf_counter()
    (qvec,) = embed(embedder, [res.query])
    t1 = time.perf_counter()
    res.retrieved = index.search_vector(qvec, config.m)
    t2 = time.perf_counter()
    res.stage_timings["embedding"] = t1 - t0
    res.stage_timings["retrieval"] = t2 - t1

    if config.stages == "no_rerank":
        res.final = res.retrieved_ids[: config.n]
        return res

    # reranking
    template = pipeline_template(config.task_kind, config.reasoning, "rerank")
    prompt = render_rerank_prompt(template, examples.rerank, x, res.retrieved, taxonomy)
    req = ChatRequest.user(config.rerank_model, prompt, max_output_tokens=config.max_output_tokens)
    t0 = time.perf_counter()
    raw, usage = client.complete(req, stage="rerank")
    res.stage_timings["rerank"] = time.perf_counter() - t0
    res.usage.append(usage)
    options = [taxonomy[c.entity_id] for c in res.retrieved]
    try:
        parsed = parse_rerank_output(raw, options)
    except Unparseable:
        res.rerank_unparseable = True
        return res
    res.final = list(parsed.ids[: config.n])
    res.dropped_rerank_lines = parsed.dropped
    res.rerank_none_declared = parsed.none_declared
    return res


@dataclass
class BatchResult:
    results: list[ClassificationResult]
    manifest: dict

    @property
    def usage(self) -> list[UsageRecord]:
        return [u for r in self.results for u in r.usage]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def classify_batch(
    config: PipelineConfig,
    inputs: Sequence[tuple[str, str]],
    taxonomy: Taxonomy,
    index: Optional[RetrievalIndex],
    embedder: Optional[EmbeddingProvider],
    client: LLMClient,
    examples: ExampleSet,
    concurrency: int = 8,
) -> BatchResult:
    """Classify ``(instance_id, text)`` pairs concurrently; results keep input order.

    A record whose provider call fails is marked ``failed``; if the failed share
    exceeds ``config.failure_threshold`` the batch raises :class:`BatchAborted`.
    """
    if not inputs:
        raise ValueError("no inputs")
    check_compatible(config, taxonomy, index, embedder)
    started = _now()
    hits0, calls0 = client.cache_hits, client.calls

    def one(item: tuple[str, str]) -> ClassificationResult:
        iid, text = item
        try:
            return classify(config, text, taxonomy, index, embedder, client, examples, iid)
        except (LLMError, RetrievalError, TaxonomyError) as exc:
            return ClassificationResult(iid, text, status="failed", error=f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(one, inputs))

    failed = sum(r.status == "failed" for r in results)
    manifest = {
        "config": config.to_dict(),
        "seed": config.seed,
        "models": {"inference": config.inference_model, "rerank": config.rerank_model},
        "llm_provider": getattr(client.provider, "provider_id", type(client.provider).__name__),
        "embedding_provider": getattr(embedder, "provider_id", None),
        "taxonomy": taxonomy.name,
        "examples": [e.input for e in examples.inference],
        "started": started,
        "finished": _now(),
        "n_inputs": len(results),
        "n_failed": failed,
        "n_unclassifiable": sum(r.status == "unclassifiable" for r in results),
        "n_inference_unparseable": sum(r.inference_unparseable for r in results),
        "n_rerank_unparseable": sum(r.rerank_unparseable for r in results),
        "dropped_rerank_lines": sum(r.dropped_rerank_lines for r in results),
        "cache_hits": client.cache_hits - hits0,
        "provider_calls": client.calls - calls0,
    }
    batch = BatchResult(results, manifest)
    if failed / len(results) > config.failure_threshold:
        raise BatchAborted(f"{failed}/{len(results)} records failed", batch)
    return batch


def write_results(results: Sequence[ClassificationResult], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def write_batch(batch: BatchResult, out_dir: str | Path) -> dict[str, Path]:
    """``results.jsonl`` (deterministic), plus usage, timings and manifest sidecars."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": write_results(batch.results, out / "results.jsonl")}
    paths["usage"] = out / "usage.jsonl"
    with open(paths["usage"], "w", encoding="utf-8") as fh:
        for u in batch.usage:
            fh.write(json.dumps(u.to_dict(), sort_keys=True) + "\n")
    paths["timings"] = out / "timings.jsonl"
    with open(paths["timings"], "w", encoding="utf-8") as fh:
        for r in batch.results:
            fh.write(json.dumps({"instance_id": r.instance_id, **r.stage_timings}, sort_keys=True) + "\n")
    paths["manifest"] = out / "manifest.json"
    paths["manifest"].write_text(json.dumps(batch.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def read_results(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
