"""Command-line entry point: ``taxoguide <command> [options]``.

Every command writes into a fresh ``<out>/<command>-<UTC timestamp>`` directory,
so earlier runs are never overwritten. Exit codes: 0 success, 1 invalid input or
configuration, 2 batch aborted on failures, 3 provider or credential failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .evaluation import (
    MethodRun,
    aggregate,
    format_table,
    judge_select,
    load_ground_truth,
    load_verdicts,
    score_against_judge,
    write_verdicts,
)
from .knowledge import ALL_VARIANTS, IllegalVariant, Variant, assess, write_assessment
from .llm import (
    AuthError,
    LLMClient,
    LLMError,
    OpenAICompatibleProvider,
    PricingTable,
    ResponseCache,
    ScriptedProvider,
    cost_report,
    load_usage_log,
)
from .mock import MockLLM
from .pipeline import (
    BatchAborted,
    BatchResult,
    ConfigMismatch,
    PipelineConfig,
    classify_batch,
    prepare_examples,
    read_results,
    write_batch,
)
from .prompting import PromptError, load_pool, pipeline_template, render_inference_prompt
from .retrieval import (
    DEFAULT_MODELS,
    HashingEmbeddingProvider,
    HTTPEmbeddingProvider,
    ProviderUnavailable,
    RetrievalError,
    SentenceTransformerProvider,
    build_index,
    load_index,
    save_index,
)
from .taxonomy import (
    NONE_LABEL,
    Taxonomy,
    TaxonomyEntity,
    TaxonomyError,
    load_taxonomy,
    parse_soc_code,
)

log = logging.getLogger("taxoguide")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_PROVIDER = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# -- run configuration -------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything one experiment cell needs; relative paths resolve against the config file."""

    seed: int
    taxonomy: Path
    taxonomy_format: str = "onet"
    expected_count: Optional[int] = None
    index: Optional[Path] = None
    pool: Optional[Path] = None
    cache: Optional[Path] = None
    pricing: Optional[Path] = None
    out_dir: Path = Path("runs")
    embedder: dict = field(default_factory=lambda: {"kind": "hashing", "dim": 256, "seed": 0})
    llm: dict = field(default_factory=lambda: {"kind": "openai-compatible"})
    pipeline: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, base=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        if "seed" not in raw:
            raise ConfigError("config must set 'seed'")
        if "taxonomy" not in raw:
            raise ConfigError("config must set 'taxonomy'")
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        vals = dict(raw)
        for key in ("taxonomy", "index", "pool", "cache", "pricing", "out_dir"):
            if vals.get(key) is not None:
                p = Path(vals[key])
                vals[key] = p if p.is_absolute() else base / p
        cfg = cls(**vals)
        for key in ("taxonomy", "index", "pool", "pricing"):
            p = getattr(cfg, key)
            if p is not None and not p.exists():
                raise ConfigError(f"{key} path does not exist: {p}")
        return cfg


def _run_dir(out: Path, command: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    for n in range(1000):
        d = out / (f"{command}-{stamp}" if n == 0 else f"{command}-{stamp}-{n}")
        try:
            d.mkdir(parents=True, exist_ok=False)
            return d
        except FileExistsError:
            continue
    raise ConfigError(f"cannot allocate a run directory under {out}")


def _load_taxonomy_any(path: Path, fmt: str, expected: Optional[int] = None) -> Taxonomy:
    if fmt == "archive" or path.suffix == ".json":
        data = json.loads(path.read_text(encoding="utf-8"))
        ents = []
        for e in data["entities"]:
            code = parse_soc_code(e["id"]) if data["kind"] == "occupation" else None
            ents.append(TaxonomyEntity(e["id"], e["title"], e["description"], data["kind"], code, e.get("skill_type")))
        return Taxonomy.from_entities(data["name"], ents)
    return load_taxonomy(path, fmt, expected_count=expected)


def _embedder(spec: dict, unit: str):
    kind = spec.get("kind", "hashing")
    if kind == "hashing":
        return HashingEmbeddingProvider(int(spec.get("dim", 256)), int(spec.get("seed", 0)), spec.get("granularity", "token"))
    if kind == "sentence-transformers":
        return SentenceTransformerProvider(spec.get("model") or DEFAULT_MODELS[unit])
    if kind == "http":
        return HTTPEmbeddingProvider(spec["model"], spec.get("base_url", "https://api.openai.com/v1"), spec.get("api_key_env", "OPENAI_API_KEY"))
    raise ConfigError(f"unknown embedder kind {kind!r}")


def _client(cfg: RunConfig, taxonomy: Taxonomy, mock: bool, concurrency: int) -> LLMClient:
    cache = ResponseCache(cfg.cache) if cfg.cache else ResponseCache()
    if mock or cfg.llm.get("kind") == "mock":
        provider = ScriptedProvider(MockLLM(taxonomy, seed=cfg.seed, error_rate=float(cfg.llm.get("error_rate", 0.0))))
    elif cfg.llm.get("kind", "openai-compatible") == "openai-compatible":
        provider = OpenAICompatibleProvider(
            cfg.llm.get("base_url", "https://api.openai.com/v1"), cfg.llm.get("api_key_env", "OPENAI_API_KEY")
        )
    else:
        raise ConfigError(f"unknown llm kind {cfg.llm.get('kind')!r}")
    return LLMClient(provider, cache, max_concurrency=concurrency, seed=cfg.seed)


def _read_records(path: Path) -> list[tuple[str, str]]:
    """``{"instance_id": ..., "text": ...}`` per line; ids default to the line number."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{n}: {exc}") from None
            if "text" not in rec:
                raise ConfigError(f"{path}:{n}: record has no 'text'")
            out.append((str(rec.get("instance_id", n)), rec["text"]))
    if not out:
        raise ConfigError(f"{path} holds no records")
    return out


def _pipeline_config(cfg: RunConfig, args) -> PipelineConfig:
    d = dict(cfg.pipeline)
    d["seed"] = cfg.seed
    for name in ("stages", "unit", "reasoning", "k", "m", "n", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    if d.get("stages") == "inference_only" and "unit" not in d:
        d["unit"] = "none"
    try:
        return PipelineConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------------


def cmd_ingest(args) -> int:
    tax = load_taxonomy(args.taxonomy, args.format, name=args.name, expected_count=args.expected_count)
    out = _run_dir(Path(args.out), "ingest")
    archive = {
        "name": tax.name,
        "kind": tax.kind,
        "source": str(args.taxonomy),
        "entities": [
            {"id": e.id, "title": e.title, "description": e.description, **({"skill_type": e.skill_type} if e.skill_type else {})}
            for e in tax
        ],
    }
    _write_json(out / "taxonomy.json", archive)
    print(f"{len(tax)} entities")
    print(f"archive: {out / 'taxonomy.json'}")
    return EXIT_OK


def _config_from_args(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        if not args.taxonomy:
            raise ConfigError("give --config or --taxonomy")
        cfg = RunConfig.from_dict({"seed": args.seed if args.seed is not None else 0, "taxonomy": args.taxonomy,
                                   "taxonomy_format": args.format})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = Path(args.out)
    return cfg


def cmd_index(args) -> int:
    cfg = _config_from_args(args)
    tax = _load_taxonomy_any(cfg.taxonomy, cfg.taxonomy_format, cfg.expected_count)
    unit = args.unit or cfg.pipeline.get("unit") or "sentence"
    embedder = _embedder(cfg.embedder, unit)
    index = build_index(tax, unit, embedder)
    out = _run_dir(cfg.out_dir, "index")
    path = save_index(index, out / f"{tax.name}.{unit}.index")
    print(f"{len(index)} vectors, dim {index.dim}, provider {index.provider_id}")
    print(f"index: {path}")
    return EXIT_OK


def cmd_classify(args) -> int:
    cfg = _config_from_args(args)
    pcfg = _pipeline_config(cfg, args)
    tax = _load_taxonomy_any(cfg.taxonomy, cfg.taxonomy_format, cfg.expected_count)
    records = _read_records(Path(args.input))
    index = embedder = None
    if pcfg.stages != "inference_only":
        embedder = _embedder(cfg.embedder, pcfg.unit)
        if cfg.index:
            index = load_index(cfg.index)
        else:
            log.info("no index configured; building one in memory")
            index = build_index(tax, pcfg.unit, embedder)
    pool = load_pool(cfg.pool) if cfg.pool else None
    examples = prepare_examples(pcfg, tax, pool, index, embedder)
    out = _run_dir(cfg.out_dir, "classify")

    if args.dry_run:
        template = pipeline_template(pcfg.task_kind, pcfg.reasoning, "inference")
        with open(out / "prompts.jsonl", "w", encoding="utf-8") as fh:
            for iid, text in records:
                prompt = render_inference_prompt(template, examples.inference, text)
                fh.write(json.dumps({"instance_id": iid, "stage": "inference", "prompt": prompt}, ensure_ascii=False) + "\n")
        _write_json(out / "manifest.json", {"config": pcfg.to_dict(), "dry_run": True, "n_inputs": len(records)})
        print(f"rendered {len(records)} inference prompts (rerank prompts need inference output)")
        print(f"run: {out}")
        return EXIT_OK

    client = _client(cfg, tax, args.mock, args.concurrency)
    chunk = max(1, args.concurrency) * 8
    strict = replace(pcfg, failure_threshold=1.0)
    results, manifests = [], []
    try:
        for start in range(0, len(records), chunk):
            batch = classify_batch(strict, records[start : start + chunk], tax, index, embedder, client, examples, args.concurrency)
            results.extend(batch.results)
            manifests.append(batch.manifest)
    except KeyboardInterrupt:
        log.warning("interrupted; writing %d completed results", len(results))
    manifest = dict(manifests[0]) if manifests else {"config": pcfg.to_dict()}
    for key in ("n_inputs", "n_failed", "n_unclassifiable", "n_inference_unparseable", "n_rerank_unparseable",
                "dropped_rerank_lines", "cache_hits", "provider_calls"):
        manifest[key] = sum(m.get(key, 0) for m in manifests)
    if manifests:
        manifest["finished"] = manifests[-1]["finished"]
    manifest["input_file"] = str(args.input)
    manifest["complete"] = len(results) == len(records)
    paths = write_batch(BatchResult(results, manifest), out)
    failed = manifest.get("n_failed", 0)
    print(f"{len(results)} results, {failed} failed, {manifest.get('cache_hits', 0)} cache hits")
    print(f"run: {out}")
    if not manifest["complete"]:
        return 130
    if results and all(r.status == "failed" and (r.error or "").startswith("AuthError") for r in results):
        print(f"provider error: {results[0].error}", file=sys.stderr)
        return EXIT_PROVIDER
    if results and failed / len(results) > pcfg.failure_threshold:
        print(f"aborted: failure rate {failed}/{len(results)} above threshold {pcfg.failure_threshold}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_assess(args) -> int:
    cfg = _config_from_args(args)
    tax = _load_taxonomy_any(cfg.taxonomy, cfg.taxonomy_format, cfg.expected_count)
    try:
        variants = [Variant.parse(v) for v in args.variants] if args.variants else list(ALL_VARIANTS)
    except IllegalVariant as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    client = _client(cfg, tax, args.mock, args.concurrency)
    model = cfg.pipeline.get("inference_model", "gpt-3.5-turbo")
    report = assess(client, tax, variants, random.Random(cfg.seed), model, args.concurrency)
    out = _run_dir(cfg.out_dir, "assess")
    write_assessment(report, out)
    with open(out / "usage.jsonl", "w", encoding="utf-8") as fh:
        for u in report.usage:
            fh.write(json.dumps(u.to_dict(), sort_keys=True) + "\n")
    print((out / "assessment_matrix.txt").read_text(encoding="utf-8"), end="")
    print(f"run: {out}")
    return EXIT_OK


def _method_name(manifest: dict) -> tuple[str, str]:
    c = manifest.get("config", {})
    method = f"{c.get('reasoning', '?')}/{c.get('unit', '?')}/{c.get('stages', '?')}"
    model = c.get("inference_model", "?")
    if c.get("rerank_model") and c.get("rerank_model") != model and c.get("stages") == "full":
        model = f"{model}+{c['rerank_model']}"
    return method, model


def _load_runs(paths: Sequence[str], tax: Optional[Taxonomy]) -> list[MethodRun]:
    runs = []
    for p in paths:
        p = Path(p)
        rdir = p if p.is_dir() else p.parent
        results = read_results(rdir / "results.jsonl" if p.is_dir() else p)
        manifest_path = rdir / "manifest.json"
        manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
        method, model = _method_name(manifest) if manifest else (rdir.name, "?")
        finals = {}
        for r in results:
            labels = []
            for f in r["final"]:
                labels.append(tax[f].label if tax is not None and f in tax else f)
            finals[r["instance_id"]] = labels
        runs.append(MethodRun(method, model, finals))
    return runs


def cmd_judge(args) -> int:
    cfg = _config_from_args(args)
    tax = _load_taxonomy_any(cfg.taxonomy, cfg.taxonomy_format, cfg.expected_count)
    runs = _load_runs(args.results, tax)
    records = dict(_read_records(Path(args.input)))
    client = _client(cfg, tax, args.mock, args.concurrency)
    model = cfg.pipeline.get("judge_model") or cfg.llm.get("judge_model") or cfg.pipeline.get("inference_model", "gpt-4o")
    rng = random.Random(cfg.seed)
    verdicts = []
    for iid in sorted(records):
        pool = {labels[0] for run in runs for labels in [run.finals.get(iid, [])] if labels}
        verdicts.append(judge_select(client, records[iid], pool, random.Random(rng.getrandbits(64)), model, args.runs, iid))
    out = _run_dir(cfg.out_dir, "judge")
    write_verdicts(verdicts, out / "verdicts.jsonl")
    by_id = {v.instance_id: v for v in verdicts}
    table = score_against_judge({f"{r.method}|{r.model}": dict(r.finals) for r in runs}, by_id, tax)
    rows = [{"method": k.split("|")[0], "model": k.split("|")[1], "P@1": v} for k, v in table.items()]
    (out / "precision_at_1.txt").write_text(format_table(rows), encoding="utf-8")
    _write_json(out / "precision_at_1.json", rows)
    print(format_table(rows), end="")
    print(f"{len(verdicts)} verdicts, {sum(v.tie_broken_randomly for v in verdicts)} random tie-breaks")
    print(f"run: {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    tax = _load_taxonomy_any(Path(args.taxonomy), args.format) if args.taxonomy else None
    runs = _load_runs(args.results, tax)
    if args.verdicts:
        verdicts = load_verdicts(args.verdicts)
        table = score_against_judge({f"{r.method}|{r.model}": dict(r.finals) for r in runs}, verdicts, tax)
        rows = [{"method": k.split("|")[0], "model": k.split("|")[1], "P@1": v} for k, v in table.items()]
    elif args.truth:
        truth = load_ground_truth(args.truth)
        rows = aggregate(runs, truth, args.ks, args.metric, args.denominator, tax)
    else:
        raise ConfigError("give --truth or --verdicts")
    out = _run_dir(Path(args.out), "metrics")
    _write_json(out / "metrics.json", rows)
    (out / "metrics.txt").write_text(format_table(rows), encoding="utf-8")
    print(format_table(rows), end="")
    print(f"run: {out}")
    return EXIT_OK


def cmd_cost(args) -> int:
    usages = []
    for p in args.usage:
        usages.extend(load_usage_log(p))
    pricing = PricingTable.from_file(args.pricing) if args.pricing else PricingTable()
    extra = {}
    for item in args.extra_seconds or []:
        stage, _, secs = item.partition("=")
        extra[stage] = float(secs)
    report = cost_report(usages, pricing, args.n_records, extra)
    out = _run_dir(Path(args.out), "cost")
    _write_json(out / "cost_report.json", report.to_dict())
    rows = [{"stage": "overall", **_cost_row(report.overall)}] + [
        {"stage": s, **_cost_row(line)} for s, line in report.per_stage.items()
    ]
    (out / "cost_report.txt").write_text(format_table(rows), encoding="utf-8")
    print(format_table(rows), end="")
    print(f"run: {out}")
    return EXIT_OK


def _cost_row(line) -> dict:
    return {
        "avg_tokens": f"{line.avg_tokens:.2f}",
        "avg_cost_usd": f"{line.avg_cost_usd:.6g}",
        "avg_seconds": f"{line.avg_seconds:.4f}",
        "records_per_s": "-" if line.throughput_records_per_second is None else f"{line.throughput_records_per_second:.3f}",
    }


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taxoguide", description="Taxonomy-guided occupation and skill classification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="run configuration (JSON)")
            sp.add_argument("--taxonomy", help="taxonomy file when no --config is given")
            sp.add_argument("--format", default="onet", choices=["onet", "esco", "archive"])
        sp.add_argument("--out", help="output root (default: config out_dir or ./runs)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("ingest", help="validate a taxonomy file and archive it")
    sp.add_argument("--taxonomy", required=True)
    sp.add_argument("--format", required=True, choices=["onet", "esco"])
    sp.add_argument("--name")
    sp.add_argument("--expected-count", type=int, help="fail unless exactly this many entities load")
    sp.add_argument("--out", default="runs")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("index", help="embed taxonomy documents and persist the index")
    common(sp)
    sp.add_argument("--unit", choices=["sentence", "label"])
    sp.set_defaults(func=cmd_index)

    sp = sub.add_parser("classify", help="run the pipeline over a JSONL file of records")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--concurrency", type=int, default=8)
    sp.add_argument("--stages", choices=["full", "no_rerank", "inference_only"])
    sp.add_argument("--unit", choices=["sentence", "label", "none"])
    sp.add_argument("--reasoning", choices=["tgre", "cot"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--dry-run", action="store_true", help="render prompts only; no provider calls")
    sp.add_argument("--mock", action="store_true", help="use the offline mock model")
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("assess", help="knowledge assessment (recall and recognition)")
    common(sp)
    sp.add_argument("--variants", nargs="*", help="e.g. complete_recall:TC8 recognition:CT8 (default: all 8)")
    sp.add_argument("--concurrency", type=int, default=8)
    sp.add_argument("--mock", action="store_true")
    sp.set_defaults(func=cmd_assess)

    sp = sub.add_parser("judge", help="LLM-judge verdicts over several methods' results")
    common(sp)
    sp.add_argument("--input", required=True, help="the records file the results came from")
    sp.add_argument("--results", nargs="+", required=True, help="results.jsonl files or run directories")
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--concurrency", type=int, default=8)
    sp.add_argument("--mock", action="store_true")
    sp.set_defaults(func=cmd_judge)

    sp = sub.add_parser("metrics", help="Precision@K / RP@K tables")
    sp.add_argument("--results", nargs="+", required=True)
    sp.add_argument("--truth", help="ground-truth JSONL (instance_id, labels)")
    sp.add_argument("--verdicts", help="judge verdicts JSONL")
    sp.add_argument("--taxonomy")
    sp.add_argument("--format", default="onet", choices=["onet", "esco", "archive"])
    sp.add_argument("--ks", nargs="+", type=int, default=[3, 5, 10])
    sp.add_argument("--metric", choices=["rp", "precision"], default="rp")
    sp.add_argument("--denominator", choices=["predicted", "k"], default="predicted")
    sp.add_argument("--out", default="runs")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("cost", help="token, cost and latency report from usage logs")
    sp.add_argument("--usage", nargs="+", required=True)
    sp.add_argument("--pricing", help="JSON pricing table (USD per 1M tokens)")
    sp.add_argument("--n-records", type=int, required=True)
    sp.add_argument("--extra-seconds", nargs="*", help="stage=seconds totals to add, e.g. embedding=96.6")
    sp.add_argument("--out", default="runs")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_cost)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BatchAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (AuthError, ProviderUnavailable, LLMError) as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ConfigError, ConfigMismatch, TaxonomyError, PromptError, RetrievalError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
