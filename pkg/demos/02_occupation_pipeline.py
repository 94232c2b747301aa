"""
Infer, retrieve, rerank: classifying job titles into occupations
================================================================

The embeddings here are seeded hashing vectors and the chat model is the mock,
so the run is offline and repeatable. With sentence-transformers models cached
locally, use SentenceTransformerProvider("multi-qa-mpnet-base-dot-v1") instead.
"""

from pathlib import Path

from taxoguide import (
    HashingEmbeddingProvider,
    LLMClient,
    PipelineConfig,
    ScriptedProvider,
    build_index,
    classify,
    classify_batch,
    load_taxonomy,
    prepare_examples,
)
from taxoguide.mock import MockLLM
from taxoguide.prompting import make_grounded_rationale, pipeline_template, render_inference_prompt

DATA = Path(__file__).resolve().parents[1] / "data"
onet = load_taxonomy(DATA / "onet" / "occupation_data_2019.txt", "onet")

# the in-context example's rationale quotes the taxonomy description of its label
print(make_grounded_rationale("records and evidence technician, cobb county police department", ["33-3021.02"], onet, "occupation"))
print()

# documents are "Title (code): Description"; queries are rationale + predicted labels
embedder = HashingEmbeddingProvider(dim=256, seed=0)
index = build_index(onet, "sentence", embedder)

config = PipelineConfig(task_kind="occupation", reasoning="tgre", unit="sentence", stages="full", seed=0)
examples = prepare_examples(config, onet, None, index, embedder)
print(render_inference_prompt(pipeline_template("occupation", "tgre", "inference"), examples.inference, "registered nurse, mercy hospital"))
print()

client = LLMClient(ScriptedProvider(MockLLM(onet)))
res = classify(config, "registered nurse, mercy hospital", onet, index, embedder, client, examples)
print("inferred :", res.inference.label_texts())
print("retrieved:", [(c.entity_id, round(c.score, 3)) for c in res.retrieved[:5]])
print("final    :", [onet[i].label for i in res.final[:3]])
print()

# the three ablation variants over a small batch
records = [
    ("1", "registered nurse, mercy hospital"),
    ("2", "senior software developer, acme corp"),
    ("3", "heavy truck driver, fedex freight"),
    ("4", "elementary school teacher, springfield public schools"),
]
for stages, unit in (("full", "sentence"), ("no_rerank", "sentence"), ("inference_only", "none")):
    cfg = PipelineConfig(stages=stages, unit=unit, seed=0)
    ex = prepare_examples(cfg, onet, None, index, embedder)
    batch = classify_batch(cfg, records, onet, index if unit != "none" else None, embedder if unit != "none" else None, client, ex)
    print(f"{stages:15s}", [r.final[:1] for r in batch.results])
print("cache hits:", client.cache_hits, "provider calls:", client.calls)
