"""
Extracting ESCO skills from a vacancy snippet
=============================================

Same three stages as for occupations, with 50 retrieved candidates and two
in-context examples. The mock model matches words, so expect rough output.
"""

from pathlib import Path

from taxoguide import HashingEmbeddingProvider, LLMClient, PipelineConfig, ScriptedProvider, build_index, classify, load_taxonomy, lookup, prepare_examples
from taxoguide.mock import MockLLM
from taxoguide.prompting import make_grounded_rationale

DATA = Path(__file__).resolve().parents[1] / "data"
esco = load_taxonomy(DATA / "esco" / "skills_v1.2.csv.gz", "esco")
print(len(esco), "ESCO skills")

# skill rationales map each mention to a [label: description] concept
print(make_grounded_rationale(
    "Experience with Python and good English are a must.",
    ["Python (computer programming)", "English"],
    esco,
    "skill",
    mentions=["Python", "good English"],
    concept_types=["knowledge", "knowledge"],
))
print()

embedder = HashingEmbeddingProvider(dim=256, seed=0)
index = build_index(esco, "sentence", embedder)
config = PipelineConfig(task_kind="skill", seed=1)
examples = prepare_examples(config, esco, None, index, embedder)

snippet = "You will write Python code, review pull requests and communicate clearly with stakeholders in English."
res = classify(config, snippet, esco, index, embedder, LLMClient(ScriptedProvider(MockLLM(esco))), examples)
print("inferred:", res.inference.label_texts())
print("top retrieved:", [esco[c.entity_id].title for c in res.retrieved[:8]])
print("final:", [esco[i].title for i in res.final])
print(lookup(esco, "teamwork principles").description)
