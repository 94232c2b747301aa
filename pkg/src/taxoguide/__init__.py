"""Taxonomy-guided classification of job records into occupations and skills."""

__version__ = "0.1.0"

from .evaluation import judge_select, precision_at_k, rp_at_k
from .knowledge import ALL_VARIANTS, Variant, assess, generate_tasks
from .llm import ChatRequest, LLMClient, PricingTable, ResponseCache, ScriptedProvider, cost_report
from .pipeline import PipelineConfig, classify, classify_batch, prepare_examples
from .retrieval import HashingEmbeddingProvider, build_index, load_index, retrieve, save_index
from .taxonomy import NONE_LABEL, Taxonomy, TaxonomyEntity, load_taxonomy, lookup, parse_soc_code

__all__ = [
    "ALL_VARIANTS",
    "ChatRequest",
    "HashingEmbeddingProvider",
    "LLMClient",
    "NONE_LABEL",
    "PipelineConfig",
    "PricingTable",
    "ResponseCache",
    "ScriptedProvider",
    "Taxonomy",
    "TaxonomyEntity",
    "Variant",
    "assess",
    "build_index",
    "classify",
    "classify_batch",
    "cost_report",
    "generate_tasks",
    "judge_select",
    "load_index",
    "load_taxonomy",
    "lookup",
    "parse_soc_code",
    "precision_at_k",
    "prepare_examples",
    "retrieve",
    "rp_at_k",
    "save_index",
]
