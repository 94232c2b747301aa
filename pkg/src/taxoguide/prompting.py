"""Prompt templates, taxonomy-grounded in-context examples, and completion parsing."""

from __future__ import annotations

import json
import random
import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional, Sequence

from .taxonomy import (
    NONE_CODE,
    Taxonomy,
    TaxonomyEntity,
    TaxonomyError,
    lookup,
    normalize_title,
)

TASK_KINDS = ("occupation", "skill")
REASONINGS = ("tgre", "cot")
PROMPT_STAGES = ("inference", "rerank")
SKILL_TYPES = ("knowledge", "skill/competence")

_PLACEHOLDER = re.compile(r"\$\{([_a-zA-Z][_a-zA-Z0-9]*)\}")
_SOC_IN_PARENS = re.compile(r"\((\d{2}-\d{4}\.\d{2})\)")
_COMPOSITE = re.compile(r"^(?P<title>.*?)\s*\((?P<code>\d{2}-\d{4}\.\d{2})\)\s*\.?$")
_NUMBERED = re.compile(r"^\s*(\d+)\s*[.)]\s*(.*?)\s*$")
_BRACKET = re.compile(r"\[([^\[\]]+?):\s[^\[\]]*\]")


class PromptError(Exception):
    pass


class MissingVariable(PromptError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class Unparseable(PromptError, ValueError):
    pass


class PoolTooSmall(PromptError, ValueError):
    pass


class _Braced(string.Template):
    # only ${name}; a bare "$" in template prose is left alone
    delimiter = "$"
    pattern = r"""
    \$(?:
      (?P<escaped>(?!))            |
      (?P<named>(?!))              |
      {(?P<braced>[_a-zA-Z][_a-zA-Z0-9]*)} |
      (?P<invalid>(?!))
    )
    """


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def required_variables(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER.findall(self.body))

    def render(self, **values: object) -> str:
        missing = sorted(v for v in self.required_variables if values.get(v) is None)
        if missing:
            raise MissingVariable(f"template {self.name}: no value for {', '.join(missing)}")
        return _Braced(self.body).substitute({k: str(v) for k, v in values.items()})


@lru_cache(maxsize=None)
def load_template(task: str, name: str) -> PromptTemplate:
    """Load ``templates/<task>/<name>.txt`` shipped with the package.

    The files end with a single newline that is not part of the prompt.
    """
    ref = resources.files("taxoguide") / "templates" / task / f"{name}.txt"
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PromptError(f"no template {task}/{name}") from None
    if text.endswith("\n"):
        text = text[:-1]
    return PromptTemplate(f"{task}/{name}", text)


def pipeline_template(task_kind: str, reasoning: str, stage: str) -> PromptTemplate:
    if task_kind not in TASK_KINDS or reasoning not in REASONINGS or stage not in PROMPT_STAGES:
        raise PromptError(f"no template for ({task_kind}, {reasoning}, {stage})")
    return load_template(task_kind, f"{reasoning}_{stage}")


def _fixture_text(name: str) -> str:
    text = (resources.files("taxoguide") / "fixtures" / name).read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


# -- grounded examples -------------------------------------------------------------


@dataclass(frozen=True)
class LabeledInstance:
    """A labelled record that can be turned into an in-context example."""

    input: str
    labels: tuple[str, ...]
    mentions: Optional[tuple[str, ...]] = None
    concept_types: Optional[tuple[Optional[str], ...]] = None
    options: Optional[tuple[str, ...]] = None
    ranked_output: Optional[tuple[str, ...]] = None

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledInstance":
        def tup(key):
            v = d.get(key)
            return None if v is None else tuple(v)

        labels = d.get("labels")
        if isinstance(labels, str):
            labels = [labels]
        if not labels:
            raise ValueError(f"instance {d.get('input')!r} has no labels")
        return cls(d["input"], tuple(labels), tup("mentions"), tup("concept_types"), tup("options"), tup("ranked_output"))


@dataclass(frozen=True)
class GroundedExample:
    """An (input, rationale, labels) demonstration, optionally with rerank data.

    CoT examples carry their pre-written prompt blocks in ``raw_inference`` and
    ``raw_rerank`` and are emitted verbatim.
    """

    input: str
    rationale: str
    labels: tuple[str, ...]
    options: Optional[tuple[str, ...]] = None
    ranked_output: Optional[tuple[str, ...]] = None
    rerank_rationale: Optional[str] = None
    raw_inference: Optional[str] = None
    raw_rerank: Optional[str] = None


def format_description(description: str) -> str:
    """Verbatim formatting: lowercase the first character, keep everything else.

    Leading acronyms ("ICT", "IT") keep their case.
    """
    if len(description) > 1 and description[1].isupper():
        return description
    return description[:1].lower() + description[1:]


def split_title_company(x: str) -> tuple[str, Optional[str]]:
    title, sep, company = x.rpartition(",")
    if not sep:
        return x.strip(), None
    return title.strip(), company.strip()


def _quote_list(items: Sequence[str]) -> str:
    """``"a" and "b."`` / ``"a," "b," and "c."`` with punctuation inside the quotes."""
    if len(items) == 1:
        return f'"{items[0]}."'
    if len(items) == 2:
        return f'"{items[0]}" and "{items[1]}."'
    head = " ".join(f'"{m},"' for m in items[:-1])
    return f'{head} and "{items[-1]}."'


def _concept_type(entity: TaxonomyEntity, declared: Optional[str]) -> str:
    kind = declared or entity.skill_type or "skill/competence"
    if kind not in SKILL_TYPES:
        raise ValueError(f"unknown ESCO concept type {kind!r}")
    return kind


def _bracket(entity: TaxonomyEntity) -> str:
    return f"[{entity.title}: {entity.description.rstrip().rstrip('.')}]"


def make_grounded_rationale(
    x: str,
    y_labels: Sequence[str],
    taxonomy: Taxonomy,
    task_kind: str,
    *,
    quote_style: str = "double",
    mentions: Optional[Sequence[str]] = None,
    concept_types: Optional[Sequence[Optional[str]]] = None,
) -> str:
    """Build a rationale that embeds each label's taxonomy description.

    Occupations read ``Given the job title "t" and company "c," the individual
    is likely expected to <description>``; ``quote_style="single"`` switches to
    single quotes. Skills list the snippet's mentions, then one bullet per
    label with a ``[label: description]`` clause.
    """
    if not y_labels:
        raise ValueError("at least one label is required")
    entities = [lookup(taxonomy, y) for y in y_labels]

    if task_kind == "occupation":
        if len(entities) != 1:
            raise ValueError("occupation examples carry exactly one label")
        q = {"double": '"', "single": "'"}[quote_style]
        title, company = split_title_company(x)
        body = format_description(entities[0].description.strip())
        if company is None:
            return f"Given the job title {q}{title},{q} the individual is likely expected to {body}"
        return (
            f"Given the job title {q}{title}{q} and company {q}{company},{q} "
            f"the individual is likely expected to {body}"
        )

    if task_kind != "skill":
        raise ValueError(f"unknown task kind {task_kind!r}")
    mentions = list(mentions) if mentions else [e.title for e in entities]
    types = list(concept_types) if concept_types else [None] * len(entities)
    if len(mentions) != len(entities) or len(types) != len(entities):
        raise ValueError("mentions and concept types must align with labels")
    lines = [
        f"The job vacancy snippet explicitly mentions {_quote_list(mentions)} "
        "Therefore, we can infer the following ESCO skills and knowledge:"
    ]
    for mention, entity, declared in zip(mentions, entities, types):
        cap = mention[:1].upper() + mention[1:]
        lines.append(
            f'- "{cap}" likely refers to the ESCO {_concept_type(entity, declared)} concept {_bracket(entity)}.'
        )
    return "\n".join(lines)


def make_skill_rerank_rationale(
    mentions: Sequence[str], y_labels: Sequence[str], taxonomy: Taxonomy
) -> str:
    entities = [lookup(taxonomy, y) for y in y_labels]
    lines = [
        f"The job vacancy snippet explicitly mentions {_quote_list(list(mentions))} "
        "These phrases give us clues in determining the most relevant options by aligning them "
        "with the specific requirements in the snippet."
    ]
    for mention, entity in zip(mentions, entities):
        lines.append(f'- The term "{mention}" in the snippet directly corresponds to {_bracket(entity)}.')
    return "\n".join(lines)


def option_label(taxonomy: Taxonomy, text: str) -> str:
    """Canonical label for an option string; unknown strings pass through unchanged."""
    try:
        return lookup(taxonomy, text).label
    except TaxonomyError:
        return text


def ground_instance(
    instance: LabeledInstance,
    taxonomy: Taxonomy,
    task_kind: str,
    quote_style: str = "double",
) -> GroundedExample:
    entities = [lookup(taxonomy, y) for y in instance.labels]
    rationale = make_grounded_rationale(
        instance.input,
        instance.labels,
        taxonomy,
        task_kind,
        quote_style=quote_style,
        mentions=instance.mentions,
        concept_types=instance.concept_types,
    )
    rerank_rationale = rationale
    if task_kind == "skill":
        mentions = instance.mentions or tuple(e.title for e in entities)
        rerank_rationale = make_skill_rerank_rationale(mentions, instance.labels, taxonomy)
    options = ranked = None
    if instance.options is not None:
        options = tuple(option_label(taxonomy, o) for o in instance.options)
    if instance.ranked_output is not None:
        ranked = tuple(option_label(taxonomy, o) for o in instance.ranked_output)
    return GroundedExample(
        input=instance.input,
        rationale=rationale,
        labels=tuple(e.label for e in entities),
        options=options,
        ranked_output=ranked,
        rerank_rationale=rerank_rationale,
    )


def load_default_pool(task_kind: str) -> list[LabeledInstance]:
    data = json.loads(_fixture_text(f"{task_kind}_pool.json"))
    return [LabeledInstance.from_dict(d) for d in data]


def load_pool(path) -> list[LabeledInstance]:
    """Read a pool file: a JSON list, or one JSON object per line."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("["):
        rows = json.loads(stripped)
    else:
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    return [LabeledInstance.from_dict(r) for r in rows]


def load_cot_examples(task_kind: str) -> list[GroundedExample]:
    """The fixed chain-of-thought demonstrations shipped as fixtures."""
    if task_kind == "occupation":
        pairs = [("occupation_cot_inference.txt", "occupation_cot_rerank.txt")]
    elif task_kind == "skill":
        pairs = [(f"skill_cot_inference_{i}.txt", f"skill_cot_rerank_{i}.txt") for i in (1, 2)]
    else:
        raise ValueError(f"unknown task kind {task_kind!r}")
    out = []
    for inf_name, rr_name in pairs:
        inf, rr = _fixture_text(inf_name), _fixture_text(rr_name)
        first = inf.splitlines()[0]
        parsed = parse_inference_output(inf, task_kind)
        out.append(
            GroundedExample(
                input=first.split(": ", 1)[1],
                rationale=parsed.rationale,
                labels=tuple(parsed.label_texts()),
                raw_inference=inf,
                raw_rerank=rr,
            )
        )
    return out


def select_examples(
    pool: Sequence,
    k: int,
    rng: random.Random,
    taxonomy: Optional[Taxonomy] = None,
    task_kind: str = "occupation",
    quote_style: str = "double",
) -> list[GroundedExample]:
    """Draw ``k`` distinct pool entries uniformly and ground them.

    Entries that are already ``GroundedExample`` (the CoT fixtures) are used as is.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pool) < k:
        raise PoolTooSmall(f"pool holds {len(pool)} instances, {k} requested")
    chosen = rng.sample(list(pool), k)
    out = []
    for item in chosen:
        if isinstance(item, GroundedExample):
            out.append(item)
        else:
            if taxonomy is None:
                raise ValueError("a taxonomy is needed to ground labelled instances")
            out.append(ground_instance(item, taxonomy, task_kind, quote_style))
    return out


# -- rendering ---------------------------------------------------------------------


def _numbered(items: Iterable[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(items, start=1))


def render_example(example: GroundedExample, task_kind: str, stage: str) -> str:
    """One demonstration block in the layout the matching template expects."""
    raw = example.raw_inference if stage == "inference" else example.raw_rerank
    if raw is not None:
        return raw
    if stage == "inference":
        if task_kind == "occupation":
            return (
                f"Job title and company: {example.input}\n"
                f"Reasoning: {example.rationale}\n"
                f"Prediction: {'; '.join(example.labels)}"
            )
        return f"Text snippet: {example.input}\nReasoning: {example.rationale}"

    if example.options is None or example.ranked_output is None:
        raise MissingVariable("rerank demonstrations need options and a ranked output")
    reasoning = example.rerank_rationale or example.rationale
    if task_kind == "occupation":
        return (
            f"Job title and company: {example.input}\n"
            f"Options:\n{'; '.join(example.options)}\n"
            f"Reasoning: {reasoning}\n"
            f"Most likely occupations:\n{_numbered(example.ranked_output)}"
        )
    return (
        f"Text snippet: {example.input}\n"
        f"Options:\n{'; '.join(example.options)}\n"
        f"Reasoning: {reasoning}\n"
        f"Therefore, we select the following {len(example.ranked_output)} most applicable options:\n"
        f"{_numbered(example.ranked_output)}"
    )


def _example_values(template: PromptTemplate, examples: Sequence[GroundedExample], task_kind: str, stage: str) -> dict:
    blocks = [render_example(e, task_kind, stage) for e in examples]
    required = template.required_variables
    if "examples" in required:
        return {"examples": "\n\n".join(blocks) if blocks else None}
    slots = sorted(v for v in required if v.startswith("example_"))
    if len(blocks) > len(slots):
        raise PromptError(f"template {template.name} has {len(slots)} example slots, got {len(blocks)} examples")
    return {slot: (blocks[i] if i < len(blocks) else None) for i, slot in enumerate(slots)}


def _task_kind_of(template: PromptTemplate) -> str:
    return template.name.split("/", 1)[0]


def render_inference_prompt(template: PromptTemplate, examples: Sequence[GroundedExample], x: str) -> str:
    values = _example_values(template, examples, _task_kind_of(template), "inference")
    return template.render(input=x, **values)


def format_options(labels: Sequence[str]) -> str:
    return "; ".join(labels)


def render_rerank_prompt(
    template: PromptTemplate,
    examples: Sequence[GroundedExample],
    x: str,
    candidates: Sequence,
    taxonomy: Taxonomy,
) -> str:
    """Candidates (``ScoredCandidate`` or entity ids) become ``; ``-joined labels in rank order."""
    if not candidates:
        raise ValueError("reranking needs at least one candidate")
    labels = [taxonomy[getattr(c, "entity_id", c)].label for c in candidates]
    values = _example_values(template, examples, _task_kind_of(template), "rerank")
    return template.render(input=x, options=format_options(labels), **values)


# -- parsing -----------------------------------------------------------------------


@dataclass(frozen=True)
class PredictedLabel:
    title: str
    code: Optional[str] = None

    @property
    def text(self) -> str:
        return f"{self.title} ({self.code})" if self.code else self.title


@dataclass(frozen=True)
class InferenceOutput:
    rationale: str
    labels: tuple[PredictedLabel, ...]
    raw: str
    none_declared: bool = False

    def label_texts(self) -> list[str]:
        return [lab.text for lab in self.labels]

    def to_dict(self) -> dict:
        return {
            "rationale": self.rationale,
            "labels": [{"title": l.title, "code": l.code} for l in self.labels],
            "none_declared": self.none_declared,
        }


_OCC_HEADERS = ("Prediction:", "O*NET-SOC 2019 Occupations:")
_SKILL_HEADERS = ("Skills:",)


def _is_none(text: str) -> bool:
    t = text.strip().strip(".").strip()
    return t.casefold() == "none" or t == f"None ({NONE_CODE})" or t == NONE_CODE


def _last_header(raw: str, headers: Sequence[str]) -> Optional[tuple[int, str]]:
    best = None
    for h in headers:
        for m in re.finditer(rf"(?m)^\s*{re.escape(h)}", raw):
            if best is None or m.start() > best[0]:
                best = (m.start(), h)
    return best


def _strip_reasoning(text: str) -> str:
    text = text.strip()
    idx = text.rfind("Reasoning:")
    if idx != -1:
        text = text[idx + len("Reasoning:") :]
    return text.strip()


def _parse_label(item: str) -> Optional[PredictedLabel]:
    item = _NUMBERED.sub(r"\2", item).strip().strip('"').strip()
    if not item:
        return None
    m = _COMPOSITE.match(item)
    if m:
        return PredictedLabel(m.group("title").strip(), m.group("code"))
    return PredictedLabel(item.rstrip(".").strip())


def parse_inference_output(raw: str, task_kind: str) -> InferenceOutput:
    """Split a completion into rationale and predicted labels.

    Occupations read the ``Prediction:`` or ``O*NET-SOC 2019 Occupations:``
    section (``;``-separated ``Title (code)``). Skills read a ``Skills:`` list,
    or failing that the ``[label: description]`` clauses of the rationale.
    """
    if not raw or not raw.strip():
        raise Unparseable("empty completion")
    headers = _OCC_HEADERS if task_kind == "occupation" else _SKILL_HEADERS
    found = _last_header(raw, headers)

    if found is None:
        if task_kind == "skill":
            rationale = _strip_reasoning(raw)
            concepts = _BRACKET.findall(rationale)
            if concepts:
                seen: dict[str, None] = {}
                for c in concepts:
                    seen.setdefault(c.strip(), None)
                return InferenceOutput(rationale, tuple(PredictedLabel(c) for c in seen), raw)
        raise Unparseable(f"no prediction section in completion: {raw[:80]!r}")

    pos, header = found
    rationale = _strip_reasoning(raw[:pos])
    section = raw[pos:].strip()[len(header) :]
    lines = [ln.strip() for ln in section.splitlines()]
    body = lines[0] if lines and lines[0] else "; ".join(ln for ln in lines[1:] if ln)
    body = body.strip()

    if _is_none(body):
        return InferenceOutput(rationale, (), raw, none_declared=True)
    if task_kind == "skill" and ";" not in body:
        parts = body.split(",")
    else:
        parts = body.split(";")
    labels = []
    for p in parts:
        lab = _parse_label(p)
        if lab is not None and not _is_none(lab.text):
            labels.append(lab)
    if not labels:
        if any(_is_none(p) for p in parts):
            return InferenceOutput(rationale, (), raw, none_declared=True)
        raise Unparseable(f"empty prediction section: {raw[:80]!r}")
    return InferenceOutput(rationale, tuple(labels), raw)


@dataclass(frozen=True)
class RerankResult:
    ids: tuple[str, ...]
    dropped: int = 0
    none_declared: bool = False


_RERANK_HEADERS = (
    "Most likely occupations:",
    "O*NET-SOC 2019 Occupations:",
    "most applicable options:",
    "Skills:",
)


class _OptionResolver:
    def __init__(self, options: Sequence[TaxonomyEntity]):
        self.by_label: dict[str, str] = {}
        self.by_code: dict[str, str] = {}
        self.by_title: dict[str, str] = {}
        for e in options:
            self.by_label.setdefault(" ".join(e.label.split()), e.id)
            self.by_code.setdefault(e.id, e.id)
            self.by_title.setdefault(normalize_title(e.title), e.id)

    def resolve(self, text: str) -> Optional[str]:
        text = " ".join(text.split())
        for candidate in (text, text.rstrip(".").rstrip()):
            if candidate in self.by_label:
                return self.by_label[candidate]
        codes = _SOC_IN_PARENS.findall(text)
        if codes and codes[-1] in self.by_code:
            return self.by_code[codes[-1]]
        if text in self.by_code:
            return self.by_code[text]
        title = _SOC_IN_PARENS.sub("", text) if codes else text
        return self.by_title.get(normalize_title(title))


def parse_rerank_output(raw: str, valid_options: Sequence[TaxonomyEntity]) -> RerankResult:
    """Map a ranked list back to option ids; anything not offered is dropped.

    Accepts a numbered list (one label per line) or a ``Skills:`` line of
    ``;``-separated labels. A leading ``None (00-0000.00)`` means no option fits.
    """
    if not isinstance(raw, str) or not raw.strip():
        raise Unparseable("empty completion")
    found = _last_header(raw, _RERANK_HEADERS)
    tail = raw[found[0] :] if found else raw
    items = [m.group(2) for m in map(_NUMBERED.match, tail.splitlines()) if m]
    if not items and found and found[1] == "Skills:":
        line = tail.strip()[len("Skills:") :].splitlines()
        items = [p.strip() for p in (line[0] if line else "").split(";") if p.strip()]
    if not items:
        if _is_none(raw.strip().splitlines()[-1]) or f"None ({NONE_CODE})" in raw:
            return RerankResult((), 0, True)
        raise Unparseable(f"no ranked list in completion: {raw[:80]!r}")

    if _is_none(items[0]):
        return RerankResult((), 0, True)
    resolver = _OptionResolver(valid_options)
    ids: list[str] = []
    dropped = 0
    for item in items:
        if _is_none(item):
            continue
        eid = resolver.resolve(item.strip().strip('"'))
        if eid is None:
            dropped += 1
        elif eid not in ids:
            ids.append(eid)
    return RerankResult(tuple(ids), dropped, False)
