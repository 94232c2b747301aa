"""Recall and recognition probes of how well a model knows the occupation taxonomy."""

from __future__ import annotations

import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .llm import ChatRequest, LLMClient, LLMError, UsageRecord
from .prompting import load_template
from .taxonomy import (
    InsufficientPool,
    Taxonomy,
    TaxonomyEntity,
    normalize_title,
    sample_recognition_options,
)

MODES = ("complete_recall", "partial_recall", "recognition")
DIRECTIONS = ("CT", "TC")
GRANULARITIES = {"digits8": 8, "digits2": 2}

_ANSWER_OPEN, _ANSWER_CLOSE = "<answer>", "</answer>"


class IllegalVariant(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Variant:
    mode: str
    direction: str
    granularity: str

    def __post_init__(self) -> None:
        if self.mode not in MODES or self.direction not in DIRECTIONS or self.granularity not in GRANULARITIES:
            raise IllegalVariant(f"unknown variant {self}")
        if self.direction == "CT" and self.granularity == "digits2":
            raise IllegalVariant("CT2 is not a task: a 2-digit code names a whole major group")
        if self.mode == "partial_recall" and self.granularity == "digits2":
            raise IllegalVariant("partial recall of a 2-digit code would hint a single digit")

    @property
    def cell(self) -> str:
        return f"{self.direction}{GRANULARITIES[self.granularity]}"

    @property
    def name(self) -> str:
        return f"{self.mode}:{self.cell}"

    @classmethod
    def parse(cls, name: str) -> "Variant":
        """``recognition:TC8`` style names."""
        try:
            mode, cell = name.split(":")
            direction, digits = cell[:2], int(cell[2:])
        except ValueError:
            raise IllegalVariant(f"cannot parse variant {name!r}") from None
        gran = {8: "digits8", 2: "digits2"}.get(digits)
        if gran is None:
            raise IllegalVariant(f"unknown granularity in {name!r}")
        return cls(mode, direction, gran)


ALL_VARIANTS: tuple[Variant, ...] = tuple(
    Variant(m, d, g)
    for m in MODES
    for d, g in (("CT", "digits8"), ("TC", "digits8"), ("TC", "digits2"))
    if not (m == "partial_recall" and g == "digits2")
)


@dataclass(frozen=True)
class Demonstration:
    query: str
    answer: str
    hint: Optional[str] = None
    options: Optional[tuple[str, ...]] = None


@dataclass(frozen=True)
class KnowledgeTask:
    task_id: str
    variant: Variant
    query: str
    query_field: str
    answer: str
    answer_field: str
    answer_kind: str  # "code" or "title"
    example: Demonstration
    hint: Optional[str] = None
    options: Optional[tuple[str, ...]] = None

    @property
    def mode(self) -> str:
        return self.variant.mode

    @property
    def direction(self) -> str:
        return self.variant.direction

    @property
    def granularity(self) -> str:
        return self.variant.granularity


def make_partial_hint(answer: str, answer_kind: str) -> str:
    """First half of the answer: 5 of 10 code characters, or ceil(w/2) title words."""
    if not answer:
        raise ValueError("empty answer")
    return f"It starts with {hint_prefix(answer, answer_kind)}"


def hint_prefix(answer: str, answer_kind: str) -> str:
    if answer_kind == "code":
        return answer[: len(answer) // 2]
    words = answer.split()
    return " ".join(words[: math.ceil(len(words) / 2)])


def _fields(variant: Variant) -> tuple[str, str, str]:
    """(query_field, answer_field, answer_kind)."""
    code_field = "8-digit code" if variant.granularity == "digits8" else "2-digit code"
    if variant.direction == "CT":
        return code_field, "title", "title"
    return "title", code_field, "code"


def _query_answer(entity: TaxonomyEntity, variant: Variant) -> tuple[str, str]:
    code = entity.id if variant.granularity == "digits8" else entity.major
    return (code, entity.title) if variant.direction == "CT" else (entity.title, code)


def _options(taxonomy: Taxonomy, entity: TaxonomyEntity, variant: Variant, rng: random.Random) -> tuple[str, ...]:
    if variant.granularity == "digits2":
        # codes of 5 distinct major groups; same-major distractors would repeat the answer
        others = sorted(m for m in taxonomy.majors() if m != entity.major)
        if len(others) < 4:
            raise InsufficientPool(f"{taxonomy.name} has fewer than 5 major groups")
        opts = [entity.major, *rng.sample(others, 4)]
        rng.shuffle(opts)
        return tuple(opts)
    picked = sample_recognition_options(taxonomy, entity, rng)
    return tuple(_query_answer(e, variant)[1] for e in picked)


def _demonstration(taxonomy, entity, variant, rng) -> Demonstration:
    query, answer = _query_answer(entity, variant)
    _, _, kind = _fields(variant)
    hint = make_partial_hint(answer, kind) if variant.mode == "partial_recall" else None
    options = _options(taxonomy, entity, variant, rng) if variant.mode == "recognition" else None
    return Demonstration(query, answer, hint, options)


def generate_tasks(taxonomy: Taxonomy, variant: Variant, rng: random.Random) -> list[KnowledgeTask]:
    """One task per entity, in taxonomy order, each with a one-shot demonstration.

    The demonstration entity is drawn once from ``rng``; the task whose target is
    that entity falls back to a second drawn entity.
    """
    if not isinstance(variant, Variant):
        variant = Variant(*variant)
    if len(taxonomy) < 2:
        raise InsufficientPool("need at least two entities")
    first, second = rng.sample(list(taxonomy.entities), 2)
    demos = {e.id: _demonstration(taxonomy, e, variant, rng) for e in (first, second)}
    query_field, answer_field, kind = _fields(variant)

    tasks = []
    for entity in taxonomy:
        query, answer = _query_answer(entity, variant)
        demo = demos[second.id] if entity.id == first.id else demos[first.id]
        hint = make_partial_hint(answer, kind) if variant.mode == "partial_recall" else None
        options = _options(taxonomy, entity, variant, rng) if variant.mode == "recognition" else None
        tasks.append(
            KnowledgeTask(
                task_id=f"{variant.name}:{entity.id}",
                variant=variant,
                query=query,
                query_field=query_field,
                answer=answer,
                answer_field=answer_field,
                answer_kind=kind,
                example=demo,
                hint=hint,
                options=options,
            )
        )
    return tasks


def render_task_prompt(task: KnowledgeTask) -> str:
    if task.mode == "recognition":
        template = load_template("knowledge", "recognition")
        opts = "\n".join(task.options) if task.options else None
        ex_opts = "\n".join(task.example.options) if task.example.options else None
        return template.render(
            example_answer_field=task.answer_field,
            example_query_field=task.query_field,
            example_query=task.example.query,
            example_answer=task.example.answer,
            ex_options=ex_opts,
            answer_field=task.answer_field,
            query_field=task.query_field,
            query=task.query,
            options=opts,
        )
    template = load_template("knowledge", "recall")
    text = template.render(
        example_answer_field=task.answer_field,
        example_query_field=task.query_field,
        example_query=task.example.query,
        example_answer=task.example.answer,
        answer_field=task.answer_field,
        query_field=task.query_field,
        query=task.query,
    )
    if task.mode == "partial_recall":
        lines = text.split("\n")
        ex_line = lines.index("Example:") + 1
        lines[ex_line] += f" Hint: {task.example.hint}"
        lines[-1] += f" Hint: {task.hint}"
        text = "\n".join(lines)
    return text


def extract_answer(generated: str) -> tuple[str, bool]:
    """Content of the first ``<answer>`` span; else the trimmed completion, flagged."""
    start = generated.find(_ANSWER_OPEN)
    if start != -1:
        end = generated.find(_ANSWER_CLOSE, start + len(_ANSWER_OPEN))
        if end != -1:
            return generated[start + len(_ANSWER_OPEN) : end].strip(), True
    return generated.strip(), False


def score_answer(generated: str, expected: str, answer_kind: str, strict_titles: bool = False) -> bool:
    got, _ = extract_answer(generated)
    want = expected.strip()
    if got == "0" and want != "0":
        return False
    if answer_kind == "code" or strict_titles:
        return got == want
    return normalize_title(got) == normalize_title(want)


@dataclass
class TaskOutcome:
    task_id: str
    variant: str
    query: str
    expected: str
    generated: str
    correct: bool
    extraction_ok: bool

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AssessmentReport:
    model_id: str
    accuracy: dict[str, float]
    extraction_failure_rate: dict[str, float]
    outcomes: list[TaskOutcome] = field(repr=False)
    usage: list[UsageRecord] = field(repr=False, default_factory=list)

    @property
    def average(self) -> float:
        return sum(self.accuracy.values()) / len(self.accuracy) if self.accuracy else 0.0

    def matrix_row(self) -> dict:
        return {"model": self.model_id, **self.accuracy, "average": self.average}


def assess(
    client: LLMClient,
    taxonomy: Taxonomy,
    variants: Sequence[Variant],
    rng: random.Random,
    model_id: str,
    concurrency: int = 8,
    max_output_tokens: Optional[int] = None,
) -> AssessmentReport:
    """Run every task of every variant and score exact-match accuracy per variant."""
    tasks: list[KnowledgeTask] = []
    for v in variants:
        tasks.extend(generate_tasks(taxonomy, v, rng))

    def run(task: KnowledgeTask):
        req = ChatRequest.user(model_id, render_task_prompt(task), max_output_tokens=max_output_tokens)
        try:
            return client.complete(req, stage="assess")
        except LLMError as exc:
            exc.task_id = task.task_id
            exc.args = (f"task {task.task_id}: {exc.args[0] if exc.args else ''}",)
            raise

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        replies = list(pool.map(run, tasks))

    outcomes, usage = [], []
    for task, (text, rec) in zip(tasks, replies):
        _, ok = extract_answer(text)
        outcomes.append(
            TaskOutcome(
                task.task_id, task.variant.name, task.query, task.answer, text,
                score_answer(text, task.answer, task.answer_kind), ok,
            )
        )
        usage.append(rec)

    accuracy, failures = {}, {}
    for v in variants:
        rows = [o for o in outcomes if o.variant == v.name]
        accuracy[v.name] = sum(o.correct for o in rows) / len(rows) if rows else 0.0
        failures[v.name] = sum(not o.extraction_ok for o in rows) / len(rows) if rows else 0.0
    return AssessmentReport(model_id, accuracy, failures, outcomes, usage)


def write_assessment(report: AssessmentReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks_path = out / "assessment_tasks.jsonl"
    with open(tasks_path, "w", encoding="utf-8") as fh:
        for o in report.outcomes:
            fh.write(json.dumps(o.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    matrix_path = out / "assessment_matrix.json"
    matrix = {
        "row": report.matrix_row(),
        "extraction_failure_rate": report.extraction_failure_rate,
    }
    matrix_path.write_text(json.dumps(matrix, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    table_path = out / "assessment_matrix.txt"
    names = list(report.accuracy)
    header = ["model", *names, "average"]
    row = [report.model_id, *(f"{report.accuracy[n]:.4f}" for n in names), f"{report.average:.4f}"]
    widths = [max(len(h), len(r)) for h, r in zip(header, row)]
    lines = ["  ".join(v.ljust(w) for v, w in zip(cells, widths)).rstrip() for cells in (header, row)]
    table_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"tasks": tasks_path, "matrix": matrix_path, "table": table_path}
