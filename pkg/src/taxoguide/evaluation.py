"""Ranking metrics, the LLM-judge protocol, and result-table aggregation."""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .llm import ChatRequest, LLMClient
from .prompting import load_template
from .taxonomy import NONE_LABEL, Taxonomy, TaxonomyError, lookup, normalize_title

DENOMINATORS = ("predicted", "k")


class EvaluationError(Exception):
    pass


class MissingVerdict(EvaluationError, KeyError):
    pass


class InstanceMismatch(EvaluationError, ValueError):
    pass


def precision_at_k(predicted: Sequence[str], truth: Iterable[str], k: int) -> float:
    """Share of the top ``k`` predictions found in ``truth``, over ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = set(truth)
    return sum(1 for p in predicted[:k] if p in truth) / k


def rp_at_k(predicted: Sequence[str], truth: Iterable[str], k: int, denominator: str = "predicted") -> float:
    """Hits in the top ``k`` normalised by ``min(#considered predictions, |truth|)``.

    ``denominator="k"`` uses ``min(k, |truth|)`` instead, which only differs when
    fewer than ``k`` labels were predicted.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if denominator not in DENOMINATORS:
        raise ValueError(f"denominator must be one of {DENOMINATORS}")
    truth = set(truth)
    if not truth:
        raise ValueError("ground truth must be non-empty")
    window = list(predicted[:k])
    if not window:
        return 0.0
    hits = len(set(window) & truth)
    denom = min(len(window) if denominator == "predicted" else k, len(truth))
    return hits / denom


# -- judge -------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    instance_id: str
    per_run_selections: tuple[tuple[str, ...], ...]
    final: frozenset[str]
    tie_broken_randomly: bool
    pool: tuple[str, ...] = ()

    @property
    def is_none(self) -> bool:
        return self.final == frozenset({NONE_LABEL})

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "per_run_selections": [list(s) for s in self.per_run_selections],
            "final": sorted(self.final),
            "tie_broken_randomly": self.tie_broken_randomly,
            "pool": list(self.pool),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "JudgeVerdict":
        return cls(
            d["instance_id"],
            tuple(tuple(s) for s in d["per_run_selections"]),
            frozenset(d["final"]),
            bool(d["tie_broken_randomly"]),
            tuple(d.get("pool", ())),
        )


def _parse_judge_answer(raw: str, pool: Sequence[str]) -> tuple[str, ...]:
    """Labels from the ``Answer:`` line that name pool members; others are ignored."""
    idx = raw.rfind("Answer:")
    if idx == -1:
        return ()
    line = raw[idx + len("Answer:") :].strip().splitlines()
    if not line:
        return ()
    exact = {" ".join(p.split()): p for p in pool}
    by_title = {}
    for p in pool:
        by_title.setdefault(normalize_title(p.split(" (")[0]), p)
    picked: list[str] = []
    for part in line[0].split(";"):
        part = " ".join(part.split()).strip('"')
        hit = exact.get(part) or exact.get(part.rstrip(".").rstrip())
        if hit is None and part.rstrip(".").strip().casefold() == "none":
            hit = NONE_LABEL if NONE_LABEL in exact else None
        if hit is None:
            hit = by_title.get(normalize_title(part.split(" (")[0]))
        if hit is not None and hit not in picked:
            picked.append(hit)
    return tuple(picked)


def judge_select(
    client: LLMClient,
    record: str,
    candidate_pool: Iterable[str],
    rng: random.Random,
    model_id: str,
    runs: int = 3,
    instance_id: str = "",
) -> JudgeVerdict:
    """Ask the judge ``runs`` times over independently shuffled pools and vote.

    A label survives with at least two votes (a strict majority of three runs).
    When none does, one label is drawn uniformly among those with the most votes.
    """
    pool = sorted(set(candidate_pool) | {NONE_LABEL})
    seeds = [rng.getrandbits(64) for _ in range(runs)]
    template = load_template("judge", "occupation_select")
    selections = []
    for s in seeds:
        order = list(pool)
        random.Random(s).shuffle(order)
        prompt = template.render(input=record, options="; ".join(order))
        text, _ = client.complete(ChatRequest.user(model_id, prompt), stage="judge")
        selections.append(_parse_judge_answer(text, pool))

    votes = Counter(label for sel in selections for label in set(sel))
    threshold = runs // 2 + 1
    final = {label for label, c in votes.items() if c >= threshold}
    tie = False
    if not final:
        top = max(votes.values(), default=0)
        tied = sorted(l for l in pool if votes.get(l, 0) == top)
        final = {rng.choice(tied)}
        tie = len(tied) > 1
    return JudgeVerdict(instance_id, tuple(selections), frozenset(final), tie, tuple(pool))


_TRAILING_ID = re.compile(r"\(([^()]+)\)\s*$")


def canonical(label: str, taxonomy: Optional[Taxonomy]) -> str:
    """Entity id when ``label`` resolves in ``taxonomy``, else the label itself.

    Without a taxonomy, ``Title (id)`` reduces to ``id``.
    """
    if label == NONE_LABEL:
        return label
    if taxonomy is None:
        m = _TRAILING_ID.search(label)
        return m.group(1) if m else label
    try:
        return lookup(taxonomy, label).id
    except TaxonomyError:
        return label


def score_against_judge(
    method_finals: Mapping[str, Mapping[str, Sequence[str]]],
    verdicts: Mapping[str, JudgeVerdict],
    taxonomy: Optional[Taxonomy] = None,
) -> dict[str, float]:
    """Precision@1 per method: a hit when the top prediction is among the judge's picks."""
    table = {}
    for method, finals in method_finals.items():
        total = 0
        for iid, final in finals.items():
            if iid not in verdicts:
                raise MissingVerdict(f"no verdict for instance {iid!r}")
            v = verdicts[iid]
            if v.is_none or not final:
                continue
            accepted = {canonical(l, taxonomy) for l in v.final}
            total += canonical(final[0], taxonomy) in accepted
        table[method] = total / len(finals) if finals else 0.0
    return table


# -- aggregation -------------------------------------------------------------------


@dataclass(frozen=True)
class MethodRun:
    method: str
    model: str
    finals: Mapping[str, Sequence[str]]


def aggregate(
    runs: Sequence[MethodRun],
    truth: Mapping[str, Iterable[str]],
    ks: Sequence[int] = (3, 5, 10),
    metric: str = "rp",
    denominator: str = "predicted",
    taxonomy: Optional[Taxonomy] = None,
) -> list[dict]:
    """Macro-averaged metric per (method, model) and K."""
    if metric not in ("rp", "precision"):
        raise ValueError(f"unknown metric {metric!r}")
    want = set(truth)
    gold = {iid: {canonical(l, taxonomy) for l in labels} for iid, labels in truth.items()}
    rows = []
    for run in runs:
        have = set(run.finals)
        if have != want:
            missing, extra = sorted(want - have), sorted(have - want)
            raise InstanceMismatch(f"{run.method}/{run.model}: missing {missing[:5]}, unexpected {extra[:5]}")
        row = {"method": run.method, "model": run.model}
        for k in ks:
            vals = []
            for iid in sorted(want):
                pred = [canonical(p, taxonomy) for p in run.finals[iid]]
                if metric == "rp":
                    vals.append(rp_at_k(pred, gold[iid], k, denominator))
                else:
                    vals.append(precision_at_k(pred, gold[iid], k))
            label = "RP" if metric == "rp" else "P"
            row[f"{label}@{k}"] = sum(vals) / len(vals) if vals else 0.0
        rows.append(row)
    return rows


def format_table(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[c for c in cols]] + [
        [f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells) + "\n"


def load_ground_truth(path: str | Path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                labels = rec["labels"]
                if not labels:
                    raise ValueError(f"instance {rec['instance_id']!r} has no ground-truth labels")
                out[str(rec["instance_id"])] = list(labels)
    return out


def write_verdicts(verdicts: Iterable[JudgeVerdict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(json.dumps(v.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def load_verdicts(path: str | Path) -> dict[str, JudgeVerdict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                v = JudgeVerdict.from_dict(json.loads(line))
                out[v.instance_id] = v
    return out
