"""A deterministic stand-in for a chat model, for offline runs and tests.

It recognises each prompt family shipped with the package and answers in the
expected output format, choosing labels by word overlap with the input.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from typing import Optional, Sequence

from .llm import ChatRequest
from .prompting import format_description, split_title_company
from .taxonomy import NONE_LABEL, Taxonomy, TaxonomyEntity, TaxonomyError, lookup

_WORD = re.compile(r"[a-z0-9]+")
_STOP = frozenset("a an and the of for in to with at on or by as is are you your our we be".split())
_RECALL = re.compile(r"taxonomy, the (?P<afield>.+?) for the (?P<qfield>title|8-digit code|2-digit code) (?P<query>.+) is <blank>\.")
_RECOG = re.compile(r"is the (?P<afield>.+?) for the (?P<qfield>title|8-digit code|2-digit code) (?P<query>.+)\?$")


def _words(text: str) -> list[str]:
    return [w for w in _WORD.findall(text.casefold()) if w not in _STOP]


def _stem(w: str) -> str:
    for suf in ("ists", "ers", "ors", "ist", "er", "or", "ing", "es", "s"):
        if len(w) > len(suf) + 2 and w.endswith(suf):
            return w[: -len(suf)]
    return w


class MockLLM:
    """Callable suitable for :class:`taxoguide.llm.ScriptedProvider`.

    ``error_rate`` makes a seeded fraction of knowledge answers wrong so the
    assessment harness has something to measure.
    """

    def __init__(self, taxonomy: Taxonomy, seed: int = 0, error_rate: float = 0.0):
        self.taxonomy = taxonomy
        self.seed = seed
        self.error_rate = error_rate
        self._bags = [(e, Counter(map(_stem, _words(e.title)))) for e in taxonomy]

    # -- helpers -------------------------------------------------------------

    def _score(self, text: str, bag: Counter) -> int:
        q = Counter(map(_stem, _words(text)))
        return sum(min(c, bag[w]) for w, c in q.items())

    def best_entities(self, text: str, limit: int) -> list[TaxonomyEntity]:
        scored = [(self._score(text, bag), e.id, e) for e, bag in self._bags]
        scored = [s for s in scored if s[0] > 0]
        scored.sort(key=lambda s: (-s[0], s[1]))
        return [e for _, _, e in scored[:limit]]

    def _coin(self, key: str) -> float:
        h = hashlib.sha256(f"{self.seed}\x00{key}".encode()).digest()
        return int.from_bytes(h[:8], "little") / 2**64

    @staticmethod
    def _task_section(prompt: str) -> str:
        return prompt.rsplit("\n---\n", 1)[-1]

    @staticmethod
    def _field(section: str, name: str) -> Optional[str]:
        for line in section.splitlines():
            if line.startswith(name):
                return line[len(name) :].strip()
        return None

    @staticmethod
    def _options(section: str) -> list[str]:
        lines = section.splitlines()
        for i, line in enumerate(lines):
            if line.rstrip() == "Options:" and i + 1 < len(lines):
                return [o.strip() for o in lines[i + 1].split(";") if o.strip()]
        return []

    def _rank_options(self, text: str, options: Sequence[str], limit: int) -> list[str]:
        scored = [(-self._score(text, Counter(map(_stem, _words(o)))), i, o) for i, o in enumerate(options)]
        scored.sort()
        return [o for _, _, o in scored[:limit]]

    # -- prompt families -----------------------------------------------------

    def __call__(self, request: ChatRequest) -> str:
        prompt = request.prompt
        section = self._task_section(prompt)
        if prompt.startswith(("Fill in the <blank>", "Select the best option")):
            return self._knowledge(prompt, section)
        if prompt.startswith("Given a job record"):
            return self._judge(section)
        x = self._field(section, "Job title and company:")
        if x is not None:
            opts = self._options(section)
            return self._occ_rerank(x, opts) if opts else self._occ_inference(x, prompt)
        x = self._field(section, "Text snippet:") or self._field(section, "Vacancy:")
        if x is not None:
            opts = self._options(section)
            return self._skill_rerank(x, opts, prompt) if opts else self._skill_inference(x, prompt)
        return "I cannot help with that."

    def _occ_inference(self, x: str, prompt: str) -> str:
        best = self.best_entities(x, 1)
        cot = "O*NET-SOC 2019 Occupations:" in prompt
        if not best:
            reasoning = "The job title and company give too little context."
            head = "O*NET-SOC 2019 Occupations:" if cot else "Prediction:"
            return f"Reasoning: {reasoning}\n{head} None"
        e = best[0]
        title, company = split_title_company(x)
        if cot:
            return (
                f"Reasoning: Let's think step by step in order to predict the O*NET 2019 occupation titles "
                f'and codes it most likely belongs to. We note the title "{title}".\n'
                f"O*NET-SOC 2019 Occupations: {e.label}"
            )
        where = f' and company "{company},"' if company else ","
        return (
            f'Reasoning: Given the job title "{title}"{where} the individual is likely expected to '
            f"{format_description(e.description)}\nPrediction: {e.label}"
        )

    def _occ_rerank(self, x: str, options: list[str]) -> str:
        ranked = self._rank_options(x, options, 10)
        title, company = split_title_company(x)
        lines = "\n".join(f"{i}. {o}" for i, o in enumerate(ranked, start=1))
        return f'Reasoning: Given the job title "{title}", the best matches are listed first.\nMost likely occupations:\n{lines}'

    def _skill_inference(self, x: str, prompt: str) -> str:
        found = self.best_entities(x, 2)
        if "Skills:" in prompt and "list of comma-separated" in prompt:
            names = ", ".join(e.title for e in found) or "communication"
            return f" find the skills. We look for skills named in the vacancy.\nSkills: {names}"
        if not found:
            return "Reasoning: The job vacancy snippet explicitly mentions nothing specific."
        bullets = "\n".join(
            f'- "{e.title}" likely refers to the ESCO skill/competence concept '
            f"[{e.title}: {e.description.rstrip('.')}]."
            for e in found
        )
        return (
            "Reasoning: The job vacancy snippet explicitly mentions relevant skills. "
            f"Therefore, we can infer the following ESCO skills and knowledge:\n{bullets}"
        )

    def _skill_rerank(self, x: str, options: list[str], prompt: str) -> str:
        ranked = self._rank_options(x, options, 10)
        if "Skills: Ranked list" in prompt:
            return f"Reasoning: Let's think step by step in order to identify the most applicable skills from the snippet. We match words.\nSkills: {'; '.join(ranked)}"
        lines = "\n".join(f"{i}. {o}" for i, o in enumerate(ranked, start=1))
        return (
            "Reasoning: The job vacancy snippet explicitly mentions several requirements.\n"
            f"Therefore, we select the following {len(ranked)} most applicable options:\n{lines}"
        )

    def _judge(self, section: str) -> str:
        x = self._field(section, "Job record:") or ""
        lines = section.splitlines()
        opts: list[str] = []
        if "Options:" in lines:
            rest = "; ".join(lines[lines.index("Options:") + 1 :])
            opts = [o.strip() for o in rest.split(";") if o.strip()]
        real = [o for o in opts if o != NONE_LABEL]
        ranked = self._rank_options(x, real, 1)
        if not ranked or self._score(x, Counter(map(_stem, _words(ranked[0])))) == 0:
            return f"Answer: {NONE_LABEL}"
        return f"Answer: {ranked[0]}"

    def _knowledge(self, prompt: str, section: str) -> str:
        last = [l.strip() for l in section.splitlines() if l.strip()]
        answer = "0"
        if prompt.startswith("Fill in"):
            m = _RECALL.search(last[-1])
            if m:
                answer = self._answer(m.group("qfield"), m.group("query"), m.group("afield"))
        else:
            m = next((_RECOG.search(l) for l in last if _RECOG.search(l)), None)
            opts = last[last.index("Options:") + 1 :] if "Options:" in last else []
            if m:
                answer = self._answer(m.group("qfield"), m.group("query"), m.group("afield"))
                if opts and answer not in opts:
                    answer = opts[0]
        if answer != "0" and self._coin(prompt) < self.error_rate:
            answer = "0"
        return f"<answer>{answer}</answer>"

    def _answer(self, qfield: str, query: str, afield: str) -> str:
        try:
            if qfield == "title":
                e = lookup(self.taxonomy, query)
                return e.id if afield == "8-digit code" else e.major
            e = lookup(self.taxonomy, query)
            return e.title
        except TaxonomyError:
            return "0"
