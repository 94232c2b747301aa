"""Loading, validating and indexing occupation (O*NET-SOC) and skill (ESCO) taxonomies."""

from __future__ import annotations

import csv
import gzip
import io
import random
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

SOC_PATTERN = re.compile(r"^\d{2}-\d{4}\.\d{2}$")
NONE_CODE = "00-0000.00"
NONE_LABEL = f"None ({NONE_CODE})"

ONET_COLUMNS = ("O*NET-SOC Code", "Title", "Description")
ESCO_COLUMNS = ("conceptUri", "preferredLabel", "description")

# Published sizes of the two supported releases.
EXPECTED_SIZES = {"onet": 1016, "esco": 13939}

_COMPOSITE = re.compile(r"^(?P<title>.*?)\s*\((?P<code>[^()]*)\)\s*\.?$")


class TaxonomyError(Exception):
    """Base class for taxonomy loading and lookup failures."""


class MalformedCode(TaxonomyError, ValueError):
    pass


class MissingColumn(TaxonomyError):
    pass


class DuplicateId(TaxonomyError):
    pass


class EmptyField(TaxonomyError):
    pass


class NotFound(TaxonomyError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class AmbiguousTitle(TaxonomyError):
    pass


class InsufficientPool(TaxonomyError):
    pass


class SizeMismatch(TaxonomyError):
    pass


@dataclass(frozen=True)
class SocCode:
    raw: str
    major: str
    minor: str
    broad: str
    detailed: str

    @property
    def specific(self) -> str:
        return self.raw

    @property
    def is_none(self) -> bool:
        return self.raw == NONE_CODE

    def __str__(self) -> str:
        return self.raw


def parse_soc_code(text: str) -> SocCode:
    """Split a ``DD-DDDD.DD`` code into its five hierarchy levels.

    >>> parse_soc_code("15-2051.00").broad
    '15-205'
    """
    if not isinstance(text, str) or not SOC_PATTERN.match(text):
        raise MalformedCode(f"not an O*NET-SOC code: {text!r}")
    return SocCode(raw=text, major=text[:2], minor=text[:4], broad=text[:6], detailed=text[:7])


def normalize_title(title: str) -> str:
    """Case-fold, collapse whitespace and drop trailing punctuation."""
    folded = " ".join(title.casefold().split())
    return folded.rstrip(string.punctuation + " ")


@dataclass(frozen=True)
class TaxonomyEntity:
    id: str
    title: str
    description: str
    kind: str = "occupation"
    code: Optional[SocCode] = None
    # ESCO "knowledge" vs "skill/competence"; None when the source file does not say.
    skill_type: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in ("occupation", "skill"):
            raise ValueError(f"unknown entity kind {self.kind!r}")
        if not self.title.strip():
            raise EmptyField(f"entity {self.id!r} has an empty title")
        if not self.description.strip():
            raise EmptyField(f"entity {self.id!r} has an empty description")
        if self.kind == "occupation" and (self.code is None or self.code.raw != self.id):
            raise ValueError(f"occupation {self.id!r} needs a matching SOC code")

    @property
    def label(self) -> str:
        """Composite ``Title (code)`` for occupations, bare title for skills."""
        if self.kind == "occupation":
            return f"{self.title} ({self.id})"
        return self.title

    @property
    def major(self) -> Optional[str]:
        return self.code.major if self.code else None


@dataclass(frozen=True)
class Taxonomy:
    name: str
    entities: tuple[TaxonomyEntity, ...]
    index_by_id: dict = field(repr=False, compare=False, default_factory=dict)
    index_by_title: dict = field(repr=False, compare=False, default_factory=dict)

    @classmethod
    def from_entities(cls, name: str, entities: Iterable[TaxonomyEntity]) -> "Taxonomy":
        ents = tuple(entities)
        by_id: dict[str, TaxonomyEntity] = {}
        by_title: dict[str, list[TaxonomyEntity]] = {}
        for row, e in enumerate(ents, start=1):
            if e.id in by_id:
                raise DuplicateId(f"row {row}: duplicate id {e.id!r}")
            by_id[e.id] = e
            by_title.setdefault(normalize_title(e.title), []).append(e)
        return cls(name=name, entities=ents, index_by_id=by_id, index_by_title=by_title)

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self) -> Iterator[TaxonomyEntity]:
        return iter(self.entities)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self.index_by_id

    def __getitem__(self, entity_id: str) -> TaxonomyEntity:
        try:
            return self.index_by_id[entity_id]
        except KeyError:
            raise NotFound(f"{entity_id!r} not in taxonomy {self.name}") from None

    @property
    def kind(self) -> str:
        return self.entities[0].kind if self.entities else "occupation"

    def majors(self) -> dict[str, list[TaxonomyEntity]]:
        groups: dict[str, list[TaxonomyEntity]] = {}
        for e in self.entities:
            if e.code is not None:
                groups.setdefault(e.code.major, []).append(e)
        return groups

    def subset(self, ids: Iterable[str], name: Optional[str] = None) -> "Taxonomy":
        keep = set(ids)
        return Taxonomy.from_entities(name or self.name, [e for e in self.entities if e.id in keep])


def _open_text(path: Path) -> io.TextIOBase:
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8-sig", newline="")
    return open(path, encoding="utf-8-sig", newline="")


def _read_rows(path: Path, delimiter: str, columns: Sequence[str]) -> Iterator[tuple[int, dict]]:
    with _open_text(path) as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        for col in columns:
            if col not in header:
                raise MissingColumn(f"{path}: missing column {col!r} (found {header})")
        # data rows start on line 2
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def load_taxonomy(
    path: str | Path,
    format: str,
    name: Optional[str] = None,
    expected_count: Optional[int] | bool = None,
) -> Taxonomy:
    """Read an O*NET occupation table (tab-separated) or ESCO skills table (CSV).

    ``expected_count`` pins the entity count: ``None`` skips the check, ``True``
    uses the published size of the format, an integer overrides it.
    """
    path = Path(path)
    if format == "onet":
        delimiter, columns, kind = "\t", ONET_COLUMNS, "occupation"
        default_name = "onet-soc-2019"
    elif format == "esco":
        delimiter, columns, kind = ",", ESCO_COLUMNS, "skill"
        default_name = "esco-1.2"
    else:
        raise ValueError(f"unknown taxonomy format {format!r}")

    entities: list[TaxonomyEntity] = []
    seen: dict[str, int] = {}
    for lineno, row in _read_rows(path, delimiter, columns):
        ident, title, desc = (str(row.get(c) or "").strip() for c in columns)
        for col, value in zip(columns, (ident, title, desc)):
            if not value:
                raise EmptyField(f"{path}: row {lineno}: empty {col!r}")
        if ident in seen:
            raise DuplicateId(f"{path}: row {lineno}: id {ident!r} already defined on row {seen[ident]}")
        seen[ident] = lineno
        if kind == "occupation":
            try:
                code = parse_soc_code(ident)
            except MalformedCode as exc:
                raise MalformedCode(f"{path}: row {lineno}: {exc}") from None
            entities.append(TaxonomyEntity(ident, title, desc, kind, code))
        else:
            skill_type = (row.get("skillType") or "").strip() or None
            entities.append(TaxonomyEntity(ident, title, desc, kind, None, skill_type))

    if expected_count is True:
        expected_count = EXPECTED_SIZES[format]
    if expected_count is not None and expected_count is not False and len(entities) != expected_count:
        raise SizeMismatch(f"{path}: expected {expected_count} entities, read {len(entities)}")
    return Taxonomy.from_entities(name or default_name, entities)


def lookup(taxonomy: Taxonomy, label: str) -> TaxonomyEntity:
    """Resolve an id, a ``Title (code)`` composite, or a bare title."""
    text = label.strip()
    if text in taxonomy.index_by_id:
        return taxonomy.index_by_id[text]

    m = _COMPOSITE.match(text)
    if m:
        code = m.group("code").strip()
        if code in taxonomy.index_by_id:
            return taxonomy.index_by_id[code]
        if SOC_PATTERN.match(code):
            raise NotFound(f"code {code!r} not in taxonomy {taxonomy.name}")

    hits = taxonomy.index_by_title.get(normalize_title(text), [])
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise AmbiguousTitle(f"title {text!r} matches {[e.id for e in hits]}")
    raise NotFound(f"{label!r} not in taxonomy {taxonomy.name}")


def sample_recognition_options(
    taxonomy: Taxonomy, answer: TaxonomyEntity, rng: random.Random
) -> list[TaxonomyEntity]:
    """Answer + two same-major distractors + two from other majors, shuffled."""
    groups = taxonomy.majors()
    if answer.major is None or answer.major not in groups:
        raise InsufficientPool(f"{answer.id!r} has no major group in {taxonomy.name}")
    same = [e for e in groups[answer.major] if e.id != answer.id]
    others = sorted(m for m in groups if m != answer.major)
    if len(same) < 2:
        raise InsufficientPool(f"major group {answer.major} has {len(same) + 1} entities, need 3")
    if len(others) < 2:
        raise InsufficientPool(f"{taxonomy.name} has {len(others) + 1} major groups, need 3")

    options = [answer, *rng.sample(same, 2)]
    for major in rng.sample(others, 2):
        options.append(rng.choice(groups[major]))
    rng.shuffle(options)
    return options
