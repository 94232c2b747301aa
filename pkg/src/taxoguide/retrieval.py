"""Embedding-based candidate retrieval over taxonomy documents.

Documents are built per retrieval unit, embedded by a pluggable provider and
scanned exhaustively with cosine similarity. The on-disk index layout is::

    byte 0        format version (currently 1)
    bytes 1..4    header length H, uint32 little-endian
    bytes 5..5+H  UTF-8 JSON header: taxonomy_name, unit, provider_id, dim,
                  count, documents (list of [entity_id, text])
    remainder     count * dim float32 values, little-endian, row-major
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .taxonomy import Taxonomy, TaxonomyEntity

INDEX_VERSION = 1
UNITS = ("sentence", "label")

# Sentence-transformer defaults per unit.
DEFAULT_MODELS = {"sentence": "multi-qa-mpnet-base-dot-v1", "label": "all-mpnet-base-v2"}


class RetrievalError(Exception):
    pass


class ProviderUnavailable(RetrievalError):
    pass


class DimensionMismatch(RetrievalError, ValueError):
    pass


class ZeroVector(RetrievalError, ValueError):
    pass


class EmptyInference(RetrievalError, ValueError):
    pass


class IndexFormatError(RetrievalError):
    pass


class EmbeddingProvider(Protocol):
    provider_id: str

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


_TOKEN = re.compile(r"\w+", re.UNICODE)


@dataclass
class HashingEmbeddingProvider:
    """Offline, seeded pseudo-random embeddings.

    ``granularity="text"`` gives every distinct string an independent Gaussian
    vector. ``granularity="token"`` sums per-token vectors, so texts sharing
    words land near each other; handy for demos and pipeline tests.
    """

    dim: int = 64
    seed: int = 0
    granularity: str = "token"

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.granularity not in ("text", "token"):
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def provider_id(self) -> str:
        return f"hashing:{self.granularity}:d{self.dim}:s{self.seed}"

    def _vector(self, key: str) -> np.ndarray:
        cache = self.__dict__.setdefault("_memo", {})
        vec = cache.get(key)
        if vec is None:
            vec = cache[key] = self._draw(key)
        return vec

    def _draw(self, key: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{key}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        return rng.standard_normal(self.dim)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            if self.granularity == "text":
                out[i] = self._vector(text)
                continue
            tokens = _TOKEN.findall(text.casefold()) or [text]
            out[i] = np.sum([self._vector(t) for t in tokens], axis=0)
        return out


class SentenceTransformerProvider:
    """Local sentence-transformers model, loaded on first use."""

    def __init__(self, model_name: str, batch_size: int = 64, device: Optional[str] = None):
        self.model_name = model_name
        self.batch_size = batch_size
        self.device = device
        self._model = None

    @property
    def provider_id(self) -> str:
        return f"sentence-transformers:{self.model_name}"

    def _load(self):
        if self._model is None:
            try:
                from sentence_transformers import SentenceTransformer
            except ImportError as exc:
                raise ProviderUnavailable("sentence-transformers is not installed") from exc
            try:
                self._model = SentenceTransformer(self.model_name, device=self.device)
            except Exception as exc:  # network, missing weights, bad name
                raise ProviderUnavailable(f"cannot load {self.model_name}: {exc}") from exc
        return self._model

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        model = self._load()
        vecs = model.encode(list(texts), batch_size=self.batch_size, convert_to_numpy=True)
        return np.asarray(vecs, dtype=np.float64)


class HTTPEmbeddingProvider:
    """Remote embeddings endpoint speaking the OpenAI ``/embeddings`` protocol."""

    def __init__(
        self,
        model: str,
        base_url: str = "https://api.openai.com/v1",
        api_key_env: str = "OPENAI_API_KEY",
        batch_size: int = 256,
        timeout: float = 60.0,
    ):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.batch_size = batch_size
        self.timeout = timeout

    @property
    def provider_id(self) -> str:
        return f"http:{self.base_url}:{self.model}"

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        key = os.environ.get(self.api_key_env)
        if not key:
            raise ProviderUnavailable(f"environment variable {self.api_key_env} is not set")
        rows: list[list[float]] = []
        with httpx.Client(timeout=self.timeout) as client:
            for start in range(0, len(texts), self.batch_size):
                chunk = list(texts[start : start + self.batch_size])
                try:
                    resp = client.post(
                        f"{self.base_url}/embeddings",
                        headers={"Authorization": f"Bearer {key}"},
                        json={"model": self.model, "input": chunk},
                    )
                except httpx.HTTPError as exc:
                    raise ProviderUnavailable(str(exc)) from exc
                if resp.status_code != 200:
                    raise ProviderUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
                data = sorted(resp.json()["data"], key=lambda d: d["index"])
                rows.extend(d["embedding"] for d in data)
        return np.asarray(rows, dtype=np.float64)


def embed(provider: EmbeddingProvider, texts: Sequence[str]) -> np.ndarray:
    """Embed ``texts`` into a ``(len(texts), dim)`` float64 array, validating shape and norms."""
    if len(texts) == 0:
        raise ValueError("embed() needs at least one text")
    vecs = provider.embed_texts(list(texts))
    try:
        arr = np.asarray(vecs, dtype=np.float64)
    except ValueError as exc:  # ragged rows
        raise DimensionMismatch(f"{provider.provider_id} returned vectors of unequal length") from exc
    if arr.ndim != 2 or arr.shape[0] != len(texts) or arr.shape[1] < 1:
        raise DimensionMismatch(f"{provider.provider_id} returned shape {arr.shape} for {len(texts)} texts")
    norms = np.linalg.norm(arr, axis=1)
    if not np.all(norms > 0):
        bad = int(np.flatnonzero(~(norms > 0))[0])
        raise ZeroVector(f"text #{bad} embedded to a zero vector")
    return arr


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"dims differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def make_document(entity: TaxonomyEntity, unit: str) -> str:
    """Retrieval document for ``entity``: label alone, or label plus description.

    Skills are keyed by their bare preferred label; concept URIs carry no text signal.
    """
    if unit not in UNITS:
        raise ValueError(f"unknown retrieval unit {unit!r}")
    if unit == "label":
        return entity.label
    return f"{entity.label}: {entity.description}"


@dataclass(frozen=True)
class ScoredCandidate:
    entity_id: str
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {"entity_id": self.entity_id, "score": self.score, "rank": self.rank}


@dataclass
class RetrievalIndex:
    taxonomy_name: str
    unit: str
    provider_id: str
    documents: list[tuple[str, str]]
    vectors: np.ndarray  # float32, (count, dim)
    _unit_rows: np.ndarray = field(init=False, repr=False)
    _id_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.documents):
            raise DimensionMismatch(
                f"{len(self.documents)} documents but vectors of shape {self.vectors.shape}"
            )
        v64 = self.vectors.astype(np.float64)
        norms = np.linalg.norm(v64, axis=1)
        if not np.all(norms > 0):
            raise ZeroVector("index holds a zero vector")
        self._unit_rows = v64 / norms[:, None]
        ids = [d[0] for d in self.documents]
        if len(set(ids)) != len(ids):
            raise RetrievalError("index documents repeat an entity id")
        # rank of each row when ids are sorted ascending, for tie-breaks
        order = sorted(range(len(ids)), key=ids.__getitem__)
        self._id_order = np.empty(len(ids), dtype=np.int64)
        self._id_order[order] = np.arange(len(ids))

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.documents)

    def search_vector(self, query_vec, m: int) -> list[ScoredCandidate]:
        if m < 1:
            raise ValueError("m must be >= 1")
        q = np.asarray(query_vec, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[0]} != index dim {self.dim}")
        qn = np.linalg.norm(q)
        if qn == 0:
            raise ZeroVector("query embedded to a zero vector")
        scores = self._unit_rows @ (q / qn)
        order = np.lexsort((self._id_order, -scores))[: min(m, len(self))]
        return [
            ScoredCandidate(self.documents[i][0], float(scores[i]), rank)
            for rank, i in enumerate(order, start=1)
        ]


def build_index(taxonomy: Taxonomy, unit: str, provider: EmbeddingProvider, batch_size: int = 512) -> RetrievalIndex:
    docs = [(e.id, make_document(e, unit)) for e in taxonomy]
    if not docs:
        raise ValueError(f"taxonomy {taxonomy.name} is empty")
    chunks = [embed(provider, [t for _, t in docs[i : i + batch_size]]) for i in range(0, len(docs), batch_size)]
    dims = {c.shape[1] for c in chunks}
    if len(dims) != 1:
        raise DimensionMismatch(f"provider returned dims {sorted(dims)} across batches")
    return RetrievalIndex(taxonomy.name, unit, provider.provider_id, docs, np.vstack(chunks))


def save_index(index: RetrievalIndex, path: str | Path) -> Path:
    """Write ``index`` atomically; a crash never leaves a truncated file at ``path``."""
    path = Path(path)
    header = json.dumps(
        {
            "taxonomy_name": index.taxonomy_name,
            "unit": index.unit,
            "provider_id": index.provider_id,
            "dim": index.dim,
            "count": len(index),
            "documents": [list(d) for d in index.documents],
        },
        ensure_ascii=False,
        sort_keys=True,
    ).encode("utf-8")
    payload = index.vectors.astype("<f4", copy=False).tobytes(order="C")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes([INDEX_VERSION]))
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_index(path: str | Path) -> RetrievalIndex:
    raw = Path(path).read_bytes()
    if len(raw) < 5 or raw[0] != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version")
    (hlen,) = struct.unpack("<I", raw[1:5])
    header = json.loads(raw[5 : 5 + hlen].decode("utf-8"))
    count, dim = header["count"], header["dim"]
    block = raw[5 + hlen :]
    if len(block) != count * dim * 4:
        raise IndexFormatError(f"{path}: expected {count * dim * 4} vector bytes, found {len(block)}")
    vectors = np.frombuffer(block, dtype="<f4").reshape(count, dim)
    docs = [(d[0], d[1]) for d in header["documents"]]
    return RetrievalIndex(header["taxonomy_name"], header["unit"], header["provider_id"], docs, vectors)


def make_query(inference, unit: str) -> str:
    """Retrieval query from an inference result; the raw input never enters it.

    ``inference`` needs ``rationale`` (str) and ``label_texts()`` (list of str).
    """
    labels = "; ".join(inference.label_texts())
    rationale = (inference.rationale or "").strip()
    if unit == "label":
        query = labels
    elif unit == "sentence":
        query = " ".join(p for p in (rationale, labels) if p)
    else:
        raise ValueError(f"unknown retrieval unit {unit!r}")
    if not query:
        raise EmptyInference("inference has neither rationale nor labels")
    return query


def retrieve(index: RetrievalIndex, query: str, m: int, provider: EmbeddingProvider) -> list[ScoredCandidate]:
    if m < 1:
        raise ValueError("m must be >= 1")
    if provider.provider_id != index.provider_id:
        raise RetrievalError(
            f"index was built with {index.provider_id}, query provider is {provider.provider_id}"
        )
    (qvec,) = embed(provider, [query])
    return index.search_vector(qvec, m)
