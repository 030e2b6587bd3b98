"""Embedding-based similarity selection of demonstrations and definitions.

Two embedding backends share one interface: an OpenAI-compatible HTTP
embedder (with a disk cache keyed by text digest) and an offline hashed
bag-of-words fallback used for deterministic tests.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Corpus, TableDoc
from .serialize import SerializationOptions, serialize_table

EMBED_DIM = 512


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]
    source_id: str = ""

    def __post_init__(self):
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("embedding contains non-finite entries")

    @property
    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)


class HashedEmbedder:
    """Deterministic fallback: hashed bag-of-words, L2-normalized.

    Tokens are maximal runs of lowercase alphanumerics; each token is bucketed
    into a fixed 512-dim vector by its MD5 hash. Empty input embeds to the
    zero vector (degenerate; cosine against it is an error).
    """

    model_id = "hashed-bow-512"

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def embed(self, text: str, source_id: str = "") -> EmbeddingVector:
        values = [0.0] * self.dim
        for token in _tokenize(text):
            bucket = int(hashlib.md5(token.encode("utf-8")).hexdigest(), 16) % self.dim
            values[bucket] += 1.0
        norm = math.sqrt(sum(v * v for v in values))
        if norm > 0:
            values = [v / norm for v in values]
        return EmbeddingVector(values=tuple(values), source_id=source_id)


class HttpEmbedder:
    """OpenAI-compatible embeddings client with a JSONL disk cache."""

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        cache_path: str | Path | None = None,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        session=None,
    ):
        self.endpoint = endpoint
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.cache_path = Path(cache_path) if cache_path else None
        self._cache: dict[str, tuple[float, ...]] = {}
        self._lock = threading.Lock()
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        if self.cache_path and self.cache_path.exists():
            with self.cache_path.open(encoding="utf-8") as handle:
                for line in handle:
                    raw = json.loads(line)
                    if raw["model_id"] == self.model_id:
                        self._cache[raw["digest"]] = tuple(raw["vector"])

    def embed(self, text: str, source_id: str = "") -> EmbeddingVector:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        cached = self._cache.get(digest)
        if cached is not None:
            return EmbeddingVector(values=cached, source_id=source_id)

        import os

        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        response = self.session.post(
            self.endpoint,
            json={"input": text, "model": self.model_id},
            headers=headers,
            timeout=self.timeout,
        )
        response.raise_for_status()
        vector = tuple(response.json()["data"][0]["embedding"])
        with self._lock:
            self._cache[digest] = vector
            if self.cache_path:
                with self.cache_path.open("a", encoding="utf-8", newline="\n") as handle:
                    handle.write(
                        json.dumps(
                            {"digest": digest, "model_id": self.model_id, "vector": list(vector)}
                        )
                        + "\n"
                    )
        return EmbeddingVector(values=vector, source_id=source_id)


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    if len(u.values) != len(v.values):
        raise ValueError(f"dimension mismatch: {len(u.values)} vs {len(v.values)}")
    # guard on the computed norms, not element-wise zeroness: squares of
    # denormal entries can underflow to a zero norm
    nu = math.sqrt(sum(a * a for a in u.values))
    nv = math.sqrt(sum(b * b for b in v.values))
    if nu == 0.0 and nv == 0.0:
        raise ValueError("cosine undefined for two zero vectors")
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(a * b for a, b in zip(u.values, v.values))
    return dot / (nu * nv)


def table_text(table: TableDoc, opts: SerializationOptions = SerializationOptions()) -> str:
    """Text embedded for a table: its serialization, never its gold labels."""
    return serialize_table(table, opts)


def rank_by_similarity(
    query: EmbeddingVector,
    candidates: Sequence[tuple[str, EmbeddingVector]],
    k: int,
) -> list[str]:
    """Top-k candidate ids by cosine, descending; ties break on id."""
    scored = []
    for candidate_id, vector in candidates:
        try:
            similarity = cosine(query, vector)
        except ValueError:  # degenerate zero-vector pair: rank last
            similarity = -2.0
        scored.append((candidate_id, similarity))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return [candidate_id for candidate_id, _ in scored[:k]]


def select_demonstrations(
    test_table: TableDoc,
    train: Corpus,
    k: int = 5,
    embedder=None,
    opts: SerializationOptions = SerializationOptions(),
) -> list[str]:
    """Ids of the k most similar train tables to the test table."""
    embedder = embedder or HashedEmbedder()
    query = embedder.embed(table_text(test_table, opts), source_id=test_table.table_id)
    candidates = [
        (t.table_id, embedder.embed(table_text(t, opts), source_id=t.table_id))
        for t in train.split("train")
    ]
    return rank_by_similarity(query, candidates, k)


def select_definitions(test_table: TableDoc, defs: Sequence, k: int = 10, embedder=None, opts: SerializationOptions = SerializationOptions()) -> list:
    """The k definitions most similar to the test table, by definition text."""
    embedder = embedder or HashedEmbedder()
    query = embedder.embed(table_text(test_table, opts), source_id=test_table.table_id)
    by_label = {d.label: d for d in defs}
    candidates = [
        (d.label, embedder.embed(d.text, source_id=d.label)) for d in defs
    ]
    ranked = rank_by_similarity(query, candidates, k)
    return [by_label[label] for label in ranked]


def mean_demo_similarity(
    corpus: Corpus,
    k: int = 5,
    embedder=None,
    opts: SerializationOptions = SerializationOptions(),
    split: str = "test",
) -> float:
    """Mean over test tables of the mean cosine to their k demonstrations."""
    embedder = embedder or HashedEmbedder()
    train_vectors = [
        (t.table_id, embedder.embed(table_text(t, opts), source_id=t.table_id))
        for t in corpus.split("train")
    ]
    vector_by_id = dict(train_vectors)
    per_table_means = []
    for table in corpus.split(split):
        query = embedder.embed(table_text(table, opts), source_id=table.table_id)
        chosen = rank_by_similarity(query, train_vectors, k)
        if not chosen:
            continue
        per_table_means.append(
            sum(cosine(query, vector_by_id[c]) for c in chosen) / len(chosen)
        )
    if not per_table_means:
        raise ValueError("no tables to average over")
    return sum(per_table_means) / len(per_table_means)


def _tokenize(text: str) -> list[str]:
    tokens = []
    current = []
    for char in text.lower():
        if char.isalnum():
            current.append(char)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens
