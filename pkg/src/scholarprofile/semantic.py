"""Greedy-match cosine similarity over token embeddings (BERTScore-style P/R/F1)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Iterable

import httpx
import numpy as np

DEFAULT_MARKERS = ("[CLS]", "[SEP]", "<s>", "</s>", "[PAD]")


class EmbeddingError(ValueError):
    pass


class EmbeddingTransportError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class TokenEmbeddings:
    tokens: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=float)
        if vectors.ndim != 2:
            raise EmbeddingError("vectors must be a 2-D array (tokens x dim)")
        if len(self.tokens) != vectors.shape[0]:
            raise EmbeddingError(f"{len(self.tokens)} tokens but {vectors.shape[0]} vectors")
        if vectors.shape[0] == 0:
            raise EmbeddingError("no tokens")
        if vectors.shape[1] < 1:
            raise EmbeddingError("embedding dimension must be >= 1")
        if not np.isfinite(vectors).all():
            raise EmbeddingError("vectors contain NaN or infinite components")
        vectors.setflags(write=False)
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_json(cls, data: dict, markers: Iterable[str] = DEFAULT_MARKERS) -> "TokenEmbeddings":
        try:
            tokens = list(data["tokens"])
            vectors = data["vectors"]
        except (KeyError, TypeError) as exc:
            raise EmbeddingError(f"embedding payload lacks {exc}") from exc
        if len(tokens) != len(vectors):
            raise EmbeddingError(f"{len(tokens)} tokens but {len(vectors)} vectors")
        dims = {len(v) for v in vectors}
        if len(dims) > 1:
            raise EmbeddingError(f"vectors have mixed lengths {sorted(dims)}")
        declared = data.get("dim")
        if declared is not None and dims and dims != {int(declared)}:
            raise EmbeddingError(f"declared dim {declared} but vectors have length {dims.pop()}")
        drop = set(markers)
        keep = [i for i, t in enumerate(tokens) if t not in drop]
        if not keep:
            raise EmbeddingError("no tokens after dropping marker tokens")
        arr = np.asarray([vectors[i] for i in keep], dtype=float)
        return cls(tuple(tokens[i] for i in keep), arr)

    def to_json(self) -> dict:
        return {"dim": self.dim, "tokens": list(self.tokens), "vectors": self.vectors.tolist()}


@dataclass(frozen=True)
class SemanticScores:
    precision: float
    recall: float
    f1: float


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def similarity_matrix(candidate: TokenEmbeddings, reference: TokenEmbeddings) -> np.ndarray:
    if candidate.dim != reference.dim:
        raise EmbeddingError(f"dimension mismatch: {candidate.dim} vs {reference.dim}")
    return _unit_rows(candidate.vectors) @ _unit_rows(reference.vectors).T


def greedy_match_score(candidate: TokenEmbeddings, reference: TokenEmbeddings) -> SemanticScores:
    sim = similarity_matrix(candidate, reference)
    p = float(sim.max(axis=1).mean())
    r = float(sim.max(axis=0).mean())
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return SemanticScores(p, r, f1)


def load_embeddings(path: str | os.PathLike,
                    markers: Iterable[str] = DEFAULT_MARKERS) -> TokenEmbeddings:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except ValueError as exc:
            raise EmbeddingError(f"{path}: not valid JSON: {exc}") from exc
    try:
        return TokenEmbeddings.from_json(data, markers)
    except EmbeddingError as exc:
        raise EmbeddingError(f"{path}: {exc}") from exc


def fetch_embeddings(endpoint: str, text: str, client: httpx.Client | None = None,
                     markers: Iterable[str] = DEFAULT_MARKERS, timeout: float = 60.0
                     ) -> TokenEmbeddings:
    """POST {"text": ...} and expect {"tokens": [...], "vectors": [[...]]} back."""
    owned = client is None
    client = client or httpx.Client(timeout=timeout)
    try:
        resp = client.post(endpoint, json={"text": text})
        if resp.status_code >= 400:
            raise EmbeddingTransportError(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise EmbeddingError(f"embedding endpoint returned non-JSON: {exc}") from exc
    except httpx.HTTPError as exc:
        raise EmbeddingTransportError(f"embedding endpoint unreachable: {exc}") from exc
    finally:
        if owned:
            client.close()
    return TokenEmbeddings.from_json(data, markers)

