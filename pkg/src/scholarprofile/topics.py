"""Collapsed-Gibbs LDA plus the per-researcher topic-stability summaries built on it."""
from __future__ import annotations

import csv
import io
import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import TokenizedDoc

SNAPSHOT_VERSION = 1
STABLE_BELOW = 0.3
EVOLVING_ABOVE = 0.7


@dataclass(frozen=True, eq=False)
class LdaModel:
    num_topics: int
    alpha: float
    beta: float
    vocabulary: tuple[str, ...]
    topic_word_counts: np.ndarray  # K x V
    doc_topic_counts: np.ndarray  # D x K
    seed: int
    iterations: int = 0

    def __post_init__(self):
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ValueError("vocabulary has duplicates")
        if self.topic_word_counts.shape != (self.num_topics, len(self.vocabulary)):
            raise ValueError("topic_word_counts shape does not match K x V")
        if self.doc_topic_counts.ndim != 2 or self.doc_topic_counts.shape[1] != self.num_topics:
            raise ValueError("doc_topic_counts shape does not match D x K")
        if (self.topic_word_counts < 0).any() or (self.doc_topic_counts < 0).any():
            raise ValueError("counts must be non-negative")
        self.topic_word_counts.setflags(write=False)
        self.doc_topic_counts.setflags(write=False)

    @property
    def num_docs(self) -> int:
        return self.doc_topic_counts.shape[0]

    def doc_topic_proportions(self, d: int) -> np.ndarray:
        row = self.doc_topic_counts[d] + self.alpha
        return row / row.sum()

    def top_words(self, k: int, n: int = 10) -> list[str]:
        order = np.argsort(-self.topic_word_counts[k], kind="stable")[:n]
        return [self.vocabulary[i] for i in order]

    def to_json(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "num_topics": self.num_topics,
            "alpha": self.alpha,
            "beta": self.beta,
            "seed": self.seed,
            "iterations": self.iterations,
            "vocabulary": list(self.vocabulary),
            "topic_word_counts": self.topic_word_counts.tolist(),
            "doc_topic_counts": self.doc_topic_counts.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "LdaModel":
        if data.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported model snapshot version {data.get('version')!r}")
        k = int(data["num_topics"])
        dtc = np.asarray(data["doc_topic_counts"], dtype=np.int64).reshape(-1, k)
        return cls(
            num_topics=k,
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            vocabulary=tuple(data["vocabulary"]),
            topic_word_counts=np.asarray(data["topic_word_counts"], dtype=np.int64).reshape(k, -1),
            doc_topic_counts=dtc,
            seed=int(data["seed"]),
            iterations=int(data.get("iterations", 0)),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LdaModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _tokens(doc) -> Sequence[str]:
    return doc.tokens if isinstance(doc, TokenizedDoc) else doc


def fit_lda(docs: Sequence[TokenizedDoc], K: int = 30, alpha: float | None = None,
            beta: float = 0.01, iterations: int = 500, seed: int = 0) -> LdaModel:
    """Fit LDA by collapsed Gibbs sampling.

    ``alpha`` defaults to 50/K.  The chain is fully determined by the inputs and
    ``seed``; empty documents are allowed and keep all-zero count rows.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not docs:
        raise ValueError("no documents")
    alpha = 50.0 / K if alpha is None else float(alpha)
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")

    vocab: dict[str, int] = {}
    words: list[np.ndarray] = []
    for doc in docs:
        ids = [vocab.setdefault(t, len(vocab)) for t in _tokens(doc)]
        words.append(np.asarray(ids, dtype=np.int64))
    V = len(vocab)
    total = sum(len(w) for w in words)
    if V == 0:
        raise ValueError("empty vocabulary")
    if K > total:
        raise ValueError(f"K={K} exceeds the corpus token count {total}")

    rng = np.random.default_rng(seed)
    D = len(words)
    nkw = np.zeros((K, V), dtype=np.int64)
    ndk = np.zeros((D, K), dtype=np.int64)
    nk = np.zeros(K, dtype=np.int64)
    z = [rng.integers(0, K, size=len(w)) for w in words]
    for d, (w, zd) in enumerate(zip(words, z)):
        np.add.at(nkw, (zd, w), 1)
        np.add.at(ndk[d], zd, 1)
        np.add.at(nk, zd, 1)

    # Plain-float working copies keep the per-token update cheap.
    nkw_l = nkw.T.tolist()  # V x K
    ndk_l = ndk.tolist()
    nk_l = nk.tolist()
    z_l = [zd.tolist() for zd in z]
    w_l = [w.tolist() for w in words]
    vbeta = V * beta
    topics = range(K)
    for _ in range(iterations):
        draws = rng.random(total).tolist()
        pos = 0
        for d in range(D):
            nd = ndk_l[d]
            zd = z_l[d]
            for i, w in enumerate(w_l[d]):
                old = zd[i]
                nw = nkw_l[w]
                nd[old] -= 1
                nw[old] -= 1
                nk_l[old] -= 1
                acc = 0.0
                cum = []
                for k in topics:
                    acc += (nd[k] + alpha) * (nw[k] + beta) / (nk_l[k] + vbeta)
                    cum.append(acc)
                u = draws[pos] * acc
                pos += 1
                new = 0
                while new < K - 1 and cum[new] <= u:
                    new += 1
                zd[i] = new
                nd[new] += 1
                nw[new] += 1
                nk_l[new] += 1

    return LdaModel(
        num_topics=K,
        alpha=alpha,
        beta=beta,
        vocabulary=tuple(vocab),
        topic_word_counts=np.asarray(nkw_l, dtype=np.int64).reshape(V, K).T.copy(),
        doc_topic_counts=np.asarray(ndk_l, dtype=np.int64).reshape(D, K),
        seed=seed,
        iterations=iterations,
    )


def dominant_topic(model: LdaModel, doc_index: int) -> int:
    # argmax returns the first maximum, i.e. the lowest topic index on ties
    return int(np.argmax(model.doc_topic_counts[doc_index] + model.alpha))


def group_docs_by_topic(model: LdaModel, docs: Sequence | None = None) -> dict[int, list[int]]:
    """Partition document indices by dominant topic; unused topics map to []."""
    n = model.num_docs if docs is None else len(docs)
    if n != model.num_docs:
        raise ValueError(f"model was fitted on {model.num_docs} docs, got {n}")
    groups: dict[int, list[int]] = {k: [] for k in range(model.num_topics)}
    for d in range(n):
        groups[dominant_topic(model, d)].append(d)
    return groups


@dataclass(frozen=True)
class TopicAssignment:
    researcher_id: str
    pmid: str
    year: int
    dominant_topic: int


def diversity_score(assignments: Sequence[TopicAssignment]) -> float:
    if not assignments:
        raise ValueError("diversity_score needs at least one publication")
    return len({a.dominant_topic for a in assignments}) / len(assignments)


def diversity_band(score: float) -> str:
    if score < STABLE_BELOW:
        return "stable"
    if score > EVOLVING_ABOVE:
        return "evolving"
    return "moderate"


def year_heatmap(assignments: Iterable[TopicAssignment], years: Iterable[int],
                 num_topics: int) -> np.ndarray:
    """Rows = years, columns = topics; each row is that year's dominant-topic mix."""
    years = list(years)
    index = {y: i for i, y in enumerate(years)}
    counts = np.zeros((len(years), num_topics), dtype=float)
    for a in assignments:
        if a.year in index:
            counts[index[a.year], a.dominant_topic] += 1
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def year_transitions(assignments: Iterable[TopicAssignment], num_topics: int) -> np.ndarray:
    """Row-normalised topic -> topic flow between consecutive publishing years."""
    assignments = list(assignments)
    if not assignments:
        return np.zeros((num_topics, num_topics))
    years = sorted({a.year for a in assignments})
    rows = year_heatmap(assignments, years, num_topics)
    flow = np.zeros((num_topics, num_topics))
    for a, b in zip(rows[:-1], rows[1:]):
        flow += np.outer(a, b)
    totals = flow.sum(axis=1, keepdims=True)
    return np.divide(flow, totals, out=np.zeros_like(flow), where=totals > 0)


def heatmap_csv(rows_by_researcher: dict[str, tuple[list[int], np.ndarray]],
                num_topics: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["researcher_id", "year", *[f"topic_{k}" for k in range(num_topics)]])
    for rid in sorted(rows_by_researcher):
        years, matrix = rows_by_researcher[rid]
        for year, row in zip(years, matrix):
            writer.writerow([rid, year, *[f"{v:.6f}" for v in row]])
    return buf.getvalue()


def transitions_csv(matrices: dict[str, np.ndarray], num_topics: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["researcher_id", "from_topic", *[f"topic_{k}" for k in range(num_topics)]])
    for rid in sorted(matrices):
        for k, row in enumerate(matrices[rid]):
            if row.any():
                writer.writerow([rid, k, *[f"{v:.6f}" for v in row]])
    return buf.getvalue()


def band_counts(scores: dict[str, float]) -> dict[str, int]:
    counts = Counter(diversity_band(s) for s in scores.values())
    return {b: counts.get(b, 0) for b in ("stable", "moderate", "evolving")}


def assignments_by_researcher(model: LdaModel, doc_meta: Sequence[tuple[str, str, int]]
                              ) -> dict[str, list[TopicAssignment]]:
    """doc_meta[d] = (researcher_id, pmid, year) for the d-th fitted document."""
    out: dict[str, list[TopicAssignment]] = defaultdict(list)
    for d, (rid, pmid, year) in enumerate(doc_meta):
        out[rid].append(TopicAssignment(rid, pmid, year, dominant_topic(model, d)))
    return dict(out)
