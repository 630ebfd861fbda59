"""TF-IDF vocabulary divergence between profiles, plus MeSH-vocabulary novelty filtering."""
from __future__ import annotations

import math
import os
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .corpus import TokenizedDoc, default_stoplist, remove_stopwords, tokenize

DEFAULT_EPSILON = 1e-10


@dataclass(frozen=True)
class TfIdfVector:
    weights: Mapping[str, float]
    doc_length: int

    @property
    def terms(self) -> frozenset[str]:
        return frozenset(self.weights)


@dataclass(frozen=True)
class TermDistribution:
    probs: Mapping[str, float]

    @property
    def support(self) -> frozenset[str]:
        return frozenset(self.probs)


class KLDirection(str, Enum):
    MACHINE_TO_HUMAN = "machine-human"
    HUMAN_TO_MACHINE = "human-machine"


def tfidf_corpus(docs: Sequence[TokenizedDoc], stoplist: Iterable[str] | None = None
                 ) -> list[TfIdfVector]:
    """Raw-count tf times ln(N/df) idf, computed after stopword removal."""
    if len(docs) < 2:
        raise ValueError("tf-idf needs a corpus of at least 2 documents")
    stop = default_stoplist() if stoplist is None else stoplist
    counts = [Counter(remove_stopwords(d, stop).tokens) for d in docs]
    df: Counter[str] = Counter()
    for c in counts:
        df.update(c.keys())
    n = len(docs)
    idf = {t: math.log(n / k) for t, k in df.items()}
    return [
        TfIdfVector({t: tf * idf[t] for t, tf in sorted(c.items())}, sum(c.values()))
        for c in counts
    ]


def to_distribution(vec: TfIdfVector, support: Iterable[str],
                    epsilon: float = DEFAULT_EPSILON) -> TermDistribution:
    support = sorted(set(support))
    if not support:
        raise ValueError("support must be non-empty")
    raw = {t: vec.weights.get(t, 0.0) + epsilon for t in support}
    total = math.fsum(raw.values())
    return TermDistribution({t: v / total for t, v in raw.items()})


def kl_divergence(p: TermDistribution, q: TermDistribution) -> float:
    """D(p || q) in nats."""
    if p.probs.keys() != q.probs.keys():
        raise ValueError("distributions must share the same support")
    total = math.fsum(
        pv * math.log(pv / q.probs[t]) for t, pv in p.probs.items() if pv > 0
    )
    return max(total, 0.0)


def pair_kl(machine: TfIdfVector, human: TfIdfVector,
            direction: KLDirection | str = KLDirection.MACHINE_TO_HUMAN,
            epsilon: float = DEFAULT_EPSILON) -> float:
    """KL over the union of both documents' terms."""
    support = machine.terms | human.terms
    if not support:
        return 0.0
    p = to_distribution(machine, support, epsilon)
    q = to_distribution(human, support, epsilon)
    if KLDirection(direction) is KLDirection.HUMAN_TO_MACHINE:
        p, q = q, p
    return kl_divergence(p, q)


def unique_terms(doc_a: TfIdfVector, doc_b: TfIdfVector) -> frozenset[str]:
    """Terms weighted in ``doc_a`` that never occur in ``doc_b``."""
    return frozenset(t for t, w in doc_a.weights.items() if w > 0 and t not in doc_b.weights)


def unique_phrases(tokens_a: Sequence[str], tokens_b: Sequence[str],
                   sizes: Iterable[int] = (2, 3)) -> frozenset[str]:
    """Multi-token windows of ``tokens_a`` that never occur as windows of ``tokens_b``."""
    out = set()
    for n in sizes:
        seen_b = {tuple(tokens_b[i:i + n]) for i in range(len(tokens_b) - n + 1)}
        for i in range(len(tokens_a) - n + 1):
            gram = tuple(tokens_a[i:i + n])
            if gram not in seen_b:
                out.add(" ".join(gram))
    return frozenset(out)


# -- MeSH vocabulary ------------------------------------------------------

def normalize_descriptor(name: str) -> str:
    return " ".join(tokenize(name).tokens)


@dataclass
class MeshVocabulary:
    descriptors: set[str] = field(default_factory=set)
    tree_numbers: dict[str, list[str]] = field(default_factory=dict)
    _keys: dict[str, str] = field(default_factory=dict, repr=False)

    def add(self, name: str, trees: Iterable[str] = ()) -> None:
        low = name.strip().lower()
        if not low:
            return
        self.descriptors.add(low)
        self.tree_numbers.setdefault(low, [])
        for t in trees:
            if t and t not in self.tree_numbers[low]:
                self.tree_numbers[low].append(t)
        self._keys.setdefault(normalize_descriptor(low), low)

    def lookup(self, term: str) -> str | None:
        """Canonical lowercase descriptor for ``term``, matched case-insensitively."""
        low = term.strip().lower()
        if low in self.descriptors:
            return low
        return self._keys.get(normalize_descriptor(low))

    def __contains__(self, term: str) -> bool:
        return self.lookup(term) is not None

    def trees(self, term: str) -> list[str]:
        key = self.lookup(term)
        return list(self.tree_numbers.get(key, ())) if key else []

    def __len__(self):
        return len(self.descriptors)


class MeshParseError(ValueError):
    def __init__(self, message: str, element_path: str = ""):
        super().__init__(f"{message}" + (f" (at {element_path})" if element_path else ""))
        self.element_path = element_path


def _load_mesh_xml(path) -> MeshVocabulary:
    vocab = MeshVocabulary()
    stack: list[str] = []
    try:
        for event, elem in ET.iterparse(path, events=("start", "end")):
            if event == "start":
                stack.append(elem.tag)
                continue
            stack.pop()
            if elem.tag == "DescriptorRecord":
                name = elem.findtext("DescriptorName/String")
                if not name:
                    raise MeshParseError("DescriptorRecord without DescriptorName/String",
                                         "/".join(stack + ["DescriptorRecord"]))
                trees = [t.text.strip() for t in elem.iterfind("TreeNumberList/TreeNumber")
                         if t.text]
                vocab.add(name, trees)
                elem.clear()
    except ET.ParseError as exc:
        raise MeshParseError(f"malformed MeSH XML: {exc}", "/".join(stack)) from exc
    return vocab


def _load_mesh_text(path) -> MeshVocabulary:
    vocab = MeshVocabulary()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            name, *rest = line.split("\t")
            trees = [t.strip() for col in rest for t in col.split(";") if t.strip()]
            vocab.add(name, trees)
    return vocab


def load_mesh_vocabulary(path: str | os.PathLike) -> MeshVocabulary:
    with open(path, "rb") as fh:
        head = fh.read(4096).lstrip()
    if not head:
        raise MeshParseError(f"{path}: empty MeSH vocabulary file")
    vocab = _load_mesh_xml(path) if head.startswith(b"<") else _load_mesh_text(path)
    if not len(vocab):
        raise MeshParseError(f"{path}: no descriptors found")
    return vocab


def mesh_novelty(unique: Iterable[str], vocab: MeshVocabulary) -> list[str]:
    """Candidates (single terms or space-joined phrases) that name a MeSH descriptor."""
    return sorted({vocab.lookup(t) for t in unique if vocab.lookup(t) is not None})


def novel_mesh_terms(tokens_a: Sequence[str], tokens_b: Sequence[str], vec_a: TfIdfVector,
                     vec_b: TfIdfVector, vocab: MeshVocabulary) -> list[str]:
    """MeSH descriptors that ``a`` uses and ``b`` does not (1-3 token windows)."""
    candidates = set(unique_terms(vec_a, vec_b)) | unique_phrases(tokens_a, tokens_b)
    return mesh_novelty(candidates, vocab)
