"""ROUGE-L, BLEU and METEOR over whole-document token sequences."""
from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .porter import stem

log = logging.getLogger(__name__)

EXACT, STEM, SYNONYM = 1, 2, 3
# Exact chunk-minimising search is exponential; past this many search nodes we
# fall back to longest-run-first greedy alignment.
METEOR_NODE_CAP = 200_000
EXACT_SEARCH_MAX_TOKENS = 400  # recursion depth bound


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class LexicalScores:
    rouge_l: RougeScore
    bleu: float
    meteor: float


def _toks(doc) -> Sequence[str]:
    return getattr(doc, "tokens", doc)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> RougeScore:
    c, r = _toks(candidate), _toks(reference)
    if not c or not r:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(c, r)
    p, rec = lcs / len(c), lcs / len(r)
    f1 = 2 * p * rec / (p + rec) if p + rec > 0 else 0.0
    return RougeScore(p, rec, f1)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Single-reference BLEU; zero higher-order matches get add-one smoothing."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    c, r = _toks(candidate), _toks(reference)
    if not c:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngrams(c, n)
        ref = _ngrams(r, n)
        matches = sum(min(k, ref[g]) for g, k in cand.items())
        total = sum(cand.values())
        if matches == 0:
            if n == 1:
                return 0.0
            matches, total = 1, total + 1
        log_sum += math.log(matches / total)
    bp = 1.0 if len(c) >= len(r) else math.exp(1 - len(r) / len(c))
    return bp * math.exp(log_sum / max_n)


@dataclass
class SynonymTable:
    """word -> set of synset ids; two different words match if they share one."""
    synsets: dict[str, set[str]] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SynonymTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or not parts[0] or not parts[1]:
                    raise ValueError(f"{path}:{lineno}: expected word<TAB>synset_id")
                table.add(parts[0], parts[1])
        return table

    def add(self, word: str, synset: str) -> None:
        self.synsets.setdefault(word.lower(), set()).add(synset)

    def related(self, a: str, b: str) -> bool:
        sa = self.synsets.get(a)
        return bool(sa) and not sa.isdisjoint(self.synsets.get(b, ()))


def match_stage(a: str, b: str, synonyms: SynonymTable | None) -> int:
    if a == b:
        return EXACT
    if stem(a) == stem(b):
        return STEM
    if synonyms is not None and synonyms.related(a, b):
        return SYNONYM
    return 0


@dataclass(frozen=True)
class Alignment:
    pairs: tuple[tuple[int, int], ...]
    exact: bool = True

    @property
    def matches(self) -> int:
        return len(self.pairs)

    @property
    def chunks(self) -> int:
        return count_chunks(self.pairs)


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    ordered = sorted(pairs)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(ordered, ordered[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


class _SearchTooLarge(Exception):
    pass


def _exact_alignment(c, r, stages, node_cap) -> tuple[tuple[int, int], ...]:
    """Lexicographically best (exact, stem, synonym) counts, then most adjacencies."""
    n = len(c)
    partners = [[(j, s) for j, s in enumerate(stages[i]) if s] for i in range(n)]
    memo: dict = {}
    nodes = 0

    def best(i: int, used: int, prev: int):
        nonlocal nodes
        if i == n:
            return (0, 0, 0, 0), ()
        key = (i, used, prev)
        hit = memo.get(key)
        if hit is not None:
            return hit
        nodes += 1
        if nodes > node_cap:
            raise _SearchTooLarge
        score, pairs = best(i + 1, used, -2)
        for j, s in partners[i]:
            if used >> j & 1:
                continue
            sub, sub_pairs = best(i + 1, used | (1 << j), j)
            cand = (sub[0] + (s == EXACT), sub[1] + (s == STEM), sub[2] + (s == SYNONYM),
                    sub[3] + (j == prev + 1 and prev >= 0))
            # strict '>' keeps the first (leftmost) choice on ties
            if cand > score:
                score, pairs = cand, ((i, j),) + sub_pairs
        memo[key] = (score, pairs)
        return score, pairs

    return best(0, 0, -2)[1]


def _greedy_alignment(c, r, stages) -> tuple[tuple[int, int], ...]:
    """Per stage, repeatedly take the longest diagonal run of unmatched pairs (leftmost on ties)."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for stage in (EXACT, STEM, SYNONYM):
        while True:
            best_len, best_at = 0, None
            for i in range(len(c)):
                if i in used_c:
                    continue
                for j in range(len(r)):
                    if j in used_r or stages[i][j] != stage:
                        continue
                    length = 1
                    while (i + length < len(c) and j + length < len(r)
                           and i + length not in used_c and j + length not in used_r
                           and stages[i + length][j + length] == stage):
                        length += 1
                    if length > best_len:
                        best_len, best_at = length, (i, j)
            if best_at is None:
                break
            i, j = best_at
            for k in range(best_len):
                used_c.add(i + k)
                used_r.add(j + k)
                pairs.append((i + k, j + k))
    return tuple(sorted(pairs))


def align(candidate, reference, synonyms: SynonymTable | None = None,
          node_cap: int = METEOR_NODE_CAP) -> Alignment:
    c, r = list(_toks(candidate)), list(_toks(reference))
    stages = [[match_stage(a, b, synonyms) for b in r] for a in c]
    if not any(any(row) for row in stages):
        return Alignment(())
    if len(c) <= EXACT_SEARCH_MAX_TOKENS:
        try:
            return Alignment(_exact_alignment(c, r, stages, node_cap), exact=True)
        except _SearchTooLarge:
            pass
    log.debug("METEOR alignment for %dx%d tokens uses greedy search", len(c), len(r))
    return Alignment(_greedy_alignment(c, r, stages), exact=False)


def meteor_from_counts(matches: int, chunks: int, cand_len: int, ref_len: int) -> float:
    if matches == 0:
        return 0.0
    p, r = matches / cand_len, matches / ref_len
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1 - penalty)


def meteor(candidate, reference, synonyms: SynonymTable | None = None,
           node_cap: int = METEOR_NODE_CAP) -> float:
    c, r = _toks(candidate), _toks(reference)
    if not c or not r:
        return 0.0
    a = align(c, r, synonyms, node_cap)
    return meteor_from_counts(a.matches, a.chunks, len(c), len(r))


def lexical_scores(candidate, reference, synonyms: SynonymTable | None = None) -> LexicalScores:
    return LexicalScores(rouge_l(candidate, reference), bleu(candidate, reference),
                         meteor(candidate, reference, synonyms))
