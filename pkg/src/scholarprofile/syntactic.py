"""CoNLL-U reading and sentence-structure measures over dependency-parsed profiles.

Depth counts nodes on the path to the root, so a lone root has depth 1.

Syntactic ambiguity is operationalised as PP/participle attachment ambiguity:
every phrase headed by a token with an adposition ``case`` dependent that
opens the phrase, or by a participle modifier, is a candidate.  Nouns, proper
nouns and verbs earlier in the sentence are possible attachment sites; with
two or more the phrase counts as ambiguous, and the measure is the mean token
length of ambiguous phrases (0 when there are none).
"""
from __future__ import annotations

import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

ATTACHMENT_SITES = frozenset({"NOUN", "PROPN", "VERB"})
PARTICIPLE_RELS = frozenset({"acl", "advcl", "amod"})


class ConlluError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, source: str = ""):
        if lineno is not None:
            where = f"{source}:{lineno}: " if source else f"line {lineno}: "
        else:
            where = f"{source}: " if source else ""
        super().__init__(where + message)
        self.lineno = lineno


class TreeError(ConlluError):
    pass


@dataclass(frozen=True)
class Token:
    id: int
    form: str
    lemma: str
    upos: str
    head: int
    deprel: str
    xpos: str = "_"
    feats: str = "_"

    @property
    def is_participle(self) -> bool:
        return "VerbForm=Part" in self.feats or self.xpos in {"VBN", "VBG"}


@dataclass(frozen=True)
class ParsedSentence:
    tokens: tuple[Token, ...]
    comments: tuple[str, ...] = ()
    _depths: tuple[int, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_depths", tuple(_validate_tree(self.tokens)))

    @property
    def root_index(self) -> int:
        return next(i for i, t in enumerate(self.tokens) if t.head == 0)

    @property
    def heads(self) -> list[int]:
        return [t.head for t in self.tokens]

    def depths(self) -> tuple[int, ...]:
        return self._depths

    def children(self) -> dict[int, list[int]]:
        kids: dict[int, list[int]] = defaultdict(list)
        for t in self.tokens:
            kids[t.head].append(t.id)
        return kids

    def subtree(self, token_id: int) -> list[int]:
        kids = self.children()
        out, stack = [], [token_id]
        while stack:
            node = stack.pop()
            out.append(node)
            stack.extend(kids.get(node, ()))
        return sorted(out)


def _validate_tree(tokens: Sequence[Token]) -> list[int]:
    n = len(tokens)
    if n == 0:
        raise TreeError("sentence has no tokens")
    for i, t in enumerate(tokens, 1):
        if t.id != i:
            raise TreeError(f"token ids must run 1..{n}; got {t.id} at position {i}")
        if not 0 <= t.head <= n:
            raise TreeError(f"token {t.id} has head {t.head} outside the sentence")
        if t.head == t.id:
            raise TreeError(f"token {t.id} is its own head (cycle)")
    roots = [t.id for t in tokens if t.head == 0]
    if len(roots) != 1:
        raise TreeError(f"expected exactly one root, found {len(roots)}")
    depth = [0] * (n + 1)
    for t in tokens:
        path, node = [], t.id
        while node != 0 and depth[node] == 0:
            if node in path:
                raise TreeError(f"cycle through token {node}")
            path.append(node)
            node = tokens[node - 1].head
        base = depth[node] if node else 0
        for k, p in enumerate(reversed(path), 1):
            depth[p] = base + k
    return depth[1:]


def _parse_lines(lines: Iterable[str], source: str = "") -> list[ParsedSentence]:
    sentences: list[ParsedSentence] = []
    tokens: list[Token] = []
    comments: list[str] = []
    start = None

    def flush():
        nonlocal tokens, comments, start
        if tokens:
            try:
                sentences.append(ParsedSentence(tuple(tokens), tuple(comments)))
            except TreeError as exc:
                raise TreeError(str(exc), start, source) from None
        tokens, comments, start = [], [], None

    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            comments.append(line)
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(f"expected 10 tab-separated columns, got {len(cols)}", lineno, source)
        tid = cols[0]
        if "-" in tid or "." in tid:
            continue  # multiword range or empty node
        try:
            token_id = int(tid)
            head = int(cols[6])
        except ValueError:
            raise ConlluError(f"non-integer ID or HEAD ({tid!r}, {cols[6]!r})", lineno,
                              source) from None
        if start is None:
            start = lineno
        tokens.append(Token(token_id, cols[1], cols[2], cols[3], head, cols[7],
                            xpos=cols[4], feats=cols[5]))
    flush()
    return sentences


def parse_conllu(path: str | os.PathLike) -> list[ParsedSentence]:
    with open(path, encoding="utf-8") as fh:
        return _parse_lines(fh, str(path))


def parse_conllu_text(text: str) -> list[ParsedSentence]:
    return _parse_lines(text.splitlines())


def to_conllu(sentences: Sequence[ParsedSentence]) -> str:
    out = []
    for s in sentences:
        out.extend(s.comments)
        for t in s.tokens:
            out.append("\t".join([str(t.id), t.form, t.lemma, t.upos, t.xpos, t.feats,
                                  str(t.head), t.deprel, "_", "_"]))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


# -- measures -------------------------------------------------------------

Doc = Sequence[ParsedSentence]


def max_dep_depth(sentence: ParsedSentence) -> int:
    return max(sentence.depths())


def doc_max_depth(doc: Doc) -> float:
    return float(max(max_dep_depth(s) for s in doc)) if doc else 0.0


def doc_complexity(doc: Doc) -> float:
    depths = [d for s in doc for d in s.depths()]
    return sum(depths) / len(depths) if depths else 0.0


def _doc_mean(docs: Sequence[Doc], fn) -> float:
    docs = [d for d in docs if d]
    if not docs:
        raise ValueError("need at least one non-empty document")
    return sum(fn(d) for d in docs) / len(docs)


def corpus_max_depth(docs: Sequence[Doc]) -> float:
    """Per-document maximum depth, averaged with equal document weight."""
    return _doc_mean(docs, doc_max_depth)


def syntactic_complexity(docs: Sequence[Doc]) -> float:
    """Mean node depth per document, averaged with equal document weight."""
    return _doc_mean(docs, doc_complexity)


def pos_distribution(docs: Sequence[Doc]) -> dict[str, float]:
    counts = Counter(t.upos for doc in docs for s in doc for t in s.tokens)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("pos_distribution needs at least one token")
    return {tag: 100.0 * n / total for tag, n in sorted(counts.items())}


def lexical_diversity(docs: Sequence[Doc]) -> dict[str, int]:
    lemmas: dict[str, set[str]] = defaultdict(set)
    for doc in docs:
        for s in doc:
            for t in s.tokens:
                lemma = t.lemma if t.lemma not in ("", "_") else t.form
                lemmas[t.upos].add(lemma.lower())
    return {tag: len(v) for tag, v in sorted(lemmas.items())}


@dataclass(frozen=True)
class ModifierPhrase:
    head: int
    span: tuple[int, int]
    kind: str
    candidates: tuple[int, ...]

    @property
    def length(self) -> int:
        return self.span[1] - self.span[0] + 1

    @property
    def ambiguous(self) -> bool:
        return len(self.candidates) >= 2


def modifier_phrases(sentence: ParsedSentence) -> list[ModifierPhrase]:
    toks = sentence.tokens
    out = []
    for t in toks:
        if t.head == 0:
            continue
        kind = None
        sub = sentence.subtree(t.id)
        first = toks[sub[0] - 1]
        if first.upos == "ADP" and first.head == t.id and first.deprel.split(":")[0] == "case":
            kind = "adpositional"
        elif t.upos == "VERB" and t.is_participle and t.deprel.split(":")[0] in PARTICIPLE_RELS:
            kind = "participial"
        if kind is None:
            continue
        start = sub[0]
        cands = tuple(u.id for u in toks[: start - 1] if u.upos in ATTACHMENT_SITES)
        out.append(ModifierPhrase(t.id, (sub[0], sub[-1]), kind, cands))
    return out


def ambiguous_phrase_lengths(docs: Sequence[Doc]) -> list[int]:
    return [p.length for doc in docs for s in doc for p in modifier_phrases(s) if p.ambiguous]


def syntactic_ambiguity(docs: Sequence[Doc]) -> float:
    """Mean length of ambiguous modifier phrases, pooled over the corpus."""
    lengths = ambiguous_phrase_lengths(docs)
    return sum(lengths) / len(lengths) if lengths else 0.0


@dataclass(frozen=True)
class SyntacticReport:
    pos_distribution: dict[str, float]
    max_dep_depth: float
    syntactic_complexity: float
    syntactic_ambiguity: float
    lexical_diversity: dict[str, int]


def syntactic_report(docs: Sequence[Doc]) -> SyntacticReport:
    return SyntacticReport(
        pos_distribution=pos_distribution(docs),
        max_dep_depth=corpus_max_depth(docs),
        syntactic_complexity=syntactic_complexity(docs),
        syntactic_ambiguity=syntactic_ambiguity(docs),
        lexical_diversity=lexical_diversity(docs),
    )
