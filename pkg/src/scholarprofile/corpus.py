"""Domain records, tokenization and JSON-Lines persistence shared by every stage."""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable

from .porter import stem

__all__ = [
    "Researcher",
    "PublicationRecord",
    "ProfileDoc",
    "TokenizedDoc",
    "Variant",
    "Corpus",
    "CorpusFormatError",
    "tokenize",
    "remove_stopwords",
    "stem",
    "stem_doc",
    "load_stoplist",
    "default_stoplist",
    "save_corpus",
    "load_corpus",
    "utc_timestamp",
]

_WORD_RE = re.compile(r"\w+")
_DIGITS_RE = re.compile(r"^[0-9]+$")


class Variant(str, Enum):
    HUMAN = "Human"
    MESH = "MeshGen"
    ABSTRACT = "AbstractGen"
    PARAPHRASE = "Paraphrase"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, cls):
            return value
        aliases = {
            "human": cls.HUMAN, "self": cls.HUMAN,
            "meshgen": cls.MESH, "mesh": cls.MESH,
            "abstractgen": cls.ABSTRACT, "abstract": cls.ABSTRACT,
            "paraphrase": cls.PARAPHRASE,
        }
        try:
            return aliases[str(value).strip().lower()]
        except KeyError:
            raise ValueError(f"unknown profile variant: {value!r}") from None


@dataclass(frozen=True)
class Researcher:
    id: str
    name: str
    affiliation: str = ""
    department: str | None = None
    human_profile: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("researcher id must be non-empty")
        if self.human_profile is not None and not self.human_profile.strip():
            raise ValueError(f"researcher {self.id}: human_profile is blank")


@dataclass(frozen=True)
class PublicationRecord:
    pmid: str
    title: str
    abstract: str
    mesh_terms: tuple[str, ...]
    authors: tuple[tuple[str, str], ...]
    year: int | None
    researcher_id: str = ""
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not _DIGITS_RE.match(self.pmid):
            raise ValueError(f"pmid must be digits only: {self.pmid!r}")
        seen: set[str] = set()
        terms = []
        for term in self.mesh_terms:
            key = term.lower()
            if key not in seen:
                seen.add(key)
                terms.append(term)
        object.__setattr__(self, "mesh_terms", tuple(terms))
        object.__setattr__(self, "authors", tuple((a[0], a[1]) for a in self.authors))
        object.__setattr__(self, "flags", tuple(self.flags))


@dataclass(frozen=True)
class ProfileDoc:
    researcher_id: str
    variant: Variant
    text: str
    created_at: str

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not self.text or not self.text.strip():
            raise ValueError(f"profile text for {self.researcher_id}/{self.variant.value} is empty")


@dataclass(frozen=True)
class TokenizedDoc:
    tokens: tuple[str, ...]
    source_variant: Variant | None = None

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)


@dataclass
class Corpus:
    researchers: list[Researcher] = field(default_factory=list)
    publications: list[PublicationRecord] = field(default_factory=list)
    profiles: list[ProfileDoc] = field(default_factory=list)

    def researcher(self, rid: str) -> Researcher:
        for r in self.researchers:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def publications_for(self, rid: str) -> list[PublicationRecord]:
        return [p for p in self.publications if p.researcher_id == rid]

    def profile(self, rid: str, variant: Variant | str) -> ProfileDoc | None:
        variant = Variant.parse(variant)
        for p in self.profiles:
            if p.researcher_id == rid and p.variant is variant:
                return p
        return None

    def upsert_profile(self, doc: ProfileDoc) -> None:
        self.profiles = [
            p for p in self.profiles
            if not (p.researcher_id == doc.researcher_id and p.variant is doc.variant)
        ]
        self.profiles.append(doc)


class CorpusFormatError(ValueError):
    def __init__(self, path, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.path = path
        self.lineno = lineno


def utc_timestamp() -> str:
    """ISO-8601 UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible runs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        if epoch else datetime.now(timezone.utc)
    )
    return moment.replace(microsecond=0).isoformat().replace("+00:00", "Z")


# -- tokenization ---------------------------------------------------------

def tokenize(text: str, variant: Variant | None = None) -> TokenizedDoc:
    """Lowercase word tokens; punctuation and whitespace never survive."""
    return TokenizedDoc(tuple(_WORD_RE.findall(text.lower())), variant)


def remove_stopwords(doc: TokenizedDoc, stoplist: Iterable[str]) -> TokenizedDoc:
    stop = stoplist if isinstance(stoplist, (set, frozenset)) else set(stoplist)
    return TokenizedDoc(tuple(t for t in doc.tokens if t not in stop), doc.source_variant)


def stem_doc(doc: TokenizedDoc) -> TokenizedDoc:
    return TokenizedDoc(tuple(stem(t) for t in doc.tokens), doc.source_variant)


def _parse_stoplist(lines: Iterable[str]) -> frozenset[str]:
    words = set()
    for line in lines:
        line = line.split("#", 1)[0].strip().lower()
        if line:
            words.add(line)
    return frozenset(words)


def load_stoplist(path: str | os.PathLike) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return _parse_stoplist(fh)


_DEFAULT_STOPLIST: frozenset[str] | None = None


def default_stoplist() -> frozenset[str]:
    global _DEFAULT_STOPLIST
    if _DEFAULT_STOPLIST is None:
        text = resources.files("scholarprofile").joinpath("data/stopwords.txt").read_text("utf-8")
        _DEFAULT_STOPLIST = _parse_stoplist(text.splitlines())
    return _DEFAULT_STOPLIST


# -- persistence ----------------------------------------------------------

def _record_to_json(obj) -> dict:
    if isinstance(obj, Researcher):
        kind = "researcher"
    elif isinstance(obj, PublicationRecord):
        kind = "publication"
    elif isinstance(obj, ProfileDoc):
        kind = "profile"
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    out = {"kind": kind}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, Variant):
            value = value.value
        elif isinstance(value, tuple):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        out[f.name] = value
    return out


_KINDS = {"researcher": Researcher, "publication": PublicationRecord, "profile": ProfileDoc}


def _record_from_json(data: dict):
    kind = data.pop("kind", None)
    if kind not in _KINDS:
        raise ValueError(f"unknown record kind {kind!r}")
    cls = _KINDS[kind]
    if cls is PublicationRecord:
        data["mesh_terms"] = tuple(data.get("mesh_terms", ()))
        data["authors"] = tuple(tuple(a) for a in data.get("authors", ()))
        data["flags"] = tuple(data.get("flags", ()))
    return cls(**data)


def dumps_record(obj) -> str:
    return json.dumps(_record_to_json(obj), ensure_ascii=False, sort_keys=True)


def save_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for obj in [*corpus.researchers, *corpus.publications, *corpus.profiles]:
            fh.write(dumps_record(obj) + "\n")


def load_corpus(path: str | os.PathLike) -> Corpus:
    corpus = Corpus()
    buckets = {Researcher: corpus.researchers, PublicationRecord: corpus.publications,
               ProfileDoc: corpus.profiles}
    ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = _record_from_json(json.loads(line))
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(path, lineno, str(exc)) from exc
            if isinstance(obj, Researcher):
                if obj.id in ids:
                    raise CorpusFormatError(path, lineno, f"duplicate researcher id {obj.id!r}")
                ids.add(obj.id)
            buckets[type(obj)].append(obj)
    return corpus
