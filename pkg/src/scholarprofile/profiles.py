"""Prompt plans for MeSH-based, abstract-based and paraphrase profiles, and their execution.

A plan is plain data: an ordered list of stages, each a (system, user) prompt
pair.  Later stages may reference earlier outputs with ``{{STAGE_n}}``
placeholders (1-based); :func:`run_plan` splices them in at dispatch time.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from .corpus import (ProfileDoc, PublicationRecord, Researcher, Variant, default_stoplist,
                     remove_stopwords, tokenize, utc_timestamp)
from .divergence import MeshVocabulary
from .topics import LdaModel, group_docs_by_topic

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "v1"
DEFAULT_CONTEXT_LIMIT = 128_000
STAGE_OUTPUT_TOKENS = 400
PROFILE_OUTPUT_TOKENS = 800
METHODOLOGY_BRANCHES = ("E", "L", "H")
HEALTH_BRANCHES = ("C", "F", "G")

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Z0-9_]+)\}\}")
_STAGE_RE = re.compile(r"\{\{STAGE_(\d+)\}\}")
SOURCE_BEGIN = "=== SOURCE ==="
SOURCE_END = "=== END SOURCE ==="


class ProviderError(RuntimeError):
    pass


class EmptyCompletionError(ProviderError):
    pass


class StageError(ProviderError):
    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class BudgetExceededError(ValueError):
    pass


class Strategy(str, Enum):
    MESH = "mesh"
    ABSTRACT = "abstract"
    PARAPHRASE = "paraphrase"

    @property
    def variant(self) -> Variant:
        return {Strategy.MESH: Variant.MESH, Strategy.ABSTRACT: Variant.ABSTRACT,
                Strategy.PARAPHRASE: Variant.PARAPHRASE}[self]


# -- token estimation -----------------------------------------------------

def estimate_tokens(text: str) -> int:
    """ceil(utf-8 bytes / 4); swap in an exact tokenizer via ``count_tokens`` arguments."""
    return math.ceil(len(text.encode("utf-8")) / 4)


TokenCounter = Callable[[str], int]


# -- templates ------------------------------------------------------------

def load_template(name: str, version: str = TEMPLATE_VERSION,
                  directory: str | os.PathLike | None = None) -> str:
    filename = f"{name}_{version}.txt"
    if directory is not None:
        return Path(directory, filename).read_text(encoding="utf-8")
    return resources.files("scholarprofile").joinpath(f"data/templates/{filename}").read_text(
        encoding="utf-8")


def render(template: str, values: Mapping[str, str]) -> str:
    """Substitute ``{{NAME}}``; STAGE_n placeholders are left for run time."""
    def sub(m: re.Match) -> str:
        key = m.group(1)
        if key in values:
            return values[key]
        if key.startswith("STAGE_"):
            return m.group(0)
        raise KeyError(f"template placeholder {{{{{key}}}}} has no value")
    return _PLACEHOLDER_RE.sub(sub, template)


def source_section(user_text: str) -> str:
    """The researcher's own material between the SOURCE markers (whole text if absent)."""
    start = user_text.find(SOURCE_BEGIN + "\n")
    if start < 0:
        return user_text
    start += len(SOURCE_BEGIN) + 1
    end = user_text.find("\n" + SOURCE_END, start)
    return user_text[start:end if end >= 0 else None]


# -- plan data ------------------------------------------------------------

@dataclass(frozen=True)
class OneShotExample:
    instructions: str
    profile: str
    methodology_terms: tuple[str, ...] = ()
    health_terms: tuple[str, ...] = ()
    abstracts_summary: str = ""

    @classmethod
    def load(cls, path: str | os.PathLike) -> "OneShotExample":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        instructions = data.get("instructions") or load_template("instructions").strip()
        return cls(
            instructions=instructions,
            profile=data["profile"].strip(),
            methodology_terms=tuple(data.get("methodology_terms", ())),
            health_terms=tuple(data.get("health_terms", ())),
            abstracts_summary=data.get("abstracts_summary", "").strip(),
        )


@dataclass(frozen=True)
class PromptStage:
    system_text: str
    user_text: str
    max_output_tokens: int
    label: str = ""

    def dependencies(self) -> list[int]:
        return sorted({int(n) for n in _STAGE_RE.findall(self.user_text)})


@dataclass(frozen=True)
class PromptPlan:
    strategy: Strategy
    researcher_id: str
    stages: tuple[PromptStage, ...]
    one_shot_example: OneShotExample | None = None
    template_version: str = TEMPLATE_VERSION

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a plan needs at least one stage")
        for i, stage in enumerate(self.stages, 1):
            if any(dep >= i for dep in stage.dependencies()):
                raise ValueError(f"stage {i} references a stage that does not precede it")

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "researcher_id": self.researcher_id,
            "template_version": self.template_version,
            "stages": [
                {"label": s.label, "system": s.system_text, "user": s.user_text,
                 "max_output_tokens": s.max_output_tokens}
                for s in self.stages
            ],
        }


@dataclass(frozen=True)
class MeshSplit:
    methodology_terms: tuple[str, ...] = ()
    health_terms: tuple[str, ...] = ()
    unassigned: tuple[str, ...] = ()

    def __bool__(self):
        return bool(self.methodology_terms or self.health_terms or self.unassigned)


def ranked_mesh_terms(pubs: Sequence[PublicationRecord]) -> list[str]:
    """Researcher's MeSH terms, most frequent first, case-insensitively merged."""
    counts: Counter[str] = Counter()
    first: dict[str, str] = {}
    for pub in pubs:
        for term in pub.mesh_terms:
            key = term.lower()
            first.setdefault(key, term)
            counts[key] += 1
    return [first[k] for k, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]


def categorize_mesh_terms(terms: Sequence[str], mesh_vocab: MeshVocabulary,
                          methodology: Sequence[str] = METHODOLOGY_BRANCHES,
                          health: Sequence[str] = HEALTH_BRANCHES,
                          fallback: Callable[[str], str | None] | None = None) -> MeshSplit:
    """Split terms by MeSH tree branch; the first tree number that hits a branch decides.

    ``fallback`` (e.g. an LLM classifier) is consulted for terms the tree
    numbers cannot place and may return "methodology", "health" or None.
    """
    meth, heal, rest = [], [], []
    seen: set[str] = set()
    for term in terms:
        key = term.lower()
        if key in seen:
            continue
        seen.add(key)
        group = None
        for tree in mesh_vocab.trees(term):
            if tree.startswith(tuple(methodology)):
                group = "methodology"
                break
            if tree.startswith(tuple(health)):
                group = "health"
                break
        if group is None and fallback is not None:
            group = fallback(term)
        {"methodology": meth, "health": heal}.get(group, rest).append(term)
    return MeshSplit(tuple(meth), tuple(heal), tuple(rest))


def _term_block(methodology: Sequence[str], health: Sequence[str]) -> str:
    parts = []
    if methodology:
        parts.append("Methodology terms:\n" + "\n".join(f"- {t}" for t in methodology))
    if health:
        parts.append("Health domain terms:\n" + "\n".join(f"- {t}" for t in health))
    return "\n\n".join(parts)


def _check_budget(stage: PromptStage, budget: int, count: TokenCounter, reserve: int = 0) -> int:
    n = count(stage.system_text) + count(stage.user_text) + reserve
    if n > budget:
        raise BudgetExceededError(
            f"stage {stage.label or '?'} needs ~{n} input tokens, budget is {budget}")
    return n


def build_mesh_plan(researcher: Researcher, mesh_split: MeshSplit, example: OneShotExample,
                    budget: int = DEFAULT_CONTEXT_LIMIT, count_tokens: TokenCounter = estimate_tokens,
                    template_dir: str | os.PathLike | None = None) -> PromptPlan:
    if not mesh_split:
        raise ValueError(f"researcher {researcher.id} has no MeSH terms")
    health = mesh_split.health_terms + mesh_split.unassigned
    user = render(load_template("mesh_user", directory=template_dir), {
        "INSTRUCTIONS": example.instructions,
        "EXAMPLE_SOURCE": _term_block(example.methodology_terms, example.health_terms),
        "EXAMPLE_PROFILE": example.profile,
        "RESEARCHER_NAME": researcher.name,
        "AFFILIATION": researcher.affiliation or "affiliation not listed",
        "SOURCE": _term_block(mesh_split.methodology_terms, health),
    })
    stage = PromptStage(load_template("system", directory=template_dir).strip(), user,
                        PROFILE_OUTPUT_TOKENS, "profile")
    _check_budget(stage, budget, count_tokens)
    return PromptPlan(Strategy.MESH, researcher.id, (stage,), example)


def render_abstract(pub: PublicationRecord) -> str:
    head = f"PMID {pub.pmid}" + (f" ({pub.year})" if pub.year else "")
    body = pub.abstract or "(no abstract)"
    return f"{head}: {pub.title}\n{body}"


def _fit_text(prefix_tokens: int, text: str, budget: int, count: TokenCounter) -> str:
    """Longest prefix of ``text`` that keeps the stage within budget."""
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if prefix_tokens + count(text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


def pack_batches(items: Sequence[str], fits: Callable[[list[str]], bool]) -> list[list[str]]:
    """Greedy in-order packing: start a new batch when the next item would not fit."""
    batches: list[list[str]] = []
    current: list[str] = []
    for item in items:
        if current and not fits(current + [item]):
            batches.append(current)
            current = []
        current.append(item)
    if current:
        batches.append(current)
    return batches


def build_abstract_plan(researcher: Researcher, docs: Sequence[PublicationRecord],
                        lda_model: LdaModel, example: OneShotExample,
                        budget: int = DEFAULT_CONTEXT_LIMIT,
                        count_tokens: TokenCounter = estimate_tokens,
                        template_dir: str | os.PathLike | None = None) -> PromptPlan:
    """Divide and conquer: condense each topic group, then combine the condensations.

    ``docs[d]`` must be the d-th document ``lda_model`` was fitted on.
    """
    if not docs:
        raise ValueError(f"researcher {researcher.id} has no abstracts")
    system = load_template("system", directory=template_dir).strip()
    condense_t = load_template("condense_user", directory=template_dir)
    merge_t = load_template("merge_user", directory=template_dir)
    combine_t = load_template("combine_user", directory=template_dir)
    common = {"RESEARCHER_NAME": researcher.name,
              "AFFILIATION": researcher.affiliation or "affiliation not listed"}

    def stage_tokens(template: str, source: str) -> int:
        return count_tokens(system) + count_tokens(render(template, {**common, "SOURCE": source}))

    overhead = stage_tokens(condense_t, "")
    stages: list[PromptStage] = []
    for topic, members in sorted(group_docs_by_topic(lda_model, docs).items()):
        if not members:
            continue
        items = []
        for d in members:
            text = render_abstract(docs[d])
            if overhead + count_tokens(text) > budget:
                log.warning("abstract %s exceeds the stage budget; truncating", docs[d].pmid)
                text = _fit_text(overhead, text, budget, count_tokens)
            items.append(text)
        for batch in pack_batches(
                items, lambda b: stage_tokens(condense_t, "\n\n".join(b)) <= budget):
            user = render(condense_t, {**common, "SOURCE": "\n\n".join(batch)})
            stages.append(PromptStage(system, user, STAGE_OUTPUT_TOKENS,
                                      f"topic-{topic}.{len(stages) + 1}"))

    def combine_source(refs: Sequence[int]) -> str:
        return "\n\n".join(f"{{{{STAGE_{i}}}}}" for i in refs)

    example_values = {
        "INSTRUCTIONS": example.instructions,
        "EXAMPLE_SOURCE": example.abstracts_summary or _term_block(
            example.methodology_terms, example.health_terms),
        "EXAMPLE_PROFILE": example.profile,
    }

    def combine_fits(refs: Sequence[int], template: str, extra: Mapping[str, str]) -> bool:
        text = render(template, {**common, **extra, "SOURCE": combine_source(refs)})
        reserve = len(refs) * STAGE_OUTPUT_TOKENS
        return count_tokens(system) + count_tokens(_STAGE_RE.sub("", text)) + reserve <= budget

    # Reduce level by level until the remaining outputs fit one combine prompt.
    pending = list(range(1, len(stages) + 1))
    while not combine_fits(pending, combine_t, example_values):
        groups = pack_batches([str(i) for i in pending],
                              lambda b: combine_fits([int(x) for x in b], merge_t, {}))
        if len(groups) == len(pending) and len(pending) > 1 and all(len(g) == 1 for g in groups):
            raise BudgetExceededError("budget too small to merge any two stage outputs")
        nxt = []
        for g in groups:
            refs = [int(x) for x in g]
            user = render(merge_t, {**common, "SOURCE": combine_source(refs)})
            stages.append(PromptStage(system, user, STAGE_OUTPUT_TOKENS, f"merge.{len(stages) + 1}"))
            nxt.append(len(stages))
        pending = nxt
        if len(pending) == 1:
            break

    user = render(combine_t, {**common, **example_values, "SOURCE": combine_source(pending)})
    stages.append(PromptStage(system, user, PROFILE_OUTPUT_TOKENS, "profile"))
    _check_budget(stages[-1], budget, lambda t: count_tokens(_STAGE_RE.sub("", t)),
                  reserve=len(pending) * STAGE_OUTPUT_TOKENS)
    return PromptPlan(Strategy.ABSTRACT, researcher.id, tuple(stages), example)


def build_paraphrase_plan(researcher: Researcher, human_profile_text: str | None = None,
                          budget: int = DEFAULT_CONTEXT_LIMIT,
                          count_tokens: TokenCounter = estimate_tokens,
                          template_dir: str | os.PathLike | None = None) -> PromptPlan:
    text = human_profile_text if human_profile_text is not None else researcher.human_profile
    if not text or not text.strip():
        raise ValueError(f"researcher {researcher.id} has no human-written profile to paraphrase")
    user = render(load_template("paraphrase_user", directory=template_dir), {"SOURCE": text.strip()})
    stage = PromptStage(load_template("system", directory=template_dir).strip(), user,
                        PROFILE_OUTPUT_TOKENS, "paraphrase")
    _check_budget(stage, budget, count_tokens)
    return PromptPlan(Strategy.PARAPHRASE, researcher.id, (stage,))


# -- providers ------------------------------------------------------------

class LlmProvider(Protocol):
    context_limit_tokens: int
    concurrency: int

    def complete(self, system_text: str, user_text: str, max_output_tokens: int) -> str: ...


def request_hash(system_text: str, user_text: str, max_output_tokens: int) -> str:
    payload = json.dumps({"system": system_text, "user": user_text,
                          "max_tokens": max_output_tokens}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class MockProvider:
    """Deterministic stand-in for a chat model.

    modes:
      digest   -- writes a short profile from the most frequent content words of
                  the SOURCE section (default)
      echo     -- always returns ``text``
      identity -- returns the SOURCE section unchanged
      numbered -- returns "call N" with a running counter
    """

    def __init__(self, mode: str = "digest", text: str = "",
                 context_limit_tokens: int = DEFAULT_CONTEXT_LIMIT, top_terms: int = 12):
        if mode not in {"digest", "echo", "identity", "numbered"}:
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.text = text
        self.context_limit_tokens = context_limit_tokens
        self.top_terms = top_terms
        self.concurrency = 1
        self.calls: list[tuple[str, str, int]] = []

    def complete(self, system_text: str, user_text: str, max_output_tokens: int) -> str:
        self.calls.append((system_text, user_text, max_output_tokens))
        if self.mode == "echo":
            return self.text
        if self.mode == "numbered":
            return f"call {len(self.calls)}"
        source = source_section(user_text)
        if self.mode == "identity":
            return source
        return self._digest(source)

    def _digest(self, source: str) -> str:
        tokens = remove_stopwords(tokenize(source), default_stoplist()).tokens
        words = [t for t in tokens if t.isalpha() and len(t) > 2 and t not in _MOCK_NOISE]
        counts = Counter(words)
        order = {w: i for i, w in reversed(list(enumerate(words)))}
        top = sorted(counts, key=lambda w: (-counts[w], order[w]))[: self.top_terms]
        if not top:
            return "The researcher's interests could not be summarized from the material provided."
        chunks = [top[i:i + 3] for i in range(0, len(top), 3)]
        sentences = []
        for opener, chunk in zip(_MOCK_OPENERS, chunks):
            listed = chunk[0] if len(chunk) == 1 else ", ".join(chunk[:-1]) + " and " + chunk[-1]
            sentences.append(f"{opener} {listed}.")
        return " ".join(sentences)


_MOCK_OPENERS = ("The researcher's work centers on", "This program also examines",
                 "Further interests include", "Related projects address")
# Scaffolding words never count as content, so digests of digests stay on topic.
_MOCK_NOISE = frozenset({"pmid", "abstract", "methodology", "health", "domain", "terms",
                         *tokenize(" ".join(_MOCK_OPENERS)).tokens})


class TranscriptProvider:
    """Replays canned completions keyed by :func:`request_hash`."""

    def __init__(self, path: str | os.PathLike, context_limit_tokens: int = DEFAULT_CONTEXT_LIMIT):
        self.path = Path(path)
        self.context_limit_tokens = context_limit_tokens
        self.concurrency = 1
        self.completions: dict[str, str] = {}
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    self.completions[row["request"]] = row["completion"]
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{self.path}:{lineno}: bad transcript line: {exc}") from exc

    def complete(self, system_text: str, user_text: str, max_output_tokens: int) -> str:
        key = request_hash(system_text, user_text, max_output_tokens)
        try:
            return self.completions[key]
        except KeyError:
            raise ProviderError(f"no transcript entry for request {key[:12]}") from None


class RecordingProvider:
    """Wraps a provider and appends every exchange to a transcript file."""

    def __init__(self, inner: LlmProvider, path: str | os.PathLike):
        self.inner = inner
        self.path = Path(path)
        self.context_limit_tokens = inner.context_limit_tokens
        self.concurrency = getattr(inner, "concurrency", 1)

    def complete(self, system_text: str, user_text: str, max_output_tokens: int) -> str:
        out = self.inner.complete(system_text, user_text, max_output_tokens)
        row = {"request": request_hash(system_text, user_text, max_output_tokens),
               "completion": out}
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        return out


class HttpChatProvider:
    """Chat-completions style endpoint: POST {model, messages, max_tokens, temperature}."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 context_limit_tokens: int = DEFAULT_CONTEXT_LIMIT, temperature: float = 0.0,
                 timeout: float = 120.0, concurrency: int = 4,
                 client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.context_limit_tokens = context_limit_tokens
        self.temperature = temperature
        self.concurrency = concurrency
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, system_text: str, user_text: str, max_output_tokens: int) -> str:
        body = {
            "model": self.model,
            "messages": [{"role": "system", "content": system_text},
                         {"role": "user", "content": user_text}],
            "max_tokens": max_output_tokens,
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(self.endpoint, json=body, headers=headers)
            resp.raise_for_status()
            data = resp.json()
            return data["choices"][0]["message"]["content"] or ""
        except httpx.HTTPError as exc:
            raise ProviderError(f"chat endpoint error: {exc}") from exc
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected chat response shape: {exc}") from exc


def load_provider(path: str | os.PathLike) -> LlmProvider:
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    kind = cfg.get("kind")
    limit = int(cfg.get("context_limit_tokens", DEFAULT_CONTEXT_LIMIT))
    if kind == "mock":
        if cfg.get("transcript"):
            transcript = Path(cfg["transcript"])
            if not transcript.is_absolute():
                transcript = Path(path).parent / transcript
            return TranscriptProvider(transcript, context_limit_tokens=limit)
        return MockProvider(cfg.get("mode", "digest"), cfg.get("text", ""), context_limit_tokens=limit)
    if kind == "http-chat":
        key_env = cfg.get("api_key_env")
        return HttpChatProvider(cfg["endpoint"], cfg["model"],
                                api_key=os.environ.get(key_env) if key_env else None,
                                context_limit_tokens=limit,
                                temperature=float(cfg.get("temperature", 0.0)),
                                concurrency=int(cfg.get("concurrency", 4)))
    raise ValueError(f"{path}: unknown provider kind {kind!r}")


# -- execution ------------------------------------------------------------

def _splice(text: str, outputs: Mapping[int, str]) -> str:
    return _STAGE_RE.sub(lambda m: outputs[int(m.group(1))], text)


def run_plan(provider: LlmProvider, plan: PromptPlan, created_at: str | None = None,
             count_tokens: TokenCounter = estimate_tokens, max_workers: int | None = None
             ) -> ProfileDoc:
    """Execute stages in dependency waves; the last stage's output is the profile."""
    outputs: dict[int, str] = {}
    limit = provider.context_limit_tokens
    workers = max(1, min(max_workers or getattr(provider, "concurrency", 1),
                         getattr(provider, "concurrency", 1)))

    def call(index: int) -> str:
        stage = plan.stages[index - 1]
        user = _splice(stage.user_text, outputs)
        used = count_tokens(stage.system_text) + count_tokens(user)
        if used > limit:
            raise StageError(index, BudgetExceededError(
                f"prompt needs ~{used} tokens, provider limit is {limit}"))
        try:
            out = provider.complete(stage.system_text, user, stage.max_output_tokens)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(index, exc) from exc
        if out is None or not str(out).strip():
            raise StageError(index, EmptyCompletionError("provider returned an empty completion"))
        return str(out).strip()

    remaining = list(range(1, len(plan.stages) + 1))
    while remaining:
        wave = [i for i in remaining if all(d in outputs for d in plan.stages[i - 1].dependencies())]
        if workers > 1 and len(wave) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(call, wave))
        else:
            results = [call(i) for i in wave]
        outputs.update(zip(wave, results))
        remaining = [i for i in remaining if i not in outputs]

    return ProfileDoc(plan.researcher_id, plan.strategy.variant, outputs[len(plan.stages)],
                      created_at or utc_timestamp())


def paraphrase(provider: LlmProvider, human_profile_text: str | None,
               researcher: Researcher | str = "", created_at: str | None = None) -> ProfileDoc:
    if not human_profile_text or not human_profile_text.strip():
        raise ValueError("paraphrase needs a human-written profile")
    if isinstance(researcher, str):
        researcher = Researcher(id=researcher or "anonymous", name=researcher or "anonymous")
    plan = build_paraphrase_plan(researcher, human_profile_text,
                                 budget=provider.context_limit_tokens)
    return run_plan(provider, plan, created_at=created_at)
