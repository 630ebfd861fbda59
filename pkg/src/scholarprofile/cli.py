"""Command-line pipeline: ingest -> topics -> generate -> evaluate -> report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .corpus import (Corpus, CorpusFormatError, ProfileDoc, Researcher, Variant, default_stoplist,
                     load_corpus, remove_stopwords, save_corpus, tokenize, utc_timestamp)
from .divergence import (KLDirection, MeshParseError, load_mesh_vocabulary, novel_mesh_terms,
                         pair_kl, tfidf_corpus, unique_terms)
from .human import (DIMENSIONS, QUALITY_DIMENSIONS, RatingsFormatError, agreement_table,
                    identified_as_human_fraction, load_ratings, pooled_ac1, stratified_ac1,
                    summary_percentages)
from .lexical import lexical_scores
from .profiles import (BudgetExceededError, OneShotExample, ProviderError, StageError, Strategy,
                       build_abstract_plan, build_mesh_plan, build_paraphrase_plan,
                       categorize_mesh_terms, load_provider, ranked_mesh_terms, run_plan)
from .pubmed import (AuthorshipRule, EnvelopeError, EutilsClient, FetchPolicy, HttpTransport,
                     RateLimiter, ReplayTransport, SearchQuery, TransportError, XmlParseError,
                     filter_by_authorship, filter_by_recency)
from .semantic import EmbeddingError, EmbeddingTransportError, greedy_match_score, load_embeddings
from .stats import MetricRow, build_report, emit, pair_label
from .syntactic import ConlluError, parse_conllu, syntactic_report
from .topics import (TopicAssignment, band_counts, diversity_band, diversity_score, dominant_topic,
                     fit_lda, heatmap_csv, transitions_csv, year_heatmap, year_transitions)

log = logging.getLogger("scholarprofile")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRANSPORT = 0, 2, 3, 4
METRIC_FAMILIES = ("lexical", "divergence", "semantic", "syntactic")
DEFAULT_METRICS = "lexical,divergence"

# Published agreement values the shipped rating fixtures are checked against.
REFERENCE_AC1 = {"overall": 0.634, "band:high": 0.762}
REFERENCE_TOLERANCE = 0.05


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- run config -----------------------------------------------------------

@dataclass
class RunConfig:
    command: str
    out: str
    inputs: dict[str, str | None] = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, path in self.inputs.items():
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"--{name.replace('_', '-')}: {path} does not exist")

    def to_json(self) -> dict:
        rel = {k: (os.path.relpath(v, self.out) if v else None) for k, v in self.inputs.items()}
        return {"command": self.command, "inputs": dict(sorted(rel.items())),
                "params": dict(sorted(self.params.items())), "version": __version__}

    def write(self) -> None:
        _write_text(os.path.join(self.out, f"run_config.{self.command}.json"), _dumps(self.to_json()))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write_text(path: str | os.PathLike, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _timestamp(args) -> str:
    if getattr(args, "timestamp", None):
        return args.timestamp
    return utc_timestamp()


def _default_reference_year() -> int:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.year


def _corpus_path(args) -> str:
    return args.corpus or os.path.join(args.out, "corpus.jsonl")


def _pmap(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- ingest ---------------------------------------------------------------

def read_roster(path: str) -> list[Researcher]:
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("id", "name"):
            if col not in (reader.fieldnames or ()):
                raise DataError(f"{path}: roster header lacks {col!r}")
        for row in reader:
            profile = None
            ref = (row.get("human_profile_path") or "").strip()
            if ref:
                ppath = ref if os.path.isabs(ref) else os.path.join(base, ref)
                try:
                    with open(ppath, encoding="utf-8") as pf:
                        profile = pf.read().strip() or None
                except OSError as exc:
                    raise DataError(f"{path}: line {reader.line_num}: cannot read {ref}: {exc}") from exc
            try:
                out.append(Researcher(id=row["id"].strip(), name=row["name"].strip(),
                                      affiliation=(row.get("affiliation") or "").strip(),
                                      department=(row.get("department") or "").strip() or None,
                                      human_profile=profile))
            except ValueError as exc:
                raise DataError(f"{path}: line {reader.line_num}: {exc}") from exc
    ids = [r.id for r in out]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate researcher ids")
    return out


def cmd_ingest(args) -> int:
    reference_year = args.reference_year or _default_reference_year()
    cfg = RunConfig("ingest", args.out, {"roster": args.roster, "replay_dir": args.replay_dir},
                    {"authorship_rule": args.authorship_rule, "recency_years": args.recency_years,
                     "reference_year": reference_year, "strict_names": args.strict_names,
                     "use_affiliation": not args.no_affiliation, "record": args.record})
    cfg.validate()
    if args.record and not args.replay_dir:
        raise ConfigError("--record needs --replay-dir")
    if args.recency_years < 1:
        raise ConfigError("--recency-years must be >= 1")
    roster = read_roster(args.roster)

    policy = FetchPolicy.from_env()
    if args.replay_dir:
        transport = ReplayTransport(args.replay_dir, HttpTransport() if args.record else None)
    else:
        transport = HttpTransport()
    # Offline replay needs no politeness delay.
    limiter = RateLimiter(1e6) if args.replay_dir and not args.record else None
    client = EutilsClient(policy, transport, limiter)
    created_at = _timestamp(args)

    corpus = Corpus()
    summary = []
    for r in roster:
        corpus.researchers.append(r)
        if r.human_profile:
            corpus.upsert_profile(ProfileDoc(r.id, Variant.HUMAN, r.human_profile, created_at))
        entry = {"researcher_id": r.id, "searched": 0, "fetched": 0, "kept": 0, "missing": 0,
                 "dropped_without_year": 0, "error": None}
        try:
            query = SearchQuery(r.name, reference_year - args.recency_years + 1, reference_year,
                                None if args.no_affiliation else (r.affiliation or None))
            pmids = client.search_pmids(query)
            entry["searched"] = len(pmids)
            batch = client.fetch_records(pmids) if pmids else []
            entry["fetched"] = len(batch)
            entry["missing"] = len(getattr(batch, "missing", ()))
            kept = filter_by_authorship(batch, r, args.authorship_rule, strict=args.strict_names)
            recent = filter_by_recency(kept, reference_year, args.recency_years)
            entry["dropped_without_year"] = recent.dropped
            for rec in recent:
                corpus.publications.append(replace(rec, researcher_id=r.id))
            entry["kept"] = len(recent)
        except (TransportError, XmlParseError, EnvelopeError, ValueError) as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("researcher %s: %s", r.id, exc)
        if entry["kept"] == 0 and entry["error"] is None:
            log.warning("researcher %s: no publications after filtering", r.id)
        print(f"{r.id}\t{entry['kept']} publication(s)"
              + (f"\tERROR {entry['error']}" if entry["error"] else ""))
        summary.append(entry)

    save_corpus(corpus, _corpus_path(args))
    _write_text(os.path.join(args.out, "ingest_summary.json"), _dumps({"researchers": summary}))
    cfg.write()
    return EXIT_OK


# -- topics ---------------------------------------------------------------

def publication_tokens(pub) -> tuple[str, ...]:
    toks = remove_stopwords(tokenize(f"{pub.title} {pub.abstract}"), default_stoplist()).tokens
    return tuple(t for t in toks if not t.isdigit() and len(t) > 1)


def cmd_topics(args) -> int:
    corpus_path = _corpus_path(args)
    cfg = RunConfig("topics", args.out, {"corpus": corpus_path},
                    {"topics": args.topics, "seed": args.seed, "iterations": args.iterations,
                     "alpha": args.alpha, "beta": args.beta})
    cfg.validate()
    corpus = load_corpus(corpus_path)
    unique = {}
    for pub in corpus.publications:
        unique.setdefault(pub.pmid, pub)
    pmids = sorted(unique, key=int)
    if not pmids:
        raise DataError(f"{corpus_path}: no publications to model")
    docs = [publication_tokens(unique[p]) for p in pmids]
    try:
        model = fit_lda(docs, K=args.topics, alpha=args.alpha, beta=args.beta,
                        iterations=args.iterations, seed=args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    index = {p: i for i, p in enumerate(pmids)}

    outdir = os.path.join(args.out, "topics")
    os.makedirs(outdir, exist_ok=True)
    model.save(os.path.join(outdir, "lda_model.json"))
    _write_text(os.path.join(outdir, "top_words.csv"), _csv_text(
        ["topic", "top_words"], [[k, " ".join(model.top_words(k, 10))] for k in range(model.num_topics)]))

    # The model is fitted on unique pmids; assignments fan back out per researcher.
    assignments: dict[str, list[TopicAssignment]] = {}
    for pub in corpus.publications:
        if pub.year is not None:
            assignments.setdefault(pub.researcher_id, []).append(
                TopicAssignment(pub.researcher_id, pub.pmid, pub.year,
                                dominant_topic(model, index[pub.pmid])))

    rows, scores, heat, trans = [], {}, {}, {}
    for rid in sorted(assignments):
        items = sorted(assignments[rid], key=lambda a: (a.year, int(a.pmid)))
        if not items:
            continue
        score = diversity_score(items)
        scores[rid] = score
        years = list(range(min(a.year for a in items), max(a.year for a in items) + 1))
        heat[rid] = (years, year_heatmap(items, years, model.num_topics))
        trans[rid] = year_transitions(items, model.num_topics)
        rows.append([rid, len(items), len({a.dominant_topic for a in items}), repr(score),
                     diversity_band(score)])
    for r in corpus.researchers:
        if r.id not in scores:
            log.warning("researcher %s has no dated publications; no diversity score", r.id)

    _write_text(os.path.join(outdir, "assignments.csv"), _csv_text(
        ["researcher_id", "pmid", "year", "dominant_topic"],
        [[a.researcher_id, a.pmid, a.year, a.dominant_topic]
         for rid in sorted(assignments) for a in sorted(assignments[rid], key=lambda a: (a.year, int(a.pmid)))]))
    _write_text(os.path.join(outdir, "diversity.csv"), _csv_text(
        ["researcher_id", "n_publications", "distinct_topics", "diversity_score", "band"], rows))
    _write_text(os.path.join(outdir, "bands.json"), _dumps(band_counts(scores)))
    _write_text(os.path.join(outdir, "heatmap.csv"), heatmap_csv(heat, model.num_topics))
    _write_text(os.path.join(outdir, "transitions.csv"), transitions_csv(trans, model.num_topics))
    counts = band_counts(scores)
    print(f"{len(pmids)} documents, K={model.num_topics}; bands: "
          + ", ".join(f"{b}={n}" for b, n in counts.items()))
    cfg.write()
    return EXIT_OK


# -- generate -------------------------------------------------------------

def _strategies(value: str) -> list[Strategy]:
    if value == "all":
        return [Strategy.MESH, Strategy.ABSTRACT, Strategy.PARAPHRASE]
    try:
        return [Strategy(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--strategy: {exc}") from exc


def cmd_generate(args) -> int:
    corpus_path = _corpus_path(args)
    strategies = _strategies(args.strategy)
    needs_example = any(s in (Strategy.MESH, Strategy.ABSTRACT) for s in strategies)
    cfg = RunConfig("generate", args.out,
                    {"corpus": corpus_path, "provider": args.provider, "mesh_vocab": args.mesh_vocab,
                     "example": args.example},
                    {"strategy": [s.value for s in strategies], "chunk_topics": args.chunk_topics,
                     "iterations": args.iterations, "seed": args.seed, "workers": args.workers})
    if Strategy.MESH in strategies and not args.mesh_vocab:
        raise ConfigError("--strategy mesh needs --mesh-vocab")
    if needs_example and not args.example:
        raise ConfigError("mesh and abstract strategies need --example")
    if not args.provider:
        raise ConfigError("--provider is required")
    cfg.validate()
    try:
        provider = load_provider(args.provider)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"--provider: {exc}") from exc
    corpus = load_corpus(corpus_path)
    example = OneShotExample.load(args.example) if needs_example else None
    vocab = load_mesh_vocabulary(args.mesh_vocab) if Strategy.MESH in strategies else None
    created_at = _timestamp(args)
    plan_dir = os.path.join(args.out, "generate", "plans")
    text_dir = os.path.join(args.out, "generate", "profiles")

    def plan_for(researcher: Researcher, strategy: Strategy):
        pubs = corpus.publications_for(researcher.id)
        budget = provider.context_limit_tokens
        if strategy is Strategy.MESH:
            split = categorize_mesh_terms(ranked_mesh_terms(pubs), vocab)
            return build_mesh_plan(researcher, split, example, budget=budget)
        if strategy is Strategy.ABSTRACT:
            pubs = [p for p in pubs if p.abstract.strip()]
            if not pubs:
                raise ValueError(f"researcher {researcher.id} has no abstracts")
            docs = [publication_tokens(p) for p in pubs]
            k = max(2, min(args.chunk_topics, len(pubs)))
            model = fit_lda(docs, K=k, iterations=args.iterations, seed=args.seed)
            return build_abstract_plan(researcher, pubs, model, example, budget=budget)
        human = corpus.profile(researcher.id, Variant.HUMAN)
        return build_paraphrase_plan(researcher, human.text if human else None, budget=budget)

    def work(job):
        researcher, strategy = job
        try:
            plan = plan_for(researcher, strategy)
        except (ValueError, BudgetExceededError) as exc:
            return job, None, None, str(exc)
        doc = run_plan(provider, plan, created_at=created_at, max_workers=args.workers)
        return job, plan, doc, None

    jobs = [(r, s) for r in corpus.researchers for s in strategies]
    skipped = []
    for (researcher, strategy), plan, doc, reason in _pmap(work, jobs, args.workers):
        if reason is not None:
            log.warning("skipping %s/%s: %s", researcher.id, strategy.value, reason)
            skipped.append({"researcher_id": researcher.id, "strategy": strategy.value, "reason": reason})
            continue
        name = f"{researcher.id}__{doc.variant.value}"
        _write_text(os.path.join(plan_dir, f"{name}.json"), _dumps(plan.to_json()))
        _write_text(os.path.join(text_dir, f"{name}.txt"), doc.text + "\n")
        corpus.upsert_profile(doc)
        print(f"{researcher.id}\t{doc.variant.value}\t{len(plan.stages)} stage(s)")

    save_corpus(corpus, args.corpus_out or corpus_path)
    _write_text(os.path.join(args.out, "generate", "skipped.json"), _dumps({"skipped": skipped}))
    cfg.write()
    return EXIT_OK


# -- evaluate -------------------------------------------------------------

def _metric_families(value: str) -> list[str]:
    fams = [v.strip() for v in value.split(",") if v.strip()]
    bad = [f for f in fams if f not in METRIC_FAMILIES]
    if bad or not fams:
        raise ConfigError(f"--metrics: unknown famil{'ies' if len(bad) > 1 else 'y'} "
                          f"{', '.join(bad) or '(none)'}; choose from {', '.join(METRIC_FAMILIES)}")
    return sorted(set(fams), key=METRIC_FAMILIES.index)


def _profile_pairs(corpus: Corpus) -> list[tuple[Researcher, ProfileDoc, ProfileDoc]]:
    pairs = []
    for r in corpus.researchers:
        human = corpus.profile(r.id, Variant.HUMAN)
        if human is None and r.human_profile:
            human = ProfileDoc(r.id, Variant.HUMAN, r.human_profile, "")
        if human is None:
            log.warning("researcher %s has no human-written profile; not evaluated", r.id)
            continue
        for v in (Variant.MESH, Variant.ABSTRACT, Variant.PARAPHRASE):
            doc = corpus.profile(r.id, v)
            if doc is not None:
                pairs.append((r, doc, human))
    return pairs


def cmd_evaluate(args) -> int:
    corpus_path = _corpus_path(args)
    families = _metric_families(args.metrics)
    cfg = RunConfig("evaluate", args.out,
                    {"corpus": corpus_path, "embeddings_dir": args.embeddings_dir,
                     "conllu_dir": args.conllu_dir, "mesh_vocab": args.mesh_vocab},
                    {"metrics": families, "kl_direction": args.kl_direction, "workers": args.workers})
    if "semantic" in families and not args.embeddings_dir:
        raise ConfigError("--metrics semantic needs --embeddings-dir")
    if "syntactic" in families and not args.conllu_dir:
        raise ConfigError("--metrics syntactic needs --conllu-dir")
    cfg.validate()
    corpus = load_corpus(corpus_path)
    pairs = _profile_pairs(corpus)
    if not pairs and families != ["syntactic"]:
        raise DataError(f"{corpus_path}: no (machine, human) profile pairs to evaluate")

    rows: list[MetricRow] = []
    tables: dict[str, list[dict]] = {}

    def add(family, rid, pair, metric, value):
        rows.append(MetricRow(family, rid, pair, metric, float(value)))

    if "lexical" in families:
        def lex(p):
            r, doc, human = p
            return p, lexical_scores(tokenize(doc.text), tokenize(human.text))
        for (r, doc, human), s in _pmap(lex, pairs, args.workers):
            label = pair_label(doc.variant.value, human.variant.value)
            add("lexical", r.id, label, "rouge_l_precision", s.rouge_l.precision)
            add("lexical", r.id, label, "rouge_l_recall", s.rouge_l.recall)
            add("lexical", r.id, label, "rouge_l_f1", s.rouge_l.f1)
            add("lexical", r.id, label, "bleu", s.bleu)
            add("lexical", r.id, label, "meteor", s.meteor)

    if "divergence" in families:
        vocab = load_mesh_vocabulary(args.mesh_vocab) if args.mesh_vocab else None
        docs = sorted(corpus.profiles, key=lambda d: (d.researcher_id, d.variant.value))
        if len(docs) < 2:
            raise DataError("divergence needs at least 2 profiles in the corpus")
        toks = {(d.researcher_id, d.variant): tokenize(d.text) for d in docs}
        vecs = dict(zip(toks, tfidf_corpus(list(toks.values()))))
        novel_rows = []
        for r, doc, human in pairs:
            km, kh = (r.id, doc.variant), (r.id, Variant.HUMAN)
            if kh not in vecs:
                continue
            label = pair_label(doc.variant.value, human.variant.value)
            add("divergence", r.id, label, "kl_nats", pair_kl(vecs[km], vecs[kh], args.kl_direction))
            add("divergence", r.id, label, "unique_term_count", len(unique_terms(vecs[km], vecs[kh])))
            if vocab is not None:
                novel = novel_mesh_terms(toks[km].tokens, toks[kh].tokens, vecs[km], vecs[kh], vocab)
                add("divergence", r.id, label, "mesh_novel_count", len(novel))
                novel_rows.extend({"researcher_id": r.id, "variant_pair": label, "term": t} for t in novel)
        if vocab is not None:
            tables["mesh_novel_terms"] = novel_rows

    if "semantic" in families:
        def emb(rid, variant):
            path = os.path.join(args.embeddings_dir, f"{rid}__{variant.value}.json")
            if not os.path.exists(path):
                raise DataError(f"missing embeddings file {path}")
            return load_embeddings(path)
        for r, doc, human in pairs:
            s = greedy_match_score(emb(r.id, doc.variant), emb(r.id, human.variant))
            label = pair_label(doc.variant.value, human.variant.value)
            add("semantic", r.id, label, "precision", s.precision)
            add("semantic", r.id, label, "recall", s.recall)
            add("semantic", r.id, label, "f1", s.f1)

    if "syntactic" in families:
        tables["syntactic"] = _syntactic_table(corpus, args.conllu_dir)

    if not rows and not tables:
        raise DataError("no metric values were produced")
    payload = {"rows": [asdict(r) for r in sorted(rows, key=lambda r: (r.family, r.researcher_id,
                                                                       r.variant_pair, r.metric))],
               "tables": tables, "families": families}
    _write_text(os.path.join(args.out, "evaluation.json"), _dumps(payload))
    for fam in families:
        n = sum(1 for r in rows if r.family == fam)
        print(f"{fam}\t{n} value(s)" if fam != "syntactic" else f"{fam}\t{len(tables['syntactic'])} row(s)")
    cfg.write()
    return EXIT_OK


def _syntactic_table(corpus: Corpus, conllu_dir: str) -> list[dict]:
    table = []
    found = 0
    for variant in Variant:
        docs = []
        for r in corpus.researchers:
            path = os.path.join(conllu_dir, f"{r.id}__{variant.value}.conllu")
            if os.path.exists(path):
                docs.append(parse_conllu(path))
            elif corpus.profile(r.id, variant) is not None:
                log.warning("no parse for %s/%s (%s)", r.id, variant.value, path)
        if not docs:
            continue
        found += len(docs)
        rep = syntactic_report(docs)
        for metric in ("max_dep_depth", "syntactic_complexity", "syntactic_ambiguity"):
            table.append({"variant": variant.value, "metric": metric, "value": getattr(rep, metric)})
        for tag, pct in rep.pos_distribution.items():
            table.append({"variant": variant.value, "metric": f"pos_pct.{tag}", "value": pct})
        for tag, n in rep.lexical_diversity.items():
            table.append({"variant": variant.value, "metric": f"distinct_lemmas.{tag}", "value": n})
    if not found:
        raise DataError(f"{conllu_dir}: no <researcher>__<Variant>.conllu files for this corpus")
    return table


# -- humaneval ------------------------------------------------------------

def humaneval_payload(records) -> dict:
    agreement = agreement_table(records)
    comparison = []
    achieved = {"overall": pooled_ac1(records)}
    try:
        achieved["band:high"] = stratified_ac1(records, "high")
    except ValueError:
        pass
    for scope, ref in REFERENCE_AC1.items():
        if scope not in achieved:
            continue
        res = achieved[scope]
        pooling = next(a["pooling"] for a in agreement if a["scope"] == scope)
        comparison.append({"scope": scope, "reference_ac1": ref, "achieved_ac1": res.ac1,
                           "tolerance": REFERENCE_TOLERANCE,
                           "within_tolerance": abs(res.ac1 - ref) <= REFERENCE_TOLERANCE,
                           "pooling": pooling})
    summary = []
    variants = sorted({r.variant.value for r in records})
    for v in variants:
        for dim, frac in summary_percentages(records, v).items():
            summary.append({"variant": v, "dimension": dim, "good_or_excellent": frac})
        summary.append({"variant": v, "dimension": "identified_as_human",
                        "good_or_excellent": identified_as_human_fraction(records, v)})
    return {"agreement": agreement, "reference_comparison": comparison, "summary": summary,
            "n_records": len(records), "dimensions": list(DIMENSIONS),
            "quality_dimensions": list(QUALITY_DIMENSIONS)}


def cmd_humaneval(args) -> int:
    cfg = RunConfig("humaneval", args.out, {"ratings": args.ratings}, {})
    if not args.ratings:
        raise ConfigError("--ratings is required")
    cfg.validate()
    records = load_ratings(args.ratings)
    if not records:
        raise DataError(f"{args.ratings}: no rating rows")
    payload = humaneval_payload(records)
    _write_text(os.path.join(args.out, "humaneval.json"), _dumps(payload))
    print(f"{'scope':<28}{'items':>6}{'pa':>9}{'pe':>9}{'AC1':>9}")
    for row in payload["agreement"]:
        print(f"{row['scope']:<28}{row['n_items']:>6}{row['observed_agreement']:>9.4f}"
              f"{row['chance_agreement']:>9.4f}{row['ac1']:>9.4f}")
    for c in payload["reference_comparison"]:
        status = "within" if c["within_tolerance"] else "OUTSIDE"
        print(f"{c['scope']}: achieved {c['achieved_ac1']:.4f} vs reference {c['reference_ac1']} "
              f"({status} +/-{c['tolerance']}); pooling: {c['pooling']}")
    cfg.write()
    return EXIT_OK


# -- report ---------------------------------------------------------------

def cmd_report(args) -> int:
    evaluation = args.evaluation or os.path.join(args.out, "evaluation.json")
    humaneval = args.humaneval or os.path.join(args.out, "humaneval.json")
    diversity = os.path.join(args.out, "topics", "diversity.csv")
    have = {p: os.path.exists(p) for p in (evaluation, humaneval, diversity)}
    if args.evaluation and not have[evaluation]:
        raise ConfigError(f"--evaluation: {evaluation} does not exist")
    if args.humaneval and not have[humaneval]:
        raise ConfigError(f"--humaneval: {humaneval} does not exist")
    cfg = RunConfig("report", args.out,
                    {k: (p if have[p] else None) for k, p in
                     (("evaluation", evaluation), ("humaneval", humaneval), ("diversity", diversity))},
                    {})
    if not any(have.values()):
        raise ConfigError(f"{args.out}: nothing to report (run evaluate, humaneval or topics first)")

    rows, tables, families = [], {}, []
    if have[evaluation]:
        with open(evaluation, encoding="utf-8") as fh:
            data = json.load(fh)
        try:
            rows = [MetricRow(**r) for r in data["rows"]]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{evaluation}: malformed rows: {exc}") from exc
        tables.update(data.get("tables", {}))
        families = data.get("families", [])
    if have[humaneval]:
        with open(humaneval, encoding="utf-8") as fh:
            data = json.load(fh)
        tables["human_agreement"] = data["agreement"]
        tables["human_reference_comparison"] = data["reference_comparison"]
        tables["human_summary"] = data["summary"]
    if have[diversity]:
        with open(diversity, encoding="utf-8", newline="") as fh:
            tables["topic_diversity"] = list(csv.DictReader(fh))
    report = build_report(rows, tables, meta={"families": families, "version": __version__})
    written = emit(report, os.path.join(args.out, "report"))
    for name in written:
        print(os.path.join("report", name))
    for t in report.tests:
        if t.get("p_value") is not None:
            print(f"{t['family']}.{t['metric']}: {t['a']} vs {t['b']} "
                  f"t={t['t_statistic']:.3f} p={t['p_value']:.4g} {t['stars']}")
    cfg.write()
    return EXIT_OK


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scholarprofile",
                                description="Generate and evaluate researcher interest profiles.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--out", required=True, help="output directory")
        if corpus:
            sp.add_argument("--corpus", help="corpus JSONL (default: OUT/corpus.jsonl)")
        sp.add_argument("--timestamp", help="created_at for new records (default: SOURCE_DATE_EPOCH or now)")
        sp.add_argument("--workers", type=int, default=1, help="per-researcher worker threads")

    sp = sub.add_parser("ingest", help="search, fetch and filter PubMed records")
    common(sp)
    sp.add_argument("--roster", required=True, help="CSV: id,name,affiliation[,human_profile_path]")
    sp.add_argument("--replay-dir", help="serve E-utilities responses from recorded fixtures")
    sp.add_argument("--record", action="store_true", help="fetch and save fixtures missing from --replay-dir")
    sp.add_argument("--authorship-rule", default=AuthorshipRule.FIRST_THREE_OR_LAST_THREE.value,
                    choices=[r.value for r in AuthorshipRule])
    sp.add_argument("--strict-names", action="store_true", help="match full fore names, not initials")
    sp.add_argument("--recency-years", type=int, default=10)
    sp.add_argument("--reference-year", type=int)
    sp.add_argument("--no-affiliation", action="store_true", help="search by author name only")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("topics", help="fit LDA and compute topic diversity")
    common(sp)
    sp.add_argument("--topics", type=int, default=30, metavar="K")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iterations", type=int, default=500)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float, default=0.01)
    sp.set_defaults(func=cmd_topics)

    sp = sub.add_parser("generate", help="generate profiles through an LLM provider")
    common(sp)
    sp.add_argument("--provider", help="provider config JSON")
    sp.add_argument("--strategy", default="all", help="mesh, abstract, paraphrase (comma list) or all")
    sp.add_argument("--mesh-vocab", help="MeSH descriptor XML or text vocabulary")
    sp.add_argument("--example", help="one-shot example JSON")
    sp.add_argument("--chunk-topics", type=int, default=5, help="LDA topics for abstract chunking")
    sp.add_argument("--iterations", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corpus-out", help="write the updated corpus here (default: --corpus)")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="score machine profiles against human profiles")
    common(sp)
    sp.add_argument("--metrics", default=DEFAULT_METRICS, help=f"comma list of {', '.join(METRIC_FAMILIES)}")
    sp.add_argument("--kl-direction", default=KLDirection.MACHINE_TO_HUMAN.value,
                    choices=[d.value for d in KLDirection])
    sp.add_argument("--mesh-vocab", help="count MeSH descriptors among unique terms")
    sp.add_argument("--embeddings-dir", help="<researcher>__<Variant>.json token embeddings")
    sp.add_argument("--conllu-dir", help="<researcher>__<Variant>.conllu parses")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("humaneval", help="agreement statistics over rating tables")
    common(sp, corpus=False)
    sp.add_argument("--ratings", help="ratings CSV or directory of CSVs")
    sp.set_defaults(func=cmd_humaneval)

    sp = sub.add_parser("report", help="t-tests and CSV/JSON report")
    common(sp, corpus=False)
    sp.add_argument("--evaluation", help="evaluation.json (default: OUT/evaluation.json)")
    sp.add_argument("--humaneval", help="humaneval.json (default: OUT/humaneval.json)")
    sp.set_defaults(func=cmd_report)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, (TransportError, EmbeddingTransportError, ProviderError)):
        return EXIT_TRANSPORT
    return EXIT_DATA


DATA_ERRORS = (DataError, CorpusFormatError, RatingsFormatError, ConlluError, EmbeddingError,
               MeshParseError, XmlParseError, EnvelopeError, ValueError, KeyError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, TransportError, EmbeddingTransportError, ProviderError, *DATA_ERRORS) as exc:
        code = _exit_code(exc)
        kind = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_TRANSPORT: "transport"}[code]
        print(json.dumps({"error": {"kind": kind, "exit_code": code, "type": type(exc).__name__,
                                    "command": args.command, "message": str(exc)}}, sort_keys=True),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
