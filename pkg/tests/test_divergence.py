import math
import random

import pytest
from hypothesis import given, strategies as st

from scholarprofile.corpus import TokenizedDoc, Variant, load_corpus, tokenize
from scholarprofile.divergence import (
    KLDirection, MeshParseError, MeshVocabulary, TermDistribution, TfIdfVector, kl_divergence,
    load_mesh_vocabulary, mesh_novelty, novel_mesh_terms, pair_kl, tfidf_corpus, to_distribution,
    unique_phrases, unique_terms,
)

from conftest import FIXTURES


def dist(*probs):
    return TermDistribution({f"t{i}": p for i, p in enumerate(probs)})


@pytest.mark.parametrize("p,q,expected", [
    ((0.9, 0.1), (0.1, 0.9), 0.8 * math.log(9)),
    ((0.5, 0.5), (0.25, 0.75), 0.5 * math.log(2) + 0.5 * math.log(2 / 3)),
    ((1.0, 0.0), (0.5, 0.5), math.log(2)),
    ((0.25, 0.25, 0.5), (0.5, 0.25, 0.25), 0.25 * math.log(0.5) + 0.5 * math.log(2)),
])
def test_kl_closed_form(p, q, expected):
    assert kl_divergence(dist(*p), dist(*q)) == pytest.approx(expected, abs=1e-6)


def test_kl_reference_value():
    assert kl_divergence(dist(0.9, 0.1), dist(0.1, 0.9)) == pytest.approx(1.7578, abs=1e-4)


def random_distribution(rng, k):
    raw = [rng.random() + 1e-6 for _ in range(k)]
    s = sum(raw)
    return dist(*[x / s for x in raw])


def test_kl_nonnegative_and_zero_on_identity():
    rng = random.Random(11)
    for _ in range(1000):
        k = rng.randint(1, 8)
        p, q = random_distribution(rng, k), random_distribution(rng, k)
        assert kl_divergence(p, q) >= -1e-9
        assert abs(kl_divergence(p, p)) <= 1e-9


def test_kl_support_mismatch():
    with pytest.raises(ValueError, match="same support"):
        kl_divergence(TermDistribution({"a": 1.0}), TermDistribution({"b": 1.0}))


def test_tfidf_hand_case():
    docs = [tokenize("cancer cancer genomics"), tokenize("cancer imaging"), tokenize("imaging")]
    vecs = tfidf_corpus(docs, stoplist=())
    assert vecs[0].weights == pytest.approx({"cancer": 2 * math.log(3 / 2),
                                             "genomics": math.log(3)})
    assert vecs[1].weights["imaging"] == pytest.approx(math.log(3 / 2))
    assert vecs[0].doc_length == 3


def test_tfidf_removes_stopwords_and_needs_two_docs():
    vecs = tfidf_corpus([tokenize("the cat"), tokenize("the dog")])
    assert "the" not in vecs[0].weights
    with pytest.raises(ValueError, match="at least 2"):
        tfidf_corpus([tokenize("one")])


def test_to_distribution_smooths_and_normalises():
    d = to_distribution(TfIdfVector({"a": 3.0}, 1), {"a", "b"}, epsilon=1.0)
    assert d.probs == pytest.approx({"a": 0.8, "b": 0.2})
    assert math.fsum(d.probs.values()) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        to_distribution(TfIdfVector({}, 0), [])


def test_pair_kl_direction_and_empty():
    a = TfIdfVector({"x": 2.0, "y": 1.0}, 3)
    b = TfIdfVector({"y": 2.0}, 2)
    forward = pair_kl(a, b)
    backward = pair_kl(a, b, KLDirection.HUMAN_TO_MACHINE)
    assert forward > 0 and backward > 0 and forward != pytest.approx(backward)
    assert pair_kl(a, b, "human-machine") == backward
    assert pair_kl(TfIdfVector({}, 0), TfIdfVector({}, 0)) == 0.0
    assert pair_kl(a, a) == pytest.approx(0.0, abs=1e-12)


weights = st.dictionaries(st.sampled_from("abcdef"), st.floats(0, 10), min_size=1)


@given(weights, weights)
def test_pair_kl_nonnegative(wa, wb):
    assert pair_kl(TfIdfVector(wa, 1), TfIdfVector(wb, 1)) >= 0.0


def test_unique_terms_and_phrases():
    a = TfIdfVector({"asthma": 1.0, "air": 0.5, "zero": 0.0}, 3)
    b = TfIdfVector({"air": 1.0}, 1)
    assert unique_terms(a, b) == {"asthma"}
    assert unique_phrases(["air", "pollution", "kills"], ["air", "quality"]) == {
        "air pollution", "pollution kills", "air pollution kills"}


def test_mesh_vocabulary_xml(tmp_path):
    vocab = load_mesh_vocabulary(FIXTURES / "mesh" / "desc_subset.xml")
    assert "asthma" in vocab and "ASTHMA" in vocab
    assert vocab.trees("Asthma") == ["C08.127.108", "C08.381.495.108"]
    assert vocab.lookup("biomarkers tumor") == "biomarkers, tumor"
    assert vocab.trees("not a term") == []
    bad = tmp_path / "bad.xml"
    bad.write_text("<DescriptorRecordSet><DescriptorRecord><DescriptorName>")
    with pytest.raises(MeshParseError, match="DescriptorRecordSet"):
        load_mesh_vocabulary(bad)
    bad.write_text("<DescriptorRecordSet><DescriptorRecord/></DescriptorRecordSet>")
    with pytest.raises(MeshParseError, match="without DescriptorName"):
        load_mesh_vocabulary(bad)


def test_mesh_vocabulary_text(tmp_path):
    path = tmp_path / "terms.tsv"
    path.write_text("# comment\nAsthma\tC08.127.108;C08.381.495.108\nMortality\n")
    vocab = load_mesh_vocabulary(path)
    assert len(vocab) == 2 and vocab.trees("asthma") == ["C08.127.108", "C08.381.495.108"]
    plain = load_mesh_vocabulary(FIXTURES / "mesh" / "novel_terms.txt")
    assert "air pollution" in plain
    (tmp_path / "empty.txt").write_text("")
    with pytest.raises(MeshParseError, match="empty"):
        load_mesh_vocabulary(tmp_path / "empty.txt")


def test_mesh_novelty_filters_to_descriptors():
    vocab = MeshVocabulary()
    vocab.add("Air Pollution", ["G03.230.100"])
    vocab.add("Asthma")
    assert mesh_novelty({"air pollution", "asthma", "weather"}, vocab) == ["air pollution", "asthma"]
    a_tokens = tokenize("air pollution and asthma").tokens
    b_tokens = tokenize("weather and asthma").tokens
    va, vb = tfidf_corpus([TokenizedDoc(a_tokens), TokenizedDoc(b_tokens)], stoplist=())
    assert novel_mesh_terms(a_tokens, b_tokens, va, vb, vocab) == ["air pollution"]


def test_fixture_machine_kl_exceeds_paraphrase():
    corpus = load_corpus(FIXTURES / "corpus" / "profiles.jsonl")
    order = [(p.researcher_id, p.variant) for p in corpus.profiles]
    vecs = dict(zip(order, tfidf_corpus([tokenize(p.text) for p in corpus.profiles])))
    for r in corpus.researchers:
        human = vecs[(r.id, Variant.HUMAN)]
        para = pair_kl(vecs[(r.id, Variant.PARAPHRASE)], human)
        for v in (Variant.MESH, Variant.ABSTRACT):
            assert pair_kl(vecs[(r.id, v)], human) > para, (r.id, v)
