import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scholarprofile.corpus import TokenizedDoc
from scholarprofile.topics import (
    LdaModel, TopicAssignment, assignments_by_researcher, band_counts, diversity_band,
    diversity_score, dominant_topic, fit_lda, group_docs_by_topic, heatmap_csv, transitions_csv,
    year_heatmap, year_transitions,
)


def synthetic(seed=0, n_docs=30, length=30):
    rng = random.Random(seed)
    vocabs = [[f"{p}{i}" for i in range(10)] for p in "xyz"]
    docs, labels = [], []
    for d in range(n_docs):
        k = d % 3
        labels.append(k)
        docs.append(TokenizedDoc(tuple(rng.choice(vocabs[k]) for _ in range(length))))
    return docs, labels


def purity(labels, topics):
    total = 0
    for k in set(topics):
        total += Counter(l for l, t in zip(labels, topics) if t == k).most_common(1)[0][1]
    return total / len(labels)


def test_seeded_refit_is_bit_identical():
    docs, _ = synthetic()
    a = fit_lda(docs, K=3, iterations=30, seed=42)
    b = fit_lda(docs, K=3, iterations=30, seed=42)
    assert np.array_equal(a.topic_word_counts, b.topic_word_counts)
    assert np.array_equal(a.doc_topic_counts, b.doc_topic_counts)
    assert a.to_json() == b.to_json()


def test_three_topic_recovery():
    docs, labels = synthetic()
    model = fit_lda(docs, K=3, iterations=200, seed=1)
    assert purity(labels, [dominant_topic(model, d) for d in range(len(docs))]) >= 0.8


def test_defaults():
    docs, _ = synthetic(n_docs=6, length=5)
    model = fit_lda(docs, K=5, iterations=2)
    assert model.alpha == 10.0 and model.beta == 0.01


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), max_size=12), min_size=1, max_size=6),
       st.integers(2, 4), st.integers(0, 1000))
def test_count_conservation(raw_docs, k, seed):
    total = sum(len(d) for d in raw_docs)
    if total < k:
        with pytest.raises(ValueError):
            fit_lda([TokenizedDoc(tuple(d)) for d in raw_docs], K=k, iterations=3, seed=seed)
        return
    model = fit_lda([TokenizedDoc(tuple(d)) for d in raw_docs], K=k, iterations=3, seed=seed)
    assert model.topic_word_counts.sum() == total == model.doc_topic_counts.sum()
    assert model.doc_topic_counts.sum(axis=1).tolist() == [len(d) for d in raw_docs]
    freq = Counter(t for d in raw_docs for t in d)
    col = model.topic_word_counts.sum(axis=0)
    assert {w: int(col[i]) for i, w in enumerate(model.vocabulary)} == freq
    assert model.topic_word_counts.sum(axis=1).tolist() == model.doc_topic_counts.sum(axis=0).tolist()
    for d in range(model.num_docs):
        assert model.doc_topic_proportions(d).sum() == pytest.approx(1.0)


def test_snapshot_round_trip(tmp_path):
    docs, _ = synthetic(n_docs=6, length=8)
    model = fit_lda(docs, K=3, iterations=5, seed=3)
    path = tmp_path / "lda.json"
    model.save(path)
    loaded = LdaModel.load(path)
    assert loaded.to_json() == model.to_json()
    assert loaded.top_words(0, 3) == model.top_words(0, 3)
    bad = model.to_json() | {"version": 99}
    with pytest.raises(ValueError, match="version"):
        LdaModel.from_json(bad)


@pytest.mark.parametrize("kwargs,message", [
    ({"K": 1}, "K must be"), ({"iterations": 0}, "iterations"), ({"alpha": -1.0}, "positive"),
])
def test_fit_validation(kwargs, message):
    docs, _ = synthetic(n_docs=3, length=3)
    with pytest.raises(ValueError, match=message):
        fit_lda(docs, **kwargs)
    with pytest.raises(ValueError, match="no documents"):
        fit_lda([])
    with pytest.raises(ValueError, match="empty vocabulary"):
        fit_lda([TokenizedDoc(())])


def assigned(*topics):
    return [TopicAssignment("r", str(i), 2020, t) for i, t in enumerate(topics)]


@pytest.mark.parametrize("topics,expected", [
    ((0, 0, 0, 0), 0.25), ((0, 1, 2, 3), 1.0), ((0, 1, 1, 0, 2), 0.6), ((4,), 1.0),
])
def test_diversity_hand_cases(topics, expected):
    assert diversity_score(assigned(*topics)) == expected


def test_diversity_needs_publications():
    with pytest.raises(ValueError):
        diversity_score([])


@pytest.mark.parametrize("score,band", [
    (0.0, "stable"), (0.29, "stable"), (0.3, "moderate"), (0.7, "moderate"),
    (0.71, "evolving"), (1.0, "evolving"),
])
def test_band_thresholds(score, band):
    assert diversity_band(score) == band


def test_band_counts():
    assert band_counts({"a": 0.1, "b": 0.5, "c": 0.9, "d": 0.2}) == {
        "stable": 2, "moderate": 1, "evolving": 1}


def test_group_docs_by_topic_partitions():
    docs, _ = synthetic(n_docs=9, length=10)
    model = fit_lda(docs, K=3, iterations=20, seed=0)
    groups = group_docs_by_topic(model, docs)
    assert sorted(d for g in groups.values() for d in g) == list(range(9))
    with pytest.raises(ValueError):
        group_docs_by_topic(model, docs[:3])


def test_year_heatmap_and_transitions():
    a = [TopicAssignment("r", "1", 2019, 0), TopicAssignment("r", "2", 2019, 1),
         TopicAssignment("r", "3", 2020, 1), TopicAssignment("r", "4", 2022, 2)]
    heat = year_heatmap(a, [2019, 2020, 2021, 2022], 3)
    assert heat.tolist() == [[0.5, 0.5, 0], [0, 1, 0], [0, 0, 0], [0, 0, 1]]
    trans = year_transitions(a, 3)
    assert trans.tolist() == [[0, 1, 0], [0, 1 / 3, 2 / 3], [0, 0, 0]]
    assert year_transitions([], 2).tolist() == [[0, 0], [0, 0]]
    csv_text = heatmap_csv({"r": ([2019, 2020], heat[:2])}, 3)
    assert csv_text.splitlines()[1] == "r,2019,0.500000,0.500000,0.000000"
    assert transitions_csv({"r": trans}, 3).count("\n") == 3


def test_assignments_by_researcher():
    docs, _ = synthetic(n_docs=4, length=6)
    model = fit_lda(docs, K=2, iterations=5, seed=0)
    out = assignments_by_researcher(model, [("a", "1", 2020), ("a", "2", 2021),
                                            ("b", "3", 2020), ("b", "4", 2020)])
    assert [x.pmid for x in out["a"]] == ["1", "2"]
    assert out["b"][0].dominant_topic == dominant_topic(model, 2)
