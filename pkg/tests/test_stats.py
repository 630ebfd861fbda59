import json
import random

import pytest
from hypothesis import given, strategies as st
from scipy import special, stats as sps

from scholarprofile.stats import (
    DegenerateTestError, MetricRow, assign_stars, build_report, emit, family_csv, long_csv,
    paired_t_test, regularized_incomplete_beta, student_t_two_sided_p,
)


def test_incomplete_beta_matches_scipy():
    rng = random.Random(3)
    for _ in range(200):
        a, b, x = rng.uniform(0.05, 40), rng.uniform(0.05, 40), rng.random()
        assert regularized_incomplete_beta(a, b, x) == pytest.approx(
            special.betainc(a, b, x), abs=1e-10)


def test_incomplete_beta_endpoints_and_errors():
    assert regularized_incomplete_beta(2, 3, 0.0) == 0.0
    assert regularized_incomplete_beta(2, 3, 1.0) == 1.0
    with pytest.raises(ValueError):
        regularized_incomplete_beta(0, 1, 0.5)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1, 1, 1.5)


def test_paired_t_matches_scipy_on_50_cases():
    rng = random.Random(9)
    for _ in range(50):
        n = rng.randint(2, 40)
        a = [rng.gauss(0, 1) for _ in range(n)]
        b = [x + rng.gauss(rng.uniform(-1, 1), rng.uniform(0.1, 2)) for x in a]
        res = paired_t_test(a, b)
        ref = sps.ttest_rel(a, b)
        assert res.t_statistic == pytest.approx(ref.statistic, rel=1e-9)
        assert res.p_value == pytest.approx(ref.pvalue, abs=1e-6)
        assert res.degrees_of_freedom == n - 1


def test_t_p_value_special_cases():
    assert student_t_two_sided_p(0.0, 5) == 1.0
    assert student_t_two_sided_p(float("inf"), 5) == 0.0
    with pytest.raises(ValueError):
        student_t_two_sided_p(1.0, 0)


@pytest.mark.parametrize("p,stars", [
    (0.05, "ns"), (0.0499999, "*"), (0.01, "*"), (0.0099999, "**"),
    (0.001, "**"), (0.000999, "***"), (0.0, "***"), (1.0, "ns"),
])
def test_star_boundaries(p, stars):
    assert assign_stars(p) == stars


def test_stars_reject_invalid():
    with pytest.raises(ValueError):
        assign_stars(1.5)


def test_paired_t_errors():
    with pytest.raises(ValueError, match="mismatch"):
        paired_t_test([1, 2], [1])
    with pytest.raises(ValueError, match="at least 2"):
        paired_t_test([1], [2])
    with pytest.raises(DegenerateTestError):
        paired_t_test([1, 2, 3], [0, 1, 2])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20), st.floats(-5, 5))
def test_t_sign_and_bounds(a, shift):
    b = [x + shift + 0.01 * i for i, x in enumerate(a)]
    try:
        res = paired_t_test(a, b)
    except DegenerateTestError:
        return
    assert 0.0 <= res.p_value <= 1.0
    assert paired_t_test(b, a).p_value == pytest.approx(res.p_value)


def rows():
    out = []
    for i, rid in enumerate(["r1", "r2", "r3"]):
        out.append(MetricRow("divergence", rid, "MeshGen-vs-Human", "kl_nats", 10.0 + i))
        out.append(MetricRow("divergence", rid, "Paraphrase-vs-Human", "kl_nats", 1.0 + i * i))
        out.append(MetricRow("lexical", rid, "MeshGen-vs-Human", "bleu", 0.1 * (i + 1)))
    return out


def test_build_report_aggregates_and_tests():
    report = build_report(reversed(rows()), meta={"run": "x"})
    agg = {(a["metric"], a["variant_pair"]): a for a in report.aggregates}
    assert agg[("kl_nats", "MeshGen-vs-Human")]["mean"] == 11.0
    assert agg[("kl_nats", "MeshGen-vs-Human")]["variance"] == 1.0
    (test,) = report.tests
    expected = sps.ttest_rel([10, 11, 12], [1, 2, 5])
    assert test["p_value"] == pytest.approx(expected.pvalue, abs=1e-9)
    assert report.families() == ["divergence", "lexical"]
    assert report.rows == sorted(report.rows, key=lambda r: (r.family, r.researcher_id,
                                                             r.variant_pair, r.metric))


def test_degenerate_comparison_recorded_not_raised():
    data = [MetricRow("x", r, p, "m", v) for r, p, v in
            [("a", "P", 1.0), ("b", "P", 2.0), ("a", "Q", 0.0), ("b", "Q", 1.0)]]
    (test,) = build_report(data).tests
    assert test["p_value"] is None and "zero variance" in test["note"]


def test_build_report_errors():
    with pytest.raises(ValueError, match="no metric family"):
        build_report([])
    dup = rows()[:1] * 2
    with pytest.raises(ValueError, match="duplicate"):
        build_report(dup)


def test_csv_layouts():
    report = build_report(rows(), tables={"extra": [{"k": "a", "v": 1.5}]})
    wide = family_csv(report, "divergence").splitlines()
    assert wide[0] == "researcher_id,variant_pair,kl_nats"
    assert wide[1] == "r1,MeshGen-vs-Human,10.0"
    long = long_csv(report).splitlines()
    assert long[0] == "metric,variant,researcher_id,value"
    assert "divergence.kl_nats,MeshGen-vs-Human,r1,10.0" in long


def test_emit_is_byte_stable(tmp_path):
    report = build_report(rows(), tables={"extra": [{"k": "a", "v": 1.5}]})
    names = emit(report, tmp_path / "a")
    emit(build_report(rows(), tables={"extra": [{"k": "a", "v": 1.5}]}), tmp_path / "b")
    assert names == sorted(["aggregates.csv", "divergence.csv", "extra.csv", "lexical.csv",
                            "metrics_long.csv", "report.json", "tests.csv"])
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    data = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(data) == {"meta", "rows", "aggregates", "tests", "tables"}
