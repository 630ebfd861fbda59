"""Paired t-tests, significance stars and metric report emission."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

CF_TOLERANCE = 1e-12
CF_MAX_ITER = 10_000

# Column order of the flat CSV for each metric family.
FAMILY_COLUMNS = {
    "lexical": ("rouge_l_precision", "rouge_l_recall", "rouge_l_f1", "bleu", "meteor"),
    "divergence": ("kl_nats", "unique_term_count", "mesh_novel_count"),
    "semantic": ("precision", "recall", "f1"),
}


class DegenerateTestError(ValueError):
    """Differences have zero variance, so t and p are undefined."""


def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_TOLERANCE:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t)))


def assign_stars(p: float) -> str:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "ns"


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    stars: str


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> PairedTestResult:
    """Two-sided paired Student t-test on a - b."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = [x - y for x, y in zip(a, b)]
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    scale = max(1.0, max(abs(x) for x in d))
    if var <= (1e-15 * scale) ** 2:
        raise DegenerateTestError("differences have zero variance; p is undefined")
    t = mean / math.sqrt(var / n)
    p = student_t_two_sided_p(t, n - 1)
    return PairedTestResult(t, n - 1, p, assign_stars(p))


# -- report ---------------------------------------------------------------

@dataclass(frozen=True)
class MetricRow:
    family: str
    researcher_id: str
    variant_pair: str
    metric: str
    value: float


def pair_label(candidate: str, reference: str) -> str:
    return f"{candidate}-vs-{reference}"


@dataclass
class MetricReport:
    rows: list[MetricRow]
    aggregates: list[dict] = field(default_factory=list)
    tests: list[dict] = field(default_factory=list)
    tables: dict[str, list[dict]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def families(self) -> list[str]:
        return sorted({r.family for r in self.rows} | set(self.tables))

    def to_json(self) -> dict:
        return {
            "meta": self.meta,
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "tests": self.tests,
            "tables": self.tables,
        }


def _row_key(r: MetricRow):
    return (r.family, r.researcher_id, r.variant_pair, r.metric)


def build_report(rows: Iterable[MetricRow], tables: dict[str, list[dict]] | None = None,
                 meta: dict | None = None) -> MetricReport:
    rows = sorted(rows, key=_row_key)
    tables = dict(sorted((tables or {}).items()))
    if not rows and not tables:
        raise ValueError("no metric family was computed")
    seen = set()
    for r in rows:
        k = _row_key(r)
        if k in seen:
            raise ValueError(f"duplicate metric row {k}")
        seen.add(k)

    groups: dict[tuple, dict[str, float]] = defaultdict(dict)
    for r in rows:
        groups[(r.family, r.metric, r.variant_pair)][r.researcher_id] = r.value

    aggregates = []
    for (family, metric, pair), vals in sorted(groups.items()):
        xs = [vals[k] for k in sorted(vals)]
        aggregates.append({
            "family": family, "metric": metric, "variant_pair": pair, "n": len(xs),
            "mean": statistics.fmean(xs),
            "variance": statistics.variance(xs) if len(xs) > 1 else 0.0,
        })

    tests = []
    by_metric: dict[tuple, dict[str, dict[str, float]]] = defaultdict(dict)
    for (family, metric, pair), vals in groups.items():
        by_metric[(family, metric)][pair] = vals
    for (family, metric), pairs in sorted(by_metric.items()):
        for p1, p2 in combinations(sorted(pairs), 2):
            common = sorted(set(pairs[p1]) & set(pairs[p2]))
            entry = {"family": family, "metric": metric, "a": p1, "b": p2, "n": len(common)}
            try:
                res = paired_t_test([pairs[p1][k] for k in common], [pairs[p2][k] for k in common])
                entry.update(asdict(res))
            except ValueError as exc:
                entry.update({"t_statistic": None, "degrees_of_freedom": None,
                              "p_value": None, "stars": None, "note": str(exc)})
            tests.append(entry)
    return MetricReport(rows, aggregates, tests, tables, dict(meta or {}))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def family_csv(report: MetricReport, family: str) -> str:
    wide: dict[tuple, dict[str, float]] = defaultdict(dict)
    for r in report.rows:
        if r.family == family:
            wide[(r.researcher_id, r.variant_pair)][r.metric] = r.value
    known = FAMILY_COLUMNS.get(family, ())
    extra = sorted({m for v in wide.values() for m in v} - set(known))
    cols = [c for c in known if any(c in v for v in wide.values())] + extra
    return _csv(["researcher_id", "variant_pair", *cols],
                ([rid, pair, *[vals.get(c) for c in cols]] for (rid, pair), vals in sorted(wide.items())))


def table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    header = list(rows[0])
    return _csv(header, ([r.get(h) for h in header] for r in rows))


def long_csv(report: MetricReport) -> str:
    return _csv(["metric", "variant", "researcher_id", "value"],
                ([f"{r.family}.{r.metric}", r.variant_pair, r.researcher_id, r.value]
                 for r in report.rows))


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def emit(report: MetricReport, directory: str | os.PathLike) -> list[str]:
    """Write report.json plus one CSV per family; returns the written file names."""
    os.makedirs(directory, exist_ok=True)
    written = {}
    written["report.json"] = json.dumps(report.to_json(), indent=2, sort_keys=True,
                                        ensure_ascii=False) + "\n"
    for family in sorted({r.family for r in report.rows}):
        written[f"{family}.csv"] = family_csv(report, family)
    for name, rows in report.tables.items():
        written[f"{name}.csv"] = table_csv(rows)
    written["metrics_long.csv"] = long_csv(report)
    written["tests.csv"] = table_csv([
        {k: t.get(k) for k in ("family", "metric", "a", "b", "n", "t_statistic",
                               "degrees_of_freedom", "p_value", "stars")}
        for t in report.tests])
    written["aggregates.csv"] = table_csv(report.aggregates)
    for name, text in sorted(written.items()):
        _write(os.path.join(directory, name), text)
    return sorted(written)
