"""Likert rating tables and Gwet's AC1 inter-rater agreement."""
from __future__ import annotations

import csv
import io
import os
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence

from .corpus import Variant

QUALITY_SCALE = ("Very poor", "Poor", "Fair", "Good", "Excellent")
GRANULARITY_SCALE = ("Too general", "General", "Good granularity", "Detailed", "Too detailed")
QUALITY_DIMENSIONS = ("overall", "factual_accuracy", "readability", "comprehensiveness",
                      "specificity", "conciseness")
DIMENSIONS = ("overall", "factual_accuracy", "granularity", "readability", "comprehensiveness",
              "specificity", "conciseness")
HEADER = ("faculty", "rater", "variant", *DIMENSIONS, "identified_as_human")
POSITIVE = frozenset({"Good", "Excellent"})
BANDS = {"Very poor": "low", "Poor": "low", "Fair": "middle", "Good": "high", "Excellent": "high"}


def scale_for(dimension: str) -> tuple[str, ...]:
    return GRANULARITY_SCALE if dimension == "granularity" else QUALITY_SCALE


class RatingsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RatingRecord:
    faculty_id: int
    rater_index: int
    variant: Variant
    dimensions: Mapping[str, str]
    identified_as_human: bool

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        for dim in DIMENSIONS:
            if dim not in self.dimensions:
                raise RatingsFormatError(f"missing dimension {dim!r}")
            if self.dimensions[dim] not in scale_for(dim):
                raise RatingsFormatError(
                    f"unknown {dim} category {self.dimensions[dim]!r}; "
                    f"expected one of {', '.join(scale_for(dim))}")


def _parse_bool(value: str) -> bool:
    v = value.strip().upper()
    if v in {"TRUE", "T", "YES", "1"}:
        return True
    if v in {"FALSE", "F", "NO", "0"}:
        return False
    raise RatingsFormatError(f"identified_as_human must be TRUE/FALSE, got {value!r}")


def _read(fh, source: str) -> list[RatingRecord]:
    reader = csv.DictReader(fh)
    missing = [h for h in HEADER if h not in (reader.fieldnames or ())]
    if missing:
        raise RatingsFormatError(f"{source}: header lacks {', '.join(missing)}")
    out = []
    for row in reader:
        line = reader.line_num
        try:
            out.append(RatingRecord(
                faculty_id=int(row["faculty"]),
                rater_index=int(row["rater"]),
                variant=row["variant"],
                dimensions={d: (row[d] or "").strip() for d in DIMENSIONS},
                identified_as_human=_parse_bool(row["identified_as_human"] or ""),
            ))
        except (RatingsFormatError, ValueError) as exc:
            raise RatingsFormatError(f"{source}: row at line {line}: {exc}") from None
    return out


def load_ratings(path: str | os.PathLike) -> list[RatingRecord]:
    """Read one ratings CSV, or every ``*.csv`` in a directory (sorted by name)."""
    if os.path.isdir(path):
        files = sorted(p for p in os.listdir(path) if p.endswith(".csv"))
        if not files:
            raise RatingsFormatError(f"{path}: no rating CSV files")
        return [r for name in files for r in load_ratings(os.path.join(path, name))]
    with open(path, encoding="utf-8", newline="") as fh:
        return _read(fh, str(path))


def dumps_ratings(records: Iterable[RatingRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for r in records:
        writer.writerow([r.faculty_id, r.rater_index, r.variant.value,
                         *[r.dimensions[d] for d in DIMENSIONS],
                         "TRUE" if r.identified_as_human else "FALSE"])
    return buf.getvalue()


def loads_ratings(text: str) -> list[RatingRecord]:
    return _read(io.StringIO(text), "<string>")


# -- agreement ------------------------------------------------------------

@dataclass(frozen=True)
class AgreementResult:
    ac1: float
    observed_agreement: float
    chance_agreement: float
    n_items: int
    n_raters: int
    n_categories: int


def gwet_ac1(items: Sequence[Sequence[Hashable]], n_categories: int) -> AgreementResult:
    """Gwet's AC1 for nominal categories; items may have different rater counts (>= 2)."""
    if n_categories < 2:
        raise ValueError("need at least 2 categories")
    if not items:
        raise ValueError("no items to rate")
    pa = 0.0
    prevalence: Counter = Counter()
    raters = 0
    for i, labels in enumerate(items):
        r = len(labels)
        if r < 2:
            raise ValueError(f"item {i} has {r} rating(s); AC1 needs at least 2")
        raters = max(raters, r)
        counts = Counter(labels)
        pa += sum(k * (k - 1) for k in counts.values()) / (r * (r - 1))
        for label, k in counts.items():
            prevalence[label] += k / r
    n = len(items)
    if len(prevalence) > n_categories:
        raise ValueError(f"{len(prevalence)} distinct labels exceed n_categories={n_categories}")
    pa /= n
    pis = [v / n for v in prevalence.values()]
    pe = sum(p * (1 - p) for p in pis) / (n_categories - 1)
    ac1 = 1.0 if pe == 1 else (pa - pe) / (1 - pe)
    return AgreementResult(ac1, pa, pe, n, raters, n_categories)


def rating_items(records: Iterable[RatingRecord], dimensions: Sequence[str] = ("overall",)
                 ) -> dict[tuple, list[str]]:
    """(faculty, variant, dimension) -> labels in rater order."""
    items: dict[tuple, list[tuple[int, str]]] = defaultdict(list)
    for r in records:
        for dim in dimensions:
            items[(r.faculty_id, r.variant.value, dim)].append((r.rater_index, r.dimensions[dim]))
    return {k: [lab for _, lab in sorted(v)] for k, v in sorted(items.items())}


def pooled_ac1(records: Sequence[RatingRecord], dimensions: Sequence[str] = ("overall",)
               ) -> AgreementResult:
    """Items are (faculty, variant, dimension) triples pooled across all variants."""
    scales = {scale_for(d) for d in dimensions}
    if len(scales) != 1:
        raise ValueError("cannot pool dimensions rated on different scales")
    return gwet_ac1(list(rating_items(records, dimensions).values()), len(scales.pop()))


def per_variant_ac1(records: Sequence[RatingRecord], dimension: str = "overall"
                    ) -> dict[str, AgreementResult]:
    by_variant: dict[str, list[RatingRecord]] = defaultdict(list)
    for r in records:
        by_variant[r.variant.value].append(r)
    return {v: pooled_ac1(rs, (dimension,)) for v, rs in sorted(by_variant.items())}


def item_band(labels: Sequence[str]) -> str:
    """Band of the majority label; no majority -> middle."""
    label, count = Counter(labels).most_common(1)[0]
    if count * 2 <= len(labels):
        return "middle"
    return BANDS[label]


def stratified_ac1(records: Sequence[RatingRecord], band: str,
                   dimension: str = "overall") -> AgreementResult:
    if band not in {"low", "middle", "high"}:
        raise ValueError(f"unknown band {band!r}")
    items = [labs for labs in rating_items(records, (dimension,)).values()
             if item_band(labs) == band]
    if not items:
        raise ValueError(f"no items fall in the {band} band")
    return gwet_ac1(items, len(scale_for(dimension)))


def summary_percentages(records: Iterable[RatingRecord], variant: Variant | str,
                        dimensions: Sequence[str] = QUALITY_DIMENSIONS) -> dict[str, float]:
    """Fraction of ratings that are Good or Excellent, per quality dimension."""
    variant = Variant.parse(variant)
    rows = [r for r in records if r.variant is variant]
    if not rows:
        raise ValueError(f"no ratings for variant {variant.value}")
    return {d: sum(r.dimensions[d] in POSITIVE for r in rows) / len(rows) for d in dimensions}


def identified_as_human_fraction(records: Iterable[RatingRecord], variant: Variant | str) -> float:
    variant = Variant.parse(variant)
    rows = [r for r in records if r.variant is variant]
    if not rows:
        raise ValueError(f"no ratings for variant {variant.value}")
    return sum(r.identified_as_human for r in rows) / len(rows)


def agreement_table(records: Sequence[RatingRecord]) -> list[dict]:
    """Rows for the human-evaluation report: pooled, per-variant and banded AC1."""
    rows = []

    def add(scope: str, res: AgreementResult, pooling: str):
        rows.append({"scope": scope, "pooling": pooling, "ac1": res.ac1,
                     "observed_agreement": res.observed_agreement,
                     "chance_agreement": res.chance_agreement, "n_items": res.n_items,
                     "n_raters": res.n_raters, "n_categories": res.n_categories})

    add("overall", pooled_ac1(records), "items=(faculty,variant) on overall impression")
    for v, res in per_variant_ac1(records).items():
        add(f"variant:{v}", res, "items=faculty on overall impression")
    for band in ("low", "middle", "high"):
        try:
            add(f"band:{band}", stratified_ac1(records, band),
                "items=(faculty,variant) whose majority overall label falls in the band")
        except ValueError:
            pass
    for dim in DIMENSIONS:
        add(f"dimension:{dim}", pooled_ac1(records, (dim,)), f"items=(faculty,variant) on {dim}")
    add("quality-dimensions", pooled_ac1(records, QUALITY_DIMENSIONS),
        "items=(faculty,variant,dimension) over the six quality dimensions")
    return rows
