"""PubMed E-utilities client (esearch/efetch), XML parsing and publication filters.

Every request goes through a :class:`RateLimiter` and a transport.  The
replay transport maps each request URL to ``<dir>/<sha256(url)>.xml`` so the
whole ingest path can run offline against recorded responses.
"""
from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
import unicodedata
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence
from urllib.parse import urlencode

import httpx

from .corpus import PublicationRecord, Researcher

log = logging.getLogger(__name__)

EUTILS_BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/"
MAX_BATCH = 200
_YEAR_RE = re.compile(r"(\d{4})")


class TransportError(RuntimeError):
    """HTTP failure that survived all retries, or a missing replay fixture."""


class EnvelopeError(ValueError):
    """The service answered, but not with the document shape we expect."""


class XmlParseError(ValueError):
    def __init__(self, message: str, element_path: str):
        super().__init__(f"{message} (at {element_path or '<document>'})")
        self.element_path = element_path


class AuthorshipRule(str, Enum):
    FIRST_THREE_OR_LAST_THREE = "first3-last3"
    FIRST_THREE_OR_SENIOR = "first3-senior"


@dataclass(frozen=True)
class SearchQuery:
    author_name: str
    date_from: int
    date_to: int
    affiliation: str | None = None

    def __post_init__(self):
        if not self.author_name.strip():
            raise ValueError("author_name must be non-empty")
        if self.date_from > self.date_to:
            raise ValueError(f"date_from {self.date_from} > date_to {self.date_to}")

    def term(self) -> str:
        term = f'"{self.author_name}"[Author]'
        if self.affiliation:
            term += f' AND "{self.affiliation}"[Affiliation]'
        return term


@dataclass(frozen=True)
class FetchPolicy:
    max_requests_per_second: float | None = None
    batch_size: int = MAX_BATCH
    retries: int = 3
    backoff_seconds: float = 1.0
    api_key: str | None = None

    def __post_init__(self):
        if not 1 <= self.batch_size <= MAX_BATCH:
            raise ValueError(f"batch_size must be in [1, {MAX_BATCH}]")
        if self.max_requests_per_second is not None and self.max_requests_per_second <= 0:
            raise ValueError("max_requests_per_second must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    @classmethod
    def from_env(cls, **kwargs) -> "FetchPolicy":
        kwargs.setdefault("api_key", os.environ.get("NCBI_API_KEY") or None)
        return cls(**kwargs)

    @property
    def rate(self) -> float:
        if self.max_requests_per_second is not None:
            return self.max_requests_per_second
        return 10.0 if self.api_key else 3.0


class RateLimiter:
    """Sliding-window limiter: at most ``floor(rate)`` dispatches in any 1 s window.

    Rates below one request per second widen the window to ``1/rate`` seconds
    with a capacity of one.  ``clock`` and ``sleep`` are injectable so tests can
    drive it with a virtual clock.
    """

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.capacity = max(1, int(rate))
        self.window = 1.0 if rate >= 1 else 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._sent: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            while True:
                now = self._clock()
                while self._sent and now - self._sent[0] >= self.window:
                    self._sent.popleft()
                if len(self._sent) < self.capacity:
                    self._sent.append(now)
                    return now
                self._sleep(self._sent[0] + self.window - now)


# -- transports -----------------------------------------------------------

def fixture_key(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()


class HttpTransport:
    def __init__(self, timeout: float = 30.0, client: httpx.Client | None = None):
        self._client = client or httpx.Client(timeout=timeout, follow_redirects=True)

    def get(self, url: str) -> bytes:
        resp = self._client.get(url)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise httpx.HTTPStatusError(f"HTTP {resp.status_code}", request=resp.request,
                                        response=resp)
        resp.raise_for_status()
        return resp.content


class ReplayTransport:
    """Serves recorded responses; with ``record_from`` set, misses are fetched and saved."""

    def __init__(self, directory: str | os.PathLike, record_from: HttpTransport | None = None):
        self.directory = Path(directory)
        self.record_from = record_from

    def path_for(self, url: str) -> Path:
        return self.directory / f"{fixture_key(url)}.xml"

    def get(self, url: str) -> bytes:
        path = self.path_for(url)
        if path.exists():
            return path.read_bytes()
        if self.record_from is None:
            raise TransportError(f"no replay fixture for {url} (expected {path})")
        body = self.record_from.get(url)
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_bytes(body)
        return body


# -- client ---------------------------------------------------------------

class EutilsClient:
    def __init__(self, policy: FetchPolicy | None = None, transport=None,
                 limiter: RateLimiter | None = None, base_url: str = EUTILS_BASE,
                 sleep: Callable[[float], None] = time.sleep):
        self.policy = policy or FetchPolicy.from_env()
        self.transport = transport or HttpTransport()
        self.limiter = limiter or RateLimiter(self.policy.rate)
        self.base_url = base_url
        self._sleep = sleep

    def url(self, endpoint: str, params: dict) -> str:
        # api_key is appended at dispatch so replay fixtures stay key-independent
        return f"{self.base_url}{endpoint}?{urlencode(params)}"

    def _get(self, url: str) -> bytes:
        wire_url = url
        if self.policy.api_key:
            wire_url = f"{url}&{urlencode({'api_key': self.policy.api_key})}"
        last_exc: Exception | None = None
        for attempt in range(self.policy.retries + 1):
            self.limiter.acquire()
            try:
                if isinstance(self.transport, ReplayTransport):
                    return self.transport.get(url)
                return self.transport.get(wire_url)
            except TransportError:
                raise
            except (httpx.HTTPError, OSError) as exc:
                last_exc = exc
                log.warning("request failed (attempt %d/%d): %s", attempt + 1,
                            self.policy.retries + 1, exc)
                if attempt < self.policy.retries:
                    self._sleep(self.policy.backoff_seconds * 2 ** attempt)
        raise TransportError(f"giving up on {url}: {last_exc}") from last_exc

    def search_pmids(self, query: SearchQuery) -> list[str]:
        pmids: list[str] = []
        retstart = 0
        while True:
            params = {
                "db": "pubmed", "term": query.term(), "datetype": "pdat",
                "mindate": str(query.date_from), "maxdate": str(query.date_to),
                "retstart": str(retstart), "retmax": str(self.policy.batch_size),
            }
            count, ids = parse_esearch(self._get(self.url("esearch.fcgi", params)))
            pmids.extend(ids)
            retstart += len(ids)
            if not ids or retstart >= count:
                return pmids

    def fetch_records(self, pmids: Sequence[str]) -> "RecordBatch":
        for p in pmids:
            if not str(p).isdigit():
                raise ValueError(f"pmid must be digits only: {p!r}")
        wanted = list(dict.fromkeys(str(p) for p in pmids))
        out = RecordBatch()
        size = self.policy.batch_size
        for i in range(0, len(wanted), size):
            chunk = wanted[i:i + size]
            params = {"db": "pubmed", "id": ",".join(chunk), "retmode": "xml"}
            records = parse_efetch(self._get(self.url("efetch.fcgi", params)))
            allowed = set(chunk)
            got = set()
            for rec in records:
                if rec.pmid in allowed and rec.pmid not in got:
                    got.add(rec.pmid)
                    out.append(rec)
            out.missing.extend(p for p in chunk if p not in got)
        if out.missing:
            log.warning("%d pmid(s) absent from efetch response: %s", len(out.missing),
                        ",".join(out.missing[:10]))
        return out


class RecordBatch(list):
    """A list of records that also remembers what was missing or dropped."""

    def __init__(self, items: Iterable[PublicationRecord] = ()):
        super().__init__(items)
        self.missing: list[str] = []
        self.dropped = 0


# -- XML parsing ----------------------------------------------------------

def _pull_parse(data: bytes | str) -> ET.Element:
    """Parse with a pull parser so failures can name the open element path."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    parser = ET.XMLPullParser(events=("start", "end"))
    stack: list[str] = []
    root = None
    try:
        parser.feed(data)
        for event, elem in parser.read_events():
            if event == "start":
                stack.append(elem.tag)
                if root is None:
                    root = elem
            else:
                stack.pop()
        parser.close()
        for event, elem in parser.read_events():
            if event == "start":
                stack.append(elem.tag)
            else:
                stack.pop()
    except ET.ParseError as exc:
        raise XmlParseError(f"malformed XML: {exc}", "/".join(stack)) from exc
    if root is None:
        raise XmlParseError("empty XML document", "")
    return root


def parse_esearch(data: bytes | str) -> tuple[int, list[str]]:
    root = _pull_parse(data)
    if root.tag != "eSearchResult":
        raise EnvelopeError(f"expected eSearchResult, got {root.tag}")
    err = root.find("ERROR")
    if err is not None and (err.text or "").strip():
        raise EnvelopeError(f"esearch error: {err.text.strip()}")
    count = root.findtext("Count")
    if count is None or not count.strip().isdigit():
        # zero-hit queries still carry <Count>0</Count>
        raise EnvelopeError("esearch response lacks a numeric Count")
    ids = [el.text.strip() for el in root.iterfind("IdList/Id") if el.text and el.text.strip()]
    return int(count), ids


def _text(el: ET.Element | None) -> str:
    if el is None:
        return ""
    return " ".join("".join(el.itertext()).split())


def _year_of(article: ET.Element) -> int | None:
    pubdate = article.find("Journal/JournalIssue/PubDate")
    if pubdate is not None:
        year = pubdate.findtext("Year")
        if year and _YEAR_RE.search(year):
            return int(_YEAR_RE.search(year).group(1))
        medline = pubdate.findtext("MedlineDate")
        if medline:
            m = _YEAR_RE.match(medline.strip())
            if m:
                return int(m.group(1))
    return None


def _authors(article: ET.Element) -> list[tuple[str, str]]:
    out = []
    for author in article.iterfind("AuthorList/Author"):
        last = author.findtext("LastName")
        if last:
            fore = author.findtext("ForeName") or author.findtext("Initials") or ""
            out.append((last.strip(), fore.strip()))
        else:
            collective = author.findtext("CollectiveName")
            if collective:
                out.append((collective.strip(), ""))
    return out


def parse_article(node: ET.Element) -> PublicationRecord:
    citation = node.find("MedlineCitation")
    if citation is None:
        raise XmlParseError("PubmedArticle without MedlineCitation", "PubmedArticle")
    pmid = (citation.findtext("PMID") or "").strip()
    article = citation.find("Article")
    if article is None:
        raise XmlParseError(f"PMID {pmid}: no Article element", "PubmedArticle/MedlineCitation")
    segments = [_text(seg) for seg in article.iterfind("Abstract/AbstractText")]
    mesh = [_text(d) for d in citation.iterfind("MeshHeadingList/MeshHeading/DescriptorName")]
    return PublicationRecord(
        pmid=pmid,
        title=_text(article.find("ArticleTitle")),
        abstract=" ".join(s for s in segments if s),
        mesh_terms=tuple(m for m in mesh if m),
        authors=tuple(_authors(article)),
        year=_year_of(article),
    )


def parse_efetch(data: bytes | str) -> list[PublicationRecord]:
    root = _pull_parse(data)
    if root.tag != "PubmedArticleSet":
        raise EnvelopeError(f"expected PubmedArticleSet, got {root.tag}")
    return [parse_article(node) for node in root.iterfind("PubmedArticle")]


# -- filters --------------------------------------------------------------

def _fold(s: str) -> str:
    s = unicodedata.normalize("NFKD", s)
    s = "".join(ch for ch in s if not unicodedata.combining(ch))
    return " ".join(s.replace("-", " ").replace(".", " ").casefold().split())


def split_name(name: str) -> tuple[str, str]:
    """'Weng, Chunhua' or 'Chunhua Weng' -> ('Weng', 'Chunhua')."""
    if "," in name:
        last, fore = name.split(",", 1)
        return last.strip(), fore.strip()
    parts = name.split()
    if len(parts) == 1:
        return parts[0], ""
    return parts[-1], " ".join(parts[:-1])


def author_index(record: PublicationRecord, researcher: Researcher | str,
                 strict: bool = False) -> list[int]:
    """All positions in the author list that match the researcher's name."""
    name = researcher.name if isinstance(researcher, Researcher) else researcher
    last, fore = (_fold(x) for x in split_name(name))
    hits = []
    for i, (a_last, a_fore) in enumerate(record.authors):
        if _fold(a_last) != last:
            continue
        a_fore = _fold(a_fore)
        if strict:
            if a_fore == fore:
                hits.append(i)
        elif not fore or not a_fore or a_fore[0] == fore[0]:
            hits.append(i)
    return hits


def _position_ok(i: int, n: int, rule: AuthorshipRule) -> bool:
    if i < 3:
        return True
    if rule is AuthorshipRule.FIRST_THREE_OR_LAST_THREE:
        return i >= n - 3
    return i == n - 1


def filter_by_authorship(records: Iterable[PublicationRecord], researcher: Researcher | str,
                         rule: AuthorshipRule | str = AuthorshipRule.FIRST_THREE_OR_LAST_THREE,
                         strict: bool = False) -> list[PublicationRecord]:
    rule = AuthorshipRule(rule)
    kept = []
    for rec in records:
        hits = author_index(rec, researcher, strict=strict)
        if not hits:
            continue
        if _position_ok(hits[0], len(rec.authors), rule):
            if len(hits) > 1 and "duplicate-author" not in rec.flags:
                rec = replace(rec, flags=rec.flags + ("duplicate-author",))
            kept.append(rec)
    return kept


def filter_by_recency(records: Iterable[PublicationRecord], reference_year: int,
                      window_years: int = 10) -> RecordBatch:
    if window_years < 1:
        raise ValueError("window_years must be >= 1")
    out = RecordBatch()
    for rec in records:
        if rec.year is None:
            out.dropped += 1
        elif reference_year - rec.year < window_years:
            out.append(rec)
    if out.dropped:
        log.warning("dropped %d record(s) without a usable year", out.dropped)
    return out
