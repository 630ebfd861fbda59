import time

import httpx
import pytest

from scholarprofile.corpus import PublicationRecord, Researcher
from scholarprofile.pubmed import (
    AuthorshipRule, EnvelopeError, EutilsClient, FetchPolicy, RateLimiter, ReplayTransport,
    SearchQuery, TransportError, XmlParseError, author_index, filter_by_authorship,
    filter_by_recency, fixture_key, parse_efetch, parse_esearch, split_name,
)

from conftest import FIXTURES

EUTILS = FIXTURES / "eutils"
OSEI = Researcher("r02", "Daniel K Osei", "Example University School of Medicine")


class VirtualClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.sleeps.append(seconds)
        self.now += seconds


def test_rate_limiter_sliding_window_virtual_clock():
    clock = VirtualClock()
    limiter = RateLimiter(3, clock=clock, sleep=clock.sleep)
    stamps = [limiter.acquire() for _ in range(10)]
    assert stamps == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]
    for i in range(len(stamps)):
        window = [t for t in stamps if stamps[i] <= t < stamps[i] + 1]
        assert len(window) <= 3


def test_rate_limiter_fractional_rate():
    clock = VirtualClock()
    limiter = RateLimiter(0.5, clock=clock, sleep=clock.sleep)
    assert [limiter.acquire() for _ in range(3)] == [0, 2, 4]
    with pytest.raises(ValueError):
        RateLimiter(0)


def test_rate_limiter_real_clock():
    limiter = RateLimiter(3)
    start = time.monotonic()
    for _ in range(10):
        limiter.acquire()
    assert time.monotonic() - start >= 3.0 - 0.05


def test_policy_rates_and_validation(monkeypatch):
    assert FetchPolicy().rate == 3.0
    assert FetchPolicy(api_key="k").rate == 10.0
    assert FetchPolicy(max_requests_per_second=1.5).rate == 1.5
    monkeypatch.setenv("NCBI_API_KEY", "secret")
    assert FetchPolicy.from_env().api_key == "secret"
    for bad in ({"batch_size": 0}, {"batch_size": 201}, {"retries": -1},
                {"max_requests_per_second": 0}):
        with pytest.raises(ValueError):
            FetchPolicy(**bad)


def test_search_query_validation():
    q = SearchQuery("Priya Raman", 2015, 2024, "Example Institute")
    assert q.term() == '"Priya Raman"[Author] AND "Example Institute"[Affiliation]'
    with pytest.raises(ValueError):
        SearchQuery(" ", 2015, 2024)
    with pytest.raises(ValueError):
        SearchQuery("A", 2024, 2015)


class DictTransport:
    def __init__(self, responder):
        self.responder = responder
        self.urls = []

    def get(self, url):
        self.urls.append(url)
        return self.responder(url)


def fast_client(transport, **policy):
    return EutilsClient(FetchPolicy(**policy), transport=transport,
                        limiter=RateLimiter(1e6), sleep=lambda s: None)


def test_search_paginates_437_ids():
    ids = [str(100000 + i) for i in range(437)]

    def responder(url):
        start = int(url.split("retstart=")[1].split("&")[0])
        page = ids[start:start + 200]
        body = "".join(f"<Id>{i}</Id>" for i in page)
        return f"<eSearchResult><Count>437</Count><IdList>{body}</IdList></eSearchResult>".encode()

    transport = DictTransport(responder)
    client = fast_client(transport)
    assert client.search_pmids(SearchQuery("A B", 2015, 2024)) == ids
    assert len(transport.urls) == 3


def test_fetch_batches_and_reports_missing():
    def responder(url):
        wanted = url.split("id=")[1].split("&")[0].split("%2C")
        arts = "".join(
            f"<PubmedArticle><MedlineCitation><PMID>{p}</PMID><Article><ArticleTitle>T{p}"
            "</ArticleTitle></Article></MedlineCitation></PubmedArticle>"
            for p in wanted if p != "7")
        return f"<PubmedArticleSet>{arts}</PubmedArticleSet>".encode()

    transport = DictTransport(responder)
    client = fast_client(transport, batch_size=3)
    batch = client.fetch_records(["1", "2", "3", "4", "5", "6", "7", "1"])
    assert [r.pmid for r in batch] == ["1", "2", "3", "4", "5", "6"]
    assert batch.missing == ["7"] and len(transport.urls) == 3
    with pytest.raises(ValueError, match="digits"):
        client.fetch_records(["PMC1"])


def test_retries_then_transport_error():
    calls = []

    def responder(url):
        calls.append(url)
        raise httpx.ConnectError("down")

    with pytest.raises(TransportError, match="giving up"):
        fast_client(DictTransport(responder), retries=2).search_pmids(SearchQuery("A B", 2020, 2021))
    assert len(calls) == 3


def test_retry_recovers():
    state = {"n": 0}

    def responder(url):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ReadTimeout("slow")
        return b"<eSearchResult><Count>0</Count><IdList/></eSearchResult>"

    assert fast_client(DictTransport(responder)).search_pmids(SearchQuery("A B", 2020, 2021)) == []


def test_http_transport_status_handling():
    from scholarprofile.pubmed import HttpTransport
    codes = iter([503, 200])

    def handler(request):
        return httpx.Response(next(codes), content=b"<eSearchResult><Count>0</Count></eSearchResult>")

    transport = HttpTransport(client=httpx.Client(transport=httpx.MockTransport(handler)))
    client = EutilsClient(FetchPolicy(), transport=transport, limiter=RateLimiter(1e6),
                          sleep=lambda s: None)
    assert client.search_pmids(SearchQuery("A B", 2020, 2021)) == []


def test_api_key_sent_on_wire_but_not_in_fixture_key():
    seen = []
    transport = DictTransport(lambda url: seen.append(url) or
                              b"<eSearchResult><Count>0</Count></eSearchResult>")
    client = fast_client(transport, api_key="SECRET")
    client.search_pmids(SearchQuery("A B", 2020, 2021))
    assert "api_key=SECRET" in seen[0]

    replay = ReplayTransport(EUTILS)
    keyed = EutilsClient(FetchPolicy(api_key="SECRET"), transport=replay, limiter=RateLimiter(1e6))
    q = SearchQuery("Priya Raman", 2015, 2024, "Example Institute of Public Health")
    assert len(keyed.search_pmids(q)) == 6


def test_replay_miss_and_record(tmp_path):
    replay = ReplayTransport(tmp_path)
    with pytest.raises(TransportError, match="no replay fixture"):
        replay.get("https://example.org/x")

    class Upstream:
        def get(self, url):
            return b"<body/>"

    recorder = ReplayTransport(tmp_path / "rec", record_from=Upstream())
    assert recorder.get("https://example.org/y") == b"<body/>"
    assert (tmp_path / "rec" / f"{fixture_key('https://example.org/y')}.xml").exists()


def test_truncated_xml_names_open_elements():
    data = b"<PubmedArticleSet><PubmedArticle><MedlineCitation><PMID>1</PMID><Article>"
    with pytest.raises(XmlParseError, match="PubmedArticleSet/PubmedArticle/MedlineCitation/Article"):
        parse_efetch(data)
    with pytest.raises(XmlParseError, match="no element found"):
        parse_esearch(b"")


def test_envelope_errors():
    with pytest.raises(EnvelopeError, match="eSearchResult"):
        parse_esearch(b"<Other/>")
    with pytest.raises(EnvelopeError, match="esearch error"):
        parse_esearch(b"<eSearchResult><ERROR>bad term</ERROR></eSearchResult>")
    with pytest.raises(EnvelopeError, match="Count"):
        parse_esearch(b"<eSearchResult></eSearchResult>")
    with pytest.raises(EnvelopeError, match="PubmedArticleSet"):
        parse_efetch(b"<eSearchResult/>")


def fixture_records(name, affiliation):
    client = EutilsClient(FetchPolicy(), transport=ReplayTransport(EUTILS), limiter=RateLimiter(1e6))
    ids = client.search_pmids(SearchQuery(name, 2015, 2024, affiliation))
    return client.fetch_records(ids)


def test_fixture_parse_fields():
    records = {r.pmid: r for r in fixture_records("Alice M Harper",
                                                  "Example University School of Medicine")}
    assert len(records) == 8
    # structured abstract segments are joined in order
    assert records["31000003"].abstract.startswith("Cohort discovery")
    assert records["31000003"].abstract.endswith("neoplasm cohorts.")
    assert records["31000007"].year == 2018  # MedlineDate "2018 Jan-Feb"
    assert records["31000008"].abstract == ""
    assert records["31000004"].mesh_terms == ("Confidentiality", "Natural Language Processing",
                                              "Radiology")
    assert records["31000001"].authors[0] == ("Harper", "Alice M")


def test_fixture_authorship_and_recency():
    recs = fixture_records(OSEI.name, OSEI.affiliation)
    kept = filter_by_authorship(recs, OSEI)
    pmids = {r.pmid for r in kept}
    assert "21000007" not in pmids  # Kwame Osei, different initial
    assert "21000006" in pmids  # index 7 of 10 is within the last three
    dup = next(r for r in kept if r.pmid == "21000005")
    assert "duplicate-author" in dup.flags
    recent = filter_by_recency(kept, 2024, 10)
    assert all(2024 - r.year < 10 for r in recent)


def pub(pmid, authors, year=2020):
    return PublicationRecord(pmid, "t", "", (), tuple(authors), year)


def test_authorship_positions():
    others = [(f"X{i}", "Y") for i in range(9)]
    middle = pub("1", others[:4] + [("Harper", "Alice")] + others[4:])
    senior = pub("2", others + [("Harper", "A")])
    second_last = pub("3", others[:8] + [("Harper", "Alice"), ("Z", "Q")])
    rule = AuthorshipRule.FIRST_THREE_OR_SENIOR
    assert filter_by_authorship([middle, senior, second_last], "Alice Harper") == [senior, second_last]
    assert filter_by_authorship([middle, senior, second_last], "Alice Harper", rule) == [senior]


def test_name_matching():
    assert split_name("Weng, Chunhua") == ("Weng", "Chunhua")
    assert split_name("Chunhua Weng") == ("Weng", "Chunhua")
    rec = pub("1", [("Müller", "Jörg"), ("Muller", "J"), ("Muller", "K")])
    assert author_index(rec, "Jorg Muller") == [0, 1]
    assert author_index(rec, "Jorg Muller", strict=True) == [0]


def test_recency_window_boundaries():
    recs = [pub("1", [], 2015), pub("2", [], 2014), pub("3", [], None), pub("4", [], 2024)]
    out = filter_by_recency(recs, 2024, 10)
    assert [r.pmid for r in out] == ["1", "4"] and out.dropped == 1
    with pytest.raises(ValueError):
        filter_by_recency(recs, 2024, 0)
