import json
import os
import threading

import httpx
import pytest

from scholarprofile.corpus import PublicationRecord, Researcher, TokenizedDoc, Variant
from scholarprofile.divergence import MeshVocabulary, load_mesh_vocabulary
from scholarprofile.profiles import (
    BudgetExceededError, EmptyCompletionError, HttpChatProvider, MeshSplit, MockProvider,
    OneShotExample, PromptPlan, PromptStage, ProviderError, RecordingProvider, StageError,
    Strategy, TranscriptProvider, build_abstract_plan, build_mesh_plan, build_paraphrase_plan,
    categorize_mesh_terms, estimate_tokens, load_provider, load_template, pack_batches,
    paraphrase, ranked_mesh_terms, render, request_hash, run_plan, source_section,
)
from scholarprofile.topics import fit_lda

from conftest import FIXTURES

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")
RAMAN = Researcher("r03", "Priya Raman", "Example Institute of Public Health")
CREATED = "2024-06-01T00:00:00Z"


@pytest.fixture(scope="module")
def example():
    return OneShotExample.load(FIXTURES / "example.json")


@pytest.fixture(scope="module")
def vocab():
    return load_mesh_vocabulary(FIXTURES / "mesh" / "desc_subset.xml")


def pubs(n=6):
    topics = ["air pollution asthma children", "heat mortality climate",
              "wildfire smoke respiratory"]
    return [PublicationRecord(str(100 + i), f"Title {i}", f"Abstract about {topics[i % 3]} {i}.",
                              ("Asthma", "Air Pollution") if i % 2 else ("Mortality",),
                              (("Raman", "Priya"),), 2015 + i) for i in range(n)]


def check_golden(name, payload):
    path = os.path.join(GOLDEN, name)
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if os.environ.get("UPDATE_GOLDEN"):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    with open(path, encoding="utf-8") as fh:
        assert fh.read() == text


def test_render_rules():
    assert render("{{A}} and {{STAGE_2}}", {"A": "x"}) == "x and {{STAGE_2}}"
    with pytest.raises(KeyError, match="B"):
        render("{{B}}", {})
    assert source_section("head\n=== SOURCE ===\nbody\n=== END SOURCE ===") == "body"
    assert source_section("no markers") == "no markers"


def test_estimate_tokens():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcde") == 2
    assert estimate_tokens("é" * 4) == 2


def test_ranked_and_categorized_terms(vocab):
    terms = ranked_mesh_terms(pubs())
    assert terms == ["Air Pollution", "Asthma", "Mortality"]  # 3 each; ties alphabetical
    split = categorize_mesh_terms(["Asthma", "Cohort Studies", "Deep Learning", "asthma",
                                   "Unknown Thing"], vocab)
    # the first listed tree number decides: Deep Learning is G17 before L01
    assert split.health_terms == ("Asthma", "Deep Learning")
    assert split.methodology_terms == ("Cohort Studies",)
    assert split.unassigned == ("Unknown Thing",)
    routed = categorize_mesh_terms(["Unknown Thing"], vocab, fallback=lambda t: "methodology")
    assert routed.methodology_terms == ("Unknown Thing",)


def test_mesh_plan_golden(example, vocab):
    split = categorize_mesh_terms(["Air Pollution", "Asthma", "Cohort Studies", "Particulate Matter"],
                                  vocab)
    plan = build_mesh_plan(RAMAN, split, example)
    assert len(plan.stages) == 1 and plan.strategy is Strategy.MESH
    check_golden("mesh_plan_r03.json", plan.to_json())
    with pytest.raises(ValueError, match="no MeSH terms"):
        build_mesh_plan(RAMAN, MeshSplit(), example)
    with pytest.raises(BudgetExceededError):
        build_mesh_plan(RAMAN, split, example, budget=50)


def test_paraphrase_plan_golden():
    plan = build_paraphrase_plan(RAMAN, "Dr. Raman studies air pollution.")
    check_golden("paraphrase_plan_r03.json", plan.to_json())
    with pytest.raises(ValueError, match="no human-written profile"):
        build_paraphrase_plan(RAMAN)


def abstract_plan(example, budget, n=6):
    docs = pubs(n)
    lda = fit_lda([TokenizedDoc(tuple(d.abstract.lower().split())) for d in docs], K=3,
                  iterations=20, seed=0)
    return build_abstract_plan(RAMAN, docs, lda, example, budget=budget)


def test_abstract_plan_golden(example):
    plan = abstract_plan(example, 128_000)
    assert plan.stages[-1].label == "profile"
    assert plan.stages[-1].dependencies() == list(range(1, len(plan.stages)))
    check_golden("abstract_plan_r03.json", plan.to_json())


def test_abstract_plan_small_budget_adds_merge_levels(example):
    plan = abstract_plan(example, 1150, n=12)
    labels = [s.label for s in plan.stages]
    assert any(l.startswith("merge.") for l in labels)
    for i, stage in enumerate(plan.stages, 1):
        assert all(d < i for d in stage.dependencies())
    referenced = [d for s in plan.stages for d in s.dependencies()]
    assert sorted(referenced) == list(range(1, len(plan.stages)))  # each output used once


def test_abstract_plan_budget_too_small(example):
    with pytest.raises(BudgetExceededError):
        abstract_plan(example, 300)


def test_plan_rejects_forward_references():
    with pytest.raises(ValueError, match="does not precede"):
        PromptPlan(Strategy.ABSTRACT, "r", (PromptStage("s", "{{STAGE_1}}", 10),))


def test_pack_batches():
    assert pack_batches(["a", "b", "c"], lambda b: len(b) <= 2) == [["a", "b"], ["c"]]
    assert pack_batches([], lambda b: True) == []


def test_run_plan_splices_outputs_in_order(example):
    plan = abstract_plan(example, 128_000)
    mock = MockProvider("numbered")
    doc = run_plan(mock, plan, created_at=CREATED)
    n = len(plan.stages)
    assert doc.text == f"call {n}" and doc.variant is Variant.ABSTRACT
    final_user = mock.calls[-1][1]
    for k in range(1, n):
        assert f"call {k}" in final_user


def test_mock_provider_is_deterministic(example):
    plan = abstract_plan(example, 128_000)
    a = run_plan(MockProvider(), plan, created_at=CREATED)
    b = run_plan(MockProvider(), plan, created_at=CREATED)
    assert a == b and "asthma" in a.text.lower()


def test_stage_errors_are_typed():
    plan = build_paraphrase_plan(RAMAN, "Some profile.")
    with pytest.raises(StageError) as info:
        run_plan(MockProvider("echo", text="   "), plan)
    assert info.value.stage == 1 and isinstance(info.value.cause, EmptyCompletionError)
    with pytest.raises(StageError):
        run_plan(MockProvider(context_limit_tokens=10), plan)


class SlowConcurrent:
    context_limit_tokens = 128_000
    concurrency = 4

    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()
        self.barrier = threading.Barrier(2, timeout=2)

    def complete(self, system_text, user_text, max_output_tokens):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        try:
            if "{{" not in user_text and "=== SOURCE ===" in user_text and "call" not in user_text:
                try:
                    self.barrier.wait()
                except threading.BrokenBarrierError:
                    pass
        finally:
            with self.lock:
                self.active -= 1
        return "call"


def test_condense_stages_run_concurrently(example):
    plan = abstract_plan(example, 128_000)
    provider = SlowConcurrent()
    run_plan(provider, plan)
    assert provider.peak >= 2


def test_transcript_and_recording(tmp_path):
    path = tmp_path / "t.jsonl"
    recorder = RecordingProvider(MockProvider("echo", text="A profile."), path)
    plan = build_paraphrase_plan(RAMAN, "Original.")
    first = run_plan(recorder, plan, created_at=CREATED)
    replay = TranscriptProvider(path)
    assert run_plan(replay, plan, created_at=CREATED) == first
    with pytest.raises(ProviderError, match="no transcript entry"):
        replay.complete("s", "u", 1)
    assert len(request_hash("s", "u", 1)) == 64


def test_load_provider(tmp_path):
    assert isinstance(load_provider(FIXTURES / "mock_provider.json"), MockProvider)
    cfg = tmp_path / "p.json"
    cfg.write_text(json.dumps({"kind": "http-chat", "endpoint": "http://x", "model": "m"}))
    assert isinstance(load_provider(cfg), HttpChatProvider)
    cfg.write_text(json.dumps({"kind": "nope"}))
    with pytest.raises(ValueError, match="unknown provider kind"):
        load_provider(cfg)


def test_http_chat_provider():
    def handler(request):
        body = json.loads(request.content)
        assert body["messages"][0]["role"] == "system" and body["max_tokens"] == 5
        return httpx.Response(200, json={"choices": [{"message": {"content": "hi"}}]})
    ok = HttpChatProvider("http://x", "m", client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert ok.complete("s", "u", 5) == "hi"
    bad = HttpChatProvider("http://x", "m", client=httpx.Client(
        transport=httpx.MockTransport(lambda r: httpx.Response(200, json={}))))
    with pytest.raises(ProviderError, match="shape"):
        bad.complete("s", "u", 5)
    down = HttpChatProvider("http://x", "m", client=httpx.Client(
        transport=httpx.MockTransport(lambda r: httpx.Response(500))))
    with pytest.raises(ProviderError, match="endpoint error"):
        down.complete("s", "u", 5)


def test_paraphrase_helper():
    doc = paraphrase(MockProvider("identity"), "Dr. Raman studies heat.", "r03", created_at=CREATED)
    assert doc.text == "Dr. Raman studies heat." and doc.variant is Variant.PARAPHRASE
    with pytest.raises(ValueError):
        paraphrase(MockProvider(), "  ")


def test_templates_load():
    assert "{{SOURCE}}" in load_template("mesh_user")
    with pytest.raises(FileNotFoundError):
        load_template("mesh_user", version="v999")
