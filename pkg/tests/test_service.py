import json
from importlib.resources import files

import pytest
from fastapi.testclient import TestClient

from surveykit.graph import build_graph
from surveykit.service import (
    EvidenceBundle, EvidenceCell, answer_question, compose_answer, create_app,
    detect_variables, keyword_detect, retrieve_evidence, validate_grounding,
)

FIXTURES = files("surveykit.resources").joinpath("fixtures")


@pytest.fixture(scope="module")
def bank():
    return json.loads(FIXTURES.joinpath("question_bank.json").read_text())["questions"]


@pytest.fixture(scope="module")
def graph(train):
    return build_graph(train)


# -- variable detection -------------------------------------------------------

def test_keyword_detect_synonyms(codebook):
    got = keyword_detect("Did people with flexible work schedules report "
                         "less stress?", codebook)
    assert "Flex_Work" in got and "Prep_Stress" in got


def test_keyword_detect_word_boundary(codebook):
    # "outage" must not substring-match the synonym "age"
    assert "Age" not in keyword_detect("How long did the power outage last?",
                                       codebook)


def test_detect_variables_empty_raises(codebook):
    with pytest.raises(ValueError):
        detect_variables("   ", codebook)


def test_detect_variables_provider_path(codebook):
    class P:
        def complete(self, s, u, temperature=0.1):
            return "FIELDS: Prep_Stress, Bogus_Field"

    binding = detect_variables("anything", codebook, P())
    assert binding.method == "provider"
    assert binding.fields == ["Prep_Stress"]
    assert any("Bogus_Field" in n for n in binding.notes)


def test_detect_variables_provider_failure_falls_back(codebook):
    class Broken:
        def complete(self, s, u, temperature=0.1):
            raise RuntimeError("down")

    binding = detect_variables("How stressed were respondents?", codebook,
                               Broken())
    assert binding.method == "keyword-fallback"
    assert "Prep_Stress" in binding.fields


# -- evidence retrieval and grounding -----------------------------------------

def test_retrieve_evidence_shapes(train, codebook):
    binding = detect_variables("Did people with flexible work schedules "
                               "report less stress?", codebook)
    bundle = retrieve_evidence(binding, train)
    ids = {c.cell_id for c in bundle.cells}
    assert "m:Flex_Work" in ids and "m:Prep_Stress" in ids
    assert "x:Flex_Work|Prep_Stress" in ids
    xt = bundle.by_id("x:Flex_Work|Prep_Stress")
    assert xt.support_n == sum(r["n"] for r in xt.payload["rows"])
    for row in xt.payload["rows"]:
        if row["n"]:
            assert sum(row["percent"].values()) == pytest.approx(100.0, abs=0.5)


def test_validate_grounding_rejects_foreign_numeric(train, codebook):
    binding, bundle, answer = answer_question(
        "How stressed were respondents while preparing?", train)
    assert answer.status == "answered"
    ok, unmatched = validate_grounding(answer.answer_text, bundle)
    assert ok and unmatched == []
    ok, unmatched = validate_grounding(answer.answer_text + " Also 99.9% agreed.",
                                       bundle)
    assert not ok and "99.9%" in unmatched


def test_grounding_ignores_quoted_labels_and_stage_tags():
    cell = EvidenceCell("m:F", "marginal", ["F"], [], 50,
                        {"percent": {"a": 40.0, "b": 60.0}}, "p")
    bundle = EvidenceBundle([cell])
    ok, _ = validate_grounding(
        "Of the 50 respondents, 60.0% chose 'Option 3' (stage 4).", bundle)
    assert ok
    ok, unmatched = validate_grounding("60.0% of 51 respondents", bundle)
    assert not ok and unmatched == ["51"]


def test_low_support_cells_not_citable():
    cell = EvidenceCell("m:F", "marginal", ["F"], [], 3,
                        {"percent": {"a": 40.0}}, "p")
    ok, unmatched = validate_grounding("40.0%", EvidenceBundle([cell]))
    assert not ok and unmatched == ["40.0%"]


# -- answer composition -------------------------------------------------------

def test_answer_citations_cover_every_numeric(train):
    binding, bundle, answer = answer_question(
        "Did people with flexible work schedules report less stress?", train)
    assert answer.status == "answered"
    import re
    from surveykit.service import NUMERIC_RE, _strip_quoted
    tokens = NUMERIC_RE.findall(_strip_quoted(answer.answer_text))
    assert tokens, "answer should carry numeric claims"
    assert set(tokens) <= set(answer.citations)
    assert all(cid.startswith(("m:", "x:")) for cid in answer.citations.values())


def test_refusal_no_variables(train):
    binding, bundle, answer = answer_question(
        "What is the airspeed velocity of an unladen swallow?", train)
    assert answer.status == "refused"
    assert answer.refusal_reason == "no variables detected"
    assert answer.missing_evidence


def test_refusal_missing_crosstab(train, codebook):
    binding = detect_variables("Did renters feel more stress?", codebook)
    assert len(binding.fields) >= 2
    bundle = retrieve_evidence(binding, train)
    slim = EvidenceBundle([c for c in bundle.cells if c.kind == "marginal"],
                          bundle.omissions)
    answer = compose_answer("q", binding, slim)
    assert answer.status == "refused"
    assert "cross-tabulation" in answer.missing_evidence


def test_provider_answer_grounded_or_refused(train, codebook):
    class Fabricator:
        def complete(self, s, u, temperature=0.1):
            return "Exactly 77.7% of respondents were stressed."

    binding, bundle, answer = answer_question(
        "How stressed were respondents while preparing?", train,
        provider=Fabricator())
    assert answer.status == "refused"
    assert answer.refusal_reason == "grounding-failure"

    class Refuser:
        def complete(self, s, u, temperature=0.1):
            return "REFUSE: longitudinal follow-up data"

    _, _, answer = answer_question(
        "How stressed were respondents while preparing?", train,
        provider=Refuser())
    assert answer.status == "refused"
    assert "longitudinal" in answer.missing_evidence


# -- 25-question behavior suite ----------------------------------------------

def test_question_bank_has_25(bank):
    assert len(bank) == 25
    assert sum(q["expect"] == "answered" for q in bank) == 20
    assert sum(q["expect"] == "refused" for q in bank) == 5


def test_question_bank_grounding_and_refusal(train, bank):
    for q in bank:
        binding, bundle, answer = answer_question(q["question"], train)
        assert answer.status == q["expect"], q["id"]
        if answer.status == "answered":
            ok, unmatched = validate_grounding(answer.answer_text, bundle)
            assert ok, (q["id"], unmatched)
        else:
            assert answer.missing_evidence, q["id"]


# -- HTTP endpoints -----------------------------------------------------------

@pytest.fixture(scope="module")
def client(train, graph):
    return TestClient(create_app(train, graph))


def test_health_ok(client, graph):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok", "graph_hash": graph.content_hash()}


def test_health_503_without_graph(train):
    bare = TestClient(create_app(train, graph=None))
    assert bare.get("/health").status_code == 503
    assert bare.get("/graph/stats").status_code == 503
    assert bare.post("/ask", json={"question": "stress?"}).status_code == 503


def test_graph_stats(client, graph):
    r = client.get("/graph/stats")
    assert r.status_code == 200
    assert r.json() == graph.stats


def test_codebook_endpoint(client, codebook):
    r = client.get("/codebook")
    assert r.status_code == 200
    body = r.json()
    assert body["version"] == codebook.version
    assert len(body["fields"]) == len(codebook.fields)
    by_name = {f["name"]: f for f in body["fields"]}
    assert by_name["Prep_Stress"]["block"] == "C"
    assert len(by_name["Prep_Stress"]["levels"]) == 5


def test_ask_answered(client):
    r = client.post("/ask", json={
        "question": "Did people with flexible work schedules report less stress?"})
    assert r.status_code == 200
    body = r.json()
    assert body["answer"]["status"] == "answered"
    assert body["binding"]["fields"]
    assert any(c["cell_id"].startswith("x:") for c in body["evidence"])
    for c in body["evidence"]:
        assert c["insufficient"] == (c["support_n"] < 5)


def test_ask_refused(client):
    r = client.post("/ask", json={
        "question": "How many people own sandbags?"})
    assert r.status_code == 200
    body = r.json()
    assert body["answer"]["status"] == "refused"
    assert body["answer"]["missing_evidence"]


def test_ask_malformed(client):
    assert client.post("/ask", json={}).status_code == 400
    assert client.post("/ask", json={"question": 7}).status_code == 400
    assert client.post(
        "/ask", content=b"not json",
        headers={"content-type": "application/json"}).status_code == 400
