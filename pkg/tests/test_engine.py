import warnings

import numpy as np
import pytest

from surveykit import engine, metrics
from surveykit.engine import (
    EvidencePack, HashedEmbedder, MethodConfig, ProviderError, ReplayProvider,
    ResponseParseError, StubProvider, build_embedding_index, build_prompt,
    gower_distance, make_provider, nearest_peers, parse_response, persona_of,
    retrieve_similar, run_prediction, staged_run, vulnerability_deltas,
)
from surveykit.graph import build_graph


@pytest.fixture(scope="module")
def graph(train):
    return build_graph(train)


@pytest.fixture(scope="module")
def stub(codebook):
    return StubProvider(codebook)


def test_method_config_validation():
    with pytest.raises(ValueError):
        MethodConfig("Nope")
    with pytest.raises(ValueError):
        MethodConfig("FS", k_examples=-1)
    assert MethodConfig("ATLM").tag == "ATLM"
    assert MethodConfig("ATLM", with_deltas=False).tag == "ATLM+peers"
    assert MethodConfig("ATLM", with_peers=False).tag == "ATLM+deltas"


# -- evidence pack round trip ------------------------------------------------

def test_pack_render_parse_round_trip(graph, train, codebook):
    r = train.respondents[0]
    persona = persona_of(r, codebook)
    _, user, pack = build_prompt(MethodConfig("Marginal"), persona, graph, train)
    cond, marg, deltas = engine._parse_pack_distributions(engine._extract_pack(user))
    for d in pack.conditionals:
        assert cond[d.target_field] == pytest.approx(list(d.probabilities),
                                                     abs=5e-10)
    for d in pack.marginals:
        assert marg[d.target_field] == pytest.approx(list(d.probabilities),
                                                     abs=5e-10)
    assert deltas == {}


def test_deltas_render_with_guidance_phrase(graph, train, codebook):
    compound = next(r for r in train.respondents if r.flags.compound)
    persona = persona_of(compound, codebook)
    _, user, pack = build_prompt(MethodConfig("ATLM"), persona, graph, train)
    assert pack.deltas, "compound persona should carry deltas in this fixture"
    assert "directional guidance, not an arithmetic adjustment" in user


def test_gr_pack_has_no_marginals(graph, train, codebook):
    persona = persona_of(train.respondents[0], codebook)
    _, _, pack = build_prompt(MethodConfig("GR"), persona, graph, train)
    assert pack.marginals == [] and pack.conditionals


def test_fs_exemplars_deterministic(graph, train, codebook):
    persona = persona_of(train.respondents[0], codebook)
    _, a, _ = build_prompt(MethodConfig("FS"), persona, graph, train, seed=4)
    _, b, _ = build_prompt(MethodConfig("FS"), persona, graph, train, seed=4)
    _, c, _ = build_prompt(MethodConfig("FS"), persona, graph, train, seed=5)
    assert a == b
    assert a != c
    assert a.count("EXAMPLE ") == 5


# -- stub provider vs independent oracle -------------------------------------

def test_stub_equals_graph_expectation_oracle(graph, train, validation, codebook, stub):
    deltas = vulnerability_deltas(train)
    for r in validation.respondents:
        ps = run_prediction(MethodConfig("Marginal"), r, graph, train, stub)
        oracle = metrics.graph_expectation_predictions(graph, r, codebook)
        assert ps.answers == oracle, r.id
        ps_a = run_prediction(MethodConfig("ATLM"), r, graph, train, stub)
        oracle_a = metrics.graph_expectation_predictions(
            graph, r, codebook,
            deltas=deltas if r.flags.compound else None)
        assert ps_a.answers == oracle_a, r.id


def test_stub_without_pack_returns_midpoints(codebook, stub):
    text = stub.complete("sys", "[ANSWER-FIELDS] Prep_Stress, Time_Family")
    assert parse_response(text, codebook, ["Prep_Stress", "Time_Family"]) == \
        {"Prep_Stress": 3, "Time_Family": 3}


def test_staged_commits_condition_later_stages(graph, train, codebook, stub):
    r = train.respondents[1]
    ps = staged_run(MethodConfig("Staged"), r, graph, train, stub)
    assert set(ps.answers) == {f.name for f in codebook.target_fields()}
    # stage >= 2 prompts must contain committed stage-1 answers
    later = [u for _, u, _ in
             [(s, u, x) for s, u, x in ps.transcripts if s != "note"]
             if "[SECTION staged]" in u]
    assert later, "expected staged sections in follow-up prompts"
    assert any("committed Time_Family=" in u for u in later)


# -- parsing and repair ------------------------------------------------------

def test_parse_response_missing_field(codebook):
    with pytest.raises(ResponseParseError) as err:
        parse_response("Prep_Stress: 3", codebook, ["Prep_Stress", "Time_Family"])
    assert "Time_Family" in str(err.value)


def test_parse_response_out_of_range(codebook):
    with pytest.raises(ResponseParseError) as err:
        parse_response("Prep_Stress: 9", codebook, ["Prep_Stress"])
    assert "Prep_Stress" in str(err.value)


def test_parse_response_resolves_aliases(codebook):
    got = parse_response("Prep_TotalTime: 2", codebook, ["Prep_Time"])
    assert got == {"Prep_Time": 2}


class FlakyProvider:
    """Garbage first, valid on the repair retry."""

    def __init__(self, codebook):
        self.calls = 0
        self.codebook = codebook

    def complete(self, system_text, user_text, temperature=0.1):
        self.calls += 1
        if self.calls == 1:
            return "no structured answer here"
        targets = engine._requested_fields(user_text)
        return "\n".join(f"{t}: 2" for t in targets)


def test_repair_retry_once(graph, train, codebook):
    flaky = FlakyProvider(codebook)
    r = train.respondents[0]
    ps = run_prediction(MethodConfig("ZS"), r, graph, train, flaky)
    assert flaky.calls == 2
    assert all(v == 2 for v in ps.answers.values())
    assert "could not be parsed" in ps.transcripts[1][1]


# -- peers / deltas / retrieval ----------------------------------------------

def test_gower_hand_values(codebook, train):
    a = persona_of(train.respondents[0], codebook)
    assert gower_distance(a, a, codebook) == 0.0
    b = dict(a)
    b["Race"] = "Black" if a["Race"] != "Black" else "White"
    n_fields = len([s for s in codebook.block("A") if s.name in a])
    assert gower_distance(a, b, codebook) == pytest.approx(1.0 / n_fields)
    c = dict(a)
    age = codebook["Age"]
    c["Age"] = age.label_of(5 if age.ordinal_of(a["Age"]) != 5 else 1)
    gap = abs(age.ordinal_of(a["Age"]) - age.ordinal_of(c["Age"])) / 4
    assert gower_distance(a, c, codebook) == pytest.approx(gap / n_fields)


def test_nearest_peers_sorted_and_tie_broken(codebook, train):
    persona = persona_of(train.respondents[0], codebook)
    peers = nearest_peers(persona, train, k=5)
    ds = [gower_distance(persona, persona_of(p, codebook), codebook) for p in peers]
    assert ds == sorted(ds)
    assert peers[0].id == train.respondents[0].id   # self-distance zero
    with pytest.raises(ValueError):
        nearest_peers(persona, train, k=len(train) + 1)


def test_vulnerability_deltas_threshold(train):
    full = vulnerability_deltas(train, threshold=0.0)
    kept = vulnerability_deltas(train, threshold=0.10)
    assert set(kept) <= set(full)
    assert all(abs(d) >= 0.10 for d in kept.values())


def test_vulnerability_deltas_no_compound_warns(codebook, train):
    from surveykit.core import Dataset
    rest = Dataset(codebook, [r for r in train.respondents
                              if not r.flags.compound], "synthetic")
    with pytest.warns(UserWarning):
        assert vulnerability_deltas(rest) == {}


def test_hashed_embedder_deterministic_and_normalized():
    emb = HashedEmbedder()
    v = emb.embed(["renter low income caregiver"])[0]
    assert np.linalg.norm(v) == pytest.approx(1.0)
    assert np.array_equal(v, emb.embed(["renter low income caregiver"])[0])
    assert emb.identity == "hashed-bow"


def test_retrieve_similar_k0(codebook, train):
    index = build_embedding_index(train)
    persona = persona_of(train.respondents[0], codebook)
    assert retrieve_similar(index, persona, 0, train) == []
    got = retrieve_similar(index, persona, 3, train)
    assert len(got) == 3


# -- providers ---------------------------------------------------------------

def test_replay_provider_cache_round_trip(tmp_path, codebook, stub):
    rp = ReplayProvider(tmp_path, inner=stub)
    out1 = rp.complete("sys", "[ANSWER-FIELDS] Prep_Stress")
    rp2 = ReplayProvider(tmp_path)          # no inner; cache only
    assert rp2.complete("sys", "[ANSWER-FIELDS] Prep_Stress") == out1
    with pytest.raises(ProviderError):
        rp2.complete("sys", "[ANSWER-FIELDS] Time_Family")


def test_make_provider(tmp_path, codebook):
    assert make_provider("stub", codebook).identity == "stub"
    assert make_provider("replay", codebook, tmp_path).identity == "replay"
    with pytest.raises(ValueError):
        make_provider("nope", codebook)


def test_live_provider_requires_env(monkeypatch):
    for var in ("SURVEYKIT_PROVIDER_URL", "SURVEYKIT_MODEL", "SURVEYKIT_API_KEY"):
        monkeypatch.delenv(var, raising=False)
    with pytest.raises(ProviderError):
        engine.LiveProvider()
