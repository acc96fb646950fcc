import warnings

import numpy as np
import pytest

from surveykit import synth
from surveykit.core import Codebook
from surveykit.graph import empirical_pair_spearman


def test_generate_deterministic(codebook):
    cfg = synth.default_config(n=60, seed=9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = synth.generate(cfg, codebook)
        b = synth.generate(cfg, codebook)
    assert [r.answers for r in a.respondents] == [r.answers for r in b.respondents]


def test_generate_seed_sensitivity(codebook):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = synth.generate(synth.default_config(n=60, seed=9), codebook)
        b = synth.generate(synth.default_config(n=60, seed=10), codebook)
    assert [r.answers for r in a.respondents] != [r.answers for r in b.respondents]


def test_all_answers_valid(small_ds):
    small_ds.validate()


def test_skip_logic_consistency(small_ds):
    for r in small_ds.respondents:
        if r.answers["Caregiving"] == "None":
            assert "Dependent_Ages" in r.skipped
            assert "Time_Spent_Dependents" in r.skipped
        else:
            assert "Dependent_Ages" in r.answers
            assert "Time_Spent_Dependents" in r.answers


def test_compound_fraction_near_target(codebook):
    ds = synth.generate(synth.default_config(n=1000, seed=42), codebook)
    frac = sum(r.flags.compound for r in ds.respondents) / len(ds)
    assert abs(frac - 0.38) <= 0.05


def test_cascade_produces_declared_correlations(codebook):
    ds = synth.generate(synth.default_config(n=1000, seed=42), codebook)
    rho = empirical_pair_spearman(ds, "Time_Scarcity", "Prep_Stress")
    assert rho is not None and rho > 0.2
    rho_neg = empirical_pair_spearman(ds, "Flex_Work", "Prep_Stress")
    assert rho_neg is not None and rho_neg < 0.0


def test_vulnerable_shift_lowers_block_c(codebook):
    ds = synth.generate(synth.default_config(n=1000, seed=42), codebook)
    cb = codebook

    def mean_c(rs):
        vals = [cb[f].ordinal_of(r.answers[f]) for r in rs
                for f in r.answers if cb[f].block == "C"]
        return float(np.mean(vals))

    compound = [r for r in ds.respondents if r.flags.compound]
    rest = [r for r in ds.respondents if not r.flags.compound]
    assert mean_c(compound) < mean_c(rest) - 0.5


def test_config_validation_rejects_bad_marginals(codebook):
    cfg = synth.default_config()
    cfg.marginals["Race"] = [0.5, 0.5]
    with pytest.raises(ValueError):
        cfg.validate(codebook)


def test_config_validation_rejects_stage_decreasing_cascade(codebook):
    cfg = synth.default_config()
    cfg.cascade[("Prep_Stress", "Time_Family")] = 0.5
    with pytest.raises(ValueError):
        cfg.validate(codebook)


def test_config_validation_rejects_shift_outside_block_c(codebook):
    cfg = synth.default_config()
    cfg.vulnerable_shift["Time_Family"] = -1.0
    with pytest.raises(ValueError):
        cfg.validate(codebook)


def test_config_json_round_trip(codebook):
    cfg = synth.default_config(n=77, seed=3)
    back = synth.GeneratorConfig.from_json(cfg.to_json())
    assert back == cfg


def test_marginal_fields_follow_requested_distribution(codebook):
    ds = synth.generate(synth.default_config(n=2000, seed=1), codebook)
    probs = synth.default_config().marginals["Race"]
    for label, p in zip(codebook["Race"].labels, probs):
        frac = sum(r.answers["Race"] == label for r in ds.respondents) / len(ds)
        assert abs(frac - p) < 0.04
