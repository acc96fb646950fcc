"""PMT-consistent synthetic survey generator.

Every downstream property test runs against data from this module, so the
generator's parameters double as ground truth: latent scores for Block B/C
targets are linear in upstream encoded values plus Gaussian noise, discretized
at fixed half-integer thresholds (round + clamp), with an optional Likert-scale
shift applied to compound-vulnerable respondents before discretization.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .core import Codebook, Dataset, Respondent, derive_flags

# Fields that are skipped when the controlling field takes one of the listed
# labels (questionnaire skip logic).
SKIP_RULES = {
    "Dependent_Ages": ("Caregiving", ("None",)),
    "Time_Spent_Dependents": ("Caregiving", ("None",)),
}


@dataclass
class GeneratorConfig:
    n: int
    seed: int
    marginals: dict                    # Block A field -> list of level probabilities
    cascade: dict = dc_field(default_factory=dict)   # (up, down) -> coefficient
    noise_sd: dict = dc_field(default_factory=dict)  # field -> sd (default 1.0)
    vulnerable_shift: dict = dc_field(default_factory=dict)  # Block C field -> Likert delta
    vulnerable_fraction: float = 0.38

    def validate(self, codebook):
        for name, probs in self.marginals.items():
            spec = codebook[name]
            if len(probs) != spec.n_levels:
                raise ValueError(f"marginals for {name}: expected {spec.n_levels} probs")
            if abs(sum(probs) - 1.0) > 1e-9:
                raise ValueError(f"marginals for {name} do not sum to 1")
        for (up, down), coef in self.cascade.items():
            if codebook.stage(up) >= codebook.stage(down):
                raise ValueError(f"cascade effect {up}->{down} is not stage-increasing")
        for name in self.vulnerable_shift:
            if codebook[name].block != "C":
                raise ValueError(f"vulnerable_shift targets Block C only, got {name}")

    def to_json(self):
        return json.dumps({
            "n": self.n, "seed": self.seed, "marginals": self.marginals,
            "cascade": {f"{u}->{d}": c for (u, d), c in self.cascade.items()},
            "noise_sd": self.noise_sd, "vulnerable_shift": self.vulnerable_shift,
            "vulnerable_fraction": self.vulnerable_fraction,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["cascade"] = {tuple(k.split("->")): v for k, v in d.get("cascade", {}).items()}
        return cls(**d)


def _encode(spec, label):
    """Map an answer to a centered score in [-1, 1]."""
    if spec.kind == "ordinal":
        o = spec.ordinal_of(label)
        mid = (spec.n_levels + 1) / 2
        return (o - mid) / ((spec.n_levels - 1) / 2)
    idx = spec.labels.index(label)
    if spec.n_levels == 1:
        return 0.0
    mid = (spec.n_levels - 1) / 2
    return (idx - mid) / mid


def generate(config: GeneratorConfig, codebook=None) -> Dataset:
    """Deterministic per seed; per-respondent RNG streams derive from (seed, index)."""
    codebook = codebook or Codebook.default()
    config.validate(codebook)
    incoming = {}
    for (up, down), coef in config.cascade.items():
        incoming.setdefault(codebook.canonical(down), []).append(
            (codebook.canonical(up), coef))

    targets = sorted(codebook.target_fields(), key=lambda f: (f.pmt_stage, f.name))
    respondents = []
    for i in range(config.n):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        answers, skipped = {}, set()
        # Block A from configured marginals (uniform where unspecified)
        for spec in codebook.block("A"):
            ctrl = SKIP_RULES.get(spec.name)
            if ctrl and answers.get(ctrl[0]) in ctrl[1]:
                skipped.add(spec.name)
                continue
            probs = config.marginals.get(spec.name)
            if probs is None:
                probs = [1.0 / spec.n_levels] * spec.n_levels
            answers[spec.name] = spec.labels[rng.choice(spec.n_levels, p=probs)]
        flags = derive_flags(answers, codebook)
        # Block B/C latents in stage order so upstream answers exist
        for spec in targets:
            ctrl = SKIP_RULES.get(spec.name)
            if ctrl and answers.get(ctrl[0]) in ctrl[1]:
                skipped.add(spec.name)
                continue
            latent = (spec.n_levels + 1) / 2
            for up, coef in incoming.get(spec.name, []):
                up_spec = codebook[up]
                if up in answers:
                    latent += coef * _encode(up_spec, answers[up])
            if flags.compound and spec.name in config.vulnerable_shift:
                latent += config.vulnerable_shift[spec.name]
            latent += rng.normal(0.0, config.noise_sd.get(spec.name, 1.0))
            value = int(np.clip(round(latent), 1, spec.n_levels))
            answers[spec.name] = spec.label_of(value)
        respondents.append(Respondent(f"R{i:05d}", answers, frozenset(skipped), flags))

    ds = Dataset(codebook, respondents, provenance="synthetic")
    share = sum(r.flags.compound for r in respondents) / max(1, len(respondents))
    if abs(share - config.vulnerable_fraction) > 0.05:
        warnings.warn(
            f"realized compound fraction {share:.3f} departs from target "
            f"{config.vulnerable_fraction:.2f} by more than 5pp")
    return ds


def default_config(n=1000, seed=42, **overrides) -> GeneratorConfig:
    """Shipped default: 16 Block A fields, 8+8 ordinal targets, ~38% compound."""
    marginals = {
        "Age": [0.18, 0.27, 0.24, 0.21, 0.10],
        "Gender": [0.48, 0.50, 0.02],
        "Race": [0.67, 0.17, 0.035, 0.125],
        "Hispanic": [0.85, 0.15],
        "Marital_Status": [0.52, 0.28, 0.13, 0.07],
        "Education": [0.28, 0.31, 0.27, 0.14],
        "Employment": [0.48, 0.12, 0.10, 0.10, 0.20],
        "Occupation": [0.33, 0.24, 0.18, 0.15, 0.10],
        "Income": [0.13, 0.10, 0.12, 0.24, 0.18, 0.13, 0.10],
        "Housing": [0.51, 0.27, 0.07, 0.15],
        "Household_Size": [0.22, 0.33, 0.19, 0.16, 0.10],
        "Caregiving": [0.46, 0.32, 0.12, 0.10],
        "Dependent_Ages": [0.25, 0.45, 0.15, 0.15],
        "Health_Issue": [0.73, 0.20, 0.07],
        "Hurricane_Experience": [0.22, 0.33, 0.45],
        "Residence_Years": [0.08, 0.26, 0.33, 0.33],
    }
    cascade = {
        ("Employment", "Constraint_Work"): -0.5,
        ("Household_Size", "Constraint_Household"): 0.5,
        ("Household_Size", "Time_Family"): 0.5,
        ("Age", "Flex_Work"): 0.4,
        ("Time_Scarcity", "Prep_Stress"): 0.8,
        ("Time_Scarcity", "Personal_Disruption"): 0.5,
        ("Pressure_Overwhelmed", "Prep_Stress"): 0.5,
        ("Flex_Work", "Prep_Start"): 0.6,
        ("Flex_Work", "Prep_Stress"): -0.5,
        ("Time_Sleep", "Prep_Stress"): -0.4,
        ("Aware_Time", "Prep_Start"): 0.7,
        ("Aware_Time", "Prep_Time"): 0.5,
        ("Helene_Impact", "Prep_Stress"): 0.5,
        ("Helene_Impact", "Personal_Disruption"): 0.6,
        ("Prep_Stress", "Personal_Disruption"): 0.6,
        ("Prep_Time", "Prep_Action_Time"): 0.7,
        ("Time_Family", "Time_Spent_Dependents"): 0.6,
    }
    noise_sd = {}
    # Compound-vulnerable respondents sit well below the rest of the sample on
    # every downstream Block C item; the gap is what the self-censoring (S3)
    # and block-wise (S4) mechanisms key on, so it must be large enough that
    # the deletion-by-flag association is unambiguous at n=1000.
    vulnerable_shift = {
        "Aware_Time": -1.6, "Helene_Impact": -1.2, "Prep_Stress": -1.6,
        "Prep_Time": -1.8, "Prep_Start": -1.8, "Prep_Action_Time": -1.8,
        "Personal_Disruption": -1.2, "Time_Spent_Dependents": -1.2,
    }
    cfg = GeneratorConfig(n=n, seed=seed, marginals=marginals, cascade=cascade,
                          noise_sd=noise_sd, vulnerable_shift=vulnerable_shift,
                          vulnerable_fraction=0.38)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
