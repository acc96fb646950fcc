"""Instrument audit (construct adequacy) and sample-coverage prior validation.

The audit asks a chat provider to score how well the 16 outcome items cover
nine protection-motivation constructs; the parser enforces the construct list
and rejects any item name that does not resolve through the codebook.  The
coverage prior is validated against the empirical ACS gap by Spearman rank
correlation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field as dc_field
from importlib import resources as importlib_resources

import numpy as np

from .core import SchemaError
from .graph import _average_ranks, spearman

CONSTRUCTS = (
    "Perceived Severity",
    "Perceived Vulnerability",
    "Fear Arousal",
    "Prior Experience",
    "Response Efficacy",
    "Self-Efficacy",
    "Response Cost",
    "Protection Motivation",
    "Protective Behavior",
)


class AuditParseError(ValueError):
    pass


@dataclass
class ConstructAudit:
    scores: dict                    # construct -> int 1..5
    items: dict                     # construct -> list of canonical field names
    gaps: dict = dc_field(default_factory=dict)
    redundancies: list = dc_field(default_factory=list)
    verdict: str = ""

    def to_json(self):
        return json.dumps({"scores": self.scores, "items": self.items,
                           "gaps": self.gaps, "redundancies": self.redundancies,
                           "verdict": self.verdict}, indent=2)


def load_construct_definitions():
    ref = importlib_resources.files("surveykit.resources").joinpath(
        "construct_definitions.json")
    return json.loads(ref.read_text())


def build_audit_prompt(codebook, construct_defs=None):
    construct_defs = construct_defs or load_construct_definitions()
    items = []
    for spec in codebook.target_fields():
        scale = "; ".join(f"{o}={lab}" for lab, o in spec.levels)
        items.append(f"- {spec.name} ({spec.block}): {scale}")
    defs = [f"- {name}: {construct_defs[name]}" for name in CONSTRUCTS]
    system = ("You audit survey instruments for construct coverage. "
              "Score each construct's coverage by the listed items on a 1-5 "
              "adequacy scale and map the items that measure it.")
    user = (
        "Survey outcome items:\n" + "\n".join(items) +
        "\n\nConstructs to audit:\n" + "\n".join(defs) +
        "\n\nRespond with one block per construct, in this exact format:\n"
        "CONSTRUCT: <name>\nSCORE: <1-5>\nITEMS: <comma-separated item names, "
        "or None>\nGAPS: <recommended additional items, optional>\n\n"
        "Then optionally lines 'REDUNDANCY: <text>' and finally "
        "'VERDICT: <overall assessment>'."
    )
    return system, user


def _normalize_construct(name):
    name = re.sub(r"\s*\(.*?\)\s*", "", name).strip()
    for c in CONSTRUCTS:
        if c.lower() == name.lower():
            return c
    return None


def parse_audit_response(text, codebook) -> ConstructAudit:
    scores, items, gaps, redundancies = {}, {}, {}, []
    verdict = ""
    current = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition(":")
        key = key.strip().upper()
        value = value.strip()
        if key == "CONSTRUCT":
            current = _normalize_construct(value)
            if current is None:
                raise AuditParseError(f"unknown construct: {value!r}")
        elif key == "SCORE" and current:
            try:
                score = int(value)
            except ValueError:
                raise AuditParseError(f"{current}: non-integer score {value!r}")
            if not 1 <= score <= 5:
                raise AuditParseError(f"{current}: score {score} outside 1..5")
            scores[current] = score
        elif key == "ITEMS" and current:
            names = []
            if value.lower() not in ("none", ""):
                for item in value.split(","):
                    item = item.strip()
                    if item not in codebook:
                        raise AuditParseError(
                            f"{current}: item {item!r} not in codebook")
                    names.append(codebook.canonical(item))
            items[current] = names
        elif key == "GAPS" and current:
            gaps[current] = value
        elif key == "REDUNDANCY":
            redundancies.append(value)
        elif key == "VERDICT":
            verdict = value
    missing = [c for c in CONSTRUCTS if c not in scores or c not in items]
    if missing:
        raise AuditParseError(f"missing construct: {missing[0]}")
    return ConstructAudit(scores, items, gaps, redundancies, verdict)


def audit_instrument(codebook, provider, construct_defs=None) -> ConstructAudit:
    """One structured provider call, parsed with a single repair retry."""
    system, user = build_audit_prompt(codebook, construct_defs)
    response = provider.complete(system, user)
    try:
        return parse_audit_response(response, codebook)
    except AuditParseError:
        repaired = provider.complete(
            system, user + "\n\nYour previous reply did not follow the required "
            "format. Reply again using exactly the specified block format.")
        return parse_audit_response(repaired, codebook)


# ---------------------------------------------------------------------------
# Sample-coverage prior
# ---------------------------------------------------------------------------

@dataclass
class GapRow:
    subgroup: str
    sample_pct: float
    reference_pct: float
    gap: float                      # reference - sample, percentage points
    empirical_rank: float           # 1 = most under-represented


@dataclass
class GapReport:
    rows: list

    def ranks(self):
        return {r.subgroup: r.empirical_rank for r in self.rows}

    def to_json(self):
        return json.dumps([r.__dict__ for r in self.rows], indent=2)


def compute_gap(sample_composition, acs_reference) -> GapReport:
    """Gap = reference percent minus sample percent; rank 1 = largest gap
    (most under-represented), ties averaged."""
    if set(sample_composition) != set(acs_reference):
        missing = set(sample_composition) ^ set(acs_reference)
        raise SchemaError(f"subgroup keys do not align: {sorted(missing)}")
    names = sorted(sample_composition)
    gaps = np.array([acs_reference[n] - sample_composition[n] for n in names])
    ranks = _average_ranks(-gaps)   # descending gap
    rows = [GapRow(n, float(sample_composition[n]), float(acs_reference[n]),
                   float(g), float(rk))
            for n, g, rk in zip(names, gaps, ranks)]
    rows.sort(key=lambda r: r.empirical_rank)
    return GapReport(rows)


def validate_prior(prior_ranks, gap_report, threshold=0.5, divergence=3):
    """Spearman between a prior subgroup ranking and the empirical gap ranking.

    Returns (rho, validated, divergence flags); divergences of `divergence`
    or more rank places are emitted as recruitment-attention flags."""
    emp = gap_report.ranks()
    if set(prior_ranks) != set(emp):
        raise SchemaError("prior and gap report cover different subgroups")
    names = sorted(emp)
    rho = spearman([prior_ranks[n] for n in names], [emp[n] for n in names])
    flags = [{"subgroup": n, "prior_rank": prior_ranks[n],
              "empirical_rank": emp[n],
              "rank_diff": prior_ranks[n] - emp[n]}
             for n in names if abs(prior_ranks[n] - emp[n]) >= divergence]
    flags.sort(key=lambda f: -abs(f["rank_diff"]))
    validated = rho is not None and rho > threshold
    return rho, validated, flags
