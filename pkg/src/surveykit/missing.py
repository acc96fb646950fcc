"""Reproducible deletion-mask generators (mechanisms S1-S4) and Fisher's exact test.

Each cell's deletion draw comes from a counter-style uniform keyed by
(seed, mechanism, respondent, field), so masks are order-independent and
bit-identical whether generated serially or in parallel.  Masks only ever
touch answered Block B/C cells; skip-logic absences have nothing to delete.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

from .core import stable_uniform


@dataclass
class MissingnessMask:
    mechanism: str                       # S1..S4
    seed: int
    deleted: set                         # {(respondent_id, field_name)}
    params: dict = dc_field(default_factory=dict)

    def is_deleted(self, rid, field_name):
        return (rid, field_name) in self.deleted

    def deleted_fields(self, rid):
        return {f for r, f in self.deleted if r == rid}

    def to_records(self):
        return sorted(self.deleted)


@dataclass
class MaskedDataset:
    dataset: object                      # source Dataset (unmodified)
    mask: MissingnessMask
    ground_truth: dict                   # (rid, field) -> original label

    def observed_answers(self, respondent):
        return {f: v for f, v in respondent.answers.items()
                if (respondent.id, f) not in self.mask.deleted}

    def observed_label(self, rid, field_name):
        r = self.dataset.by_id(rid)
        if (rid, field_name) in self.mask.deleted:
            return None
        return r.answers.get(field_name)

    def realized_rate(self, block=None):
        cb = self.dataset.codebook
        eligible = deleted = 0
        for r in self.dataset.respondents:
            for f, _ in r.answers.items():
                b = cb[f].block
                if b == "A" or (block is not None and b != block):
                    continue
                eligible += 1
                deleted += (r.id, f) in self.mask.deleted
        return deleted / eligible if eligible else 0.0


def _eligible_cells(dataset, blocks=("B", "C")):
    cb = dataset.codebook
    for r in dataset.respondents:
        for f in r.answers:
            if cb[f].block in blocks:
                yield r, f


def _finish(dataset, mechanism, seed, deleted, params):
    mask = MissingnessMask(mechanism, seed,
                           {(r.id, f) for r, f in deleted}, params)
    return MaskedDataset(dataset, mask, {(r.id, f): r.answers[f] for r, f in deleted})


def apply_s1(dataset, rate=0.20, seed=42) -> MaskedDataset:
    """MCAR: each answered Block B/C cell deleted independently at `rate`."""
    if not 0 < rate < 1:
        raise ValueError("rate must be in (0,1)")
    deleted = [(r, f) for r, f in _eligible_cells(dataset)
               if stable_uniform(seed, "S1", r.id, f) < rate]
    return _finish(dataset, "S1", seed, deleted, {"rate": rate})


def apply_s2(dataset, base=0.10, flag_bonus=0.20, seed=42) -> MaskedDataset:
    """MAR: deletion probability raised for low-income or minority respondents."""
    if base + flag_bonus >= 1:
        raise ValueError("base + flag_bonus must stay below 1")
    deleted = []
    for r, f in _eligible_cells(dataset):
        p = base + flag_bonus * (r.flags.low_income or r.flags.minority)
        if stable_uniform(seed, "S2", r.id, f) < p:
            deleted.append((r, f))
    return _finish(dataset, "S2", seed, deleted,
                   {"base": base, "flag_bonus": flag_bonus})


def apply_s3(dataset, base=0.10, slope=0.15, b_rate=0.10, seed=42) -> MaskedDataset:
    """MNAR: Block C deletion probability rises as true preparation scores fall.

    Block C cell probability = base + slope * (5 - mean Block C score) / 4;
    Block B is MCAR at b_rate.  Depends on the true response values.
    """
    cb = dataset.codebook
    deleted = []
    for r in dataset.respondents:
        c_scores = [r.ordinal(cb, f) for f in r.answers if cb[f].block == "C"]
        mean_c = sum(c_scores) / len(c_scores) if c_scores else 3.0
        p_c = base + slope * (5.0 - mean_c) / 4.0
        for f in r.answers:
            block = cb[f].block
            if block == "A":
                continue
            p = p_c if block == "C" else b_rate
            if stable_uniform(seed, "S3", r.id, f) < p:
                deleted.append((r, f))
    return _finish(dataset, "S3", seed, deleted,
                   {"base": base, "slope": slope, "b_rate": b_rate})


def apply_s4(dataset, nonvuln_rate=0.35, seed=42) -> MaskedDataset:
    """MNAR block-wise: full Block C deleted for compound-vulnerable respondents,
    remaining respondents' Block C deleted MCAR at nonvuln_rate; Block B untouched."""
    cb = dataset.codebook
    deleted = []
    for r in dataset.respondents:
        for f in r.answers:
            if cb[f].block != "C":
                continue
            if r.flags.compound or stable_uniform(seed, "S4", r.id, f) < nonvuln_rate:
                deleted.append((r, f))
    return _finish(dataset, "S4", seed, deleted, {"nonvuln_rate": nonvuln_rate})


MECHANISMS = {"S1": apply_s1, "S2": apply_s2, "S3": apply_s3, "S4": apply_s4}


def apply_mechanism(dataset, mechanism, seed=42, **params) -> MaskedDataset:
    try:
        fn = MECHANISMS[mechanism]
    except KeyError:
        raise ValueError(f"unknown mechanism {mechanism!r}") from None
    return fn(dataset, seed=seed, **params)


def fisher_exact_2x2(a, b, c, d) -> float:
    """Two-sided Fisher exact p for [[a, b], [c, d]] by hypergeometric enumeration.

    Sums the probabilities of all tables with the same margins whose
    probability does not exceed the observed table's.
    """
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be non-negative")
    n = a + b + c + d
    if n == 0:
        return 1.0
    r1, c1 = a + b, a + c
    denom = math.comb(n, c1)

    def prob(k):
        return Fraction(math.comb(r1, k) * math.comb(n - r1, c1 - k), denom)

    p_obs = prob(a)
    lo, hi = max(0, c1 - (n - r1)), min(r1, c1)
    total = sum((prob(k) for k in range(lo, hi + 1) if prob(k) <= p_obs),
                Fraction(0))
    return float(min(total, Fraction(1)))


def _compound_by_any_c_table(masked):
    """2x2 of (compound flag) x (respondent has any Block C deletion)."""
    cb = masked.dataset.codebook
    table = [[0, 0], [0, 0]]
    for r in masked.dataset.respondents:
        any_c = any((r.id, f) in masked.mask.deleted
                    for f in r.answers if cb[f].block == "C")
        table[0 if r.flags.compound else 1][0 if any_c else 1] += 1
    return table


def compound_by_c_cell_table(masked):
    """2x2 of (compound flag) x (deleted) over answered Block C cells.

    Cell deletions are independent draws here, so the cell-level table is the
    higher-powered association test; the respondent-level any-deletion table
    (used by mechanism_contrast) saturates for heavy block-wise mechanisms.
    """
    cb = masked.dataset.codebook
    table = [[0, 0], [0, 0]]
    for r in masked.dataset.respondents:
        row = 0 if r.flags.compound else 1
        for f in r.answers:
            if cb[f].block != "C":
                continue
            table[row][0 if (r.id, f) in masked.mask.deleted else 1] += 1
    return table


def mechanism_contrast(masked_x, masked_y):
    """Association of Block C deletion with the compound flag, per mask, plus
    a cross-mask contrast of the deletion rates themselves."""
    tx = _compound_by_any_c_table(masked_x)
    ty = _compound_by_any_c_table(masked_y)
    degenerate = []

    def fisher(table, tag):
        rows_ok = all(sum(row) for row in table)
        cols_ok = all(table[0][j] + table[1][j] for j in range(2))
        if not (rows_ok and cols_ok):
            degenerate.append(tag)
            return 1.0
        return fisher_exact_2x2(table[0][0], table[0][1], table[1][0], table[1][1])

    contrast = [[tx[0][0] + tx[1][0], tx[0][1] + tx[1][1]],
                [ty[0][0] + ty[1][0], ty[0][1] + ty[1][1]]]
    return {
        "p_x": fisher(tx, "x"),
        "p_y": fisher(ty, "y"),
        "p_contrast": fisher(contrast, "contrast"),
        "degenerate": degenerate,
    }
