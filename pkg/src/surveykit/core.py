"""Canonical survey data model: codebook, respondents, vulnerability flags, splits.

The codebook is the schema everything else keys on.  Respondent answers are
stored as labels; ordinal values are derived through the codebook.  Cells that
are absent because of questionnaire skip logic are a distinct state from
deleted cells and are excluded from every metric denominator downstream.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources as importlib_resources
from pathlib import Path


LOW_INCOME_MAX = 45_999

# Bracket label -> upper bound in dollars (None = open-ended top bracket,
# never low-income).
INCOME_UPPER_BOUNDS = {
    "Less than $25,000": 24_999,
    "$25,000-$34,999": 34_999,
    "$35,000-$45,999": 45_999,
    "$46,000-$74,999": 74_999,
    "$75,000-$99,999": 99_999,
    "$100,000-$149,999": 149_999,
    "$150,000 or more": None,
}

RENTER_HOUSING = {"Apartment", "Mobile home"}
NO_DIFFICULTY = "No difficulties experienced"


class SchemaError(ValueError):
    """A record or definition violates the codebook schema."""


@dataclass(frozen=True)
class FieldSpec:
    name: str
    block: str                 # A, B or C
    kind: str                  # categorical | ordinal
    levels: tuple              # ordinal: ((label, ordinal), ...); categorical: (label, ...)
    pmt_stage: int
    skip_logic: bool = False

    def __post_init__(self):
        if self.block not in ("A", "B", "C"):
            raise SchemaError(f"{self.name}: block must be A/B/C, got {self.block!r}")
        if self.kind not in ("categorical", "ordinal"):
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.block == "A" and self.pmt_stage != 0:
            raise SchemaError(f"{self.name}: Block A fields carry stage 0")
        if self.block == "B" and self.pmt_stage not in (1, 2):
            raise SchemaError(f"{self.name}: Block B fields carry stage 1 or 2")
        if self.block == "C" and self.pmt_stage not in (3, 4, 5, 6):
            raise SchemaError(f"{self.name}: Block C fields carry stage 3..6")
        if self.kind == "ordinal":
            ords = [o for _, o in self.levels]
            if ords != list(range(1, len(ords) + 1)) or len(ords) > 5:
                raise SchemaError(f"{self.name}: ordinal levels must be contiguous 1..k, k<=5")

    @property
    def labels(self):
        if self.kind == "ordinal":
            return tuple(lab for lab, _ in self.levels)
        return tuple(self.levels)

    @property
    def n_levels(self):
        return len(self.levels)

    def ordinal_of(self, label):
        """Ordinal code of a label; None for categorical fields."""
        if self.kind != "ordinal":
            return None
        for lab, o in self.levels:
            if lab == label:
                return o
        raise SchemaError(f"{self.name}: label {label!r} not in codebook")

    def label_of(self, ordinal):
        for lab, o in self.levels:
            if o == ordinal:
                return lab
        raise SchemaError(f"{self.name}: ordinal {ordinal} out of range")


class Codebook:
    """Field schema plus alias table, edge-sign annex and synonym table."""

    def __init__(self, fields, aliases=None, edge_signs=None, synonyms=None, version="0"):
        self.fields = {f.name: f for f in fields}
        if len(self.fields) != len(fields):
            raise SchemaError("duplicate field names in codebook")
        self.aliases = dict(aliases or {})
        self.edge_signs = dict(edge_signs or {})
        self.synonyms = dict(synonyms or {})
        self.version = version

    @classmethod
    def from_json(cls, source) -> "Codebook":
        if isinstance(source, (str, Path)):
            data = json.loads(Path(source).read_text())
        else:
            data = json.load(source)
        fields = []
        for f in data["fields"]:
            levels = f["levels"]
            if f["kind"] == "ordinal":
                levels = tuple((lab, o) for lab, o in levels)
            else:
                levels = tuple(levels)
            fields.append(FieldSpec(f["name"], f["block"], f["kind"], levels,
                                    f["pmt_stage"], f.get("skip_logic", False)))
        return cls(fields, data.get("aliases"), data.get("edge_signs"),
                   data.get("synonyms"), data.get("version", "0"))

    @classmethod
    def default(cls) -> "Codebook":
        ref = importlib_resources.files("surveykit.resources").joinpath("codebook.json")
        with ref.open() as fh:
            return cls.from_json(fh)

    def canonical(self, name):
        """Resolve an alias to its canonical field name."""
        name = self.aliases.get(name, name)
        if name not in self.fields:
            raise SchemaError(f"unknown field {name!r}")
        return name

    def __contains__(self, name):
        return name in self.fields or name in self.aliases

    def __getitem__(self, name) -> FieldSpec:
        return self.fields[self.canonical(name)]

    def block(self, block):
        """Fields of one block in canonical order."""
        return [f for f in self.fields.values() if f.block == block]

    def target_fields(self):
        """The 16 Block B/C prediction targets in canonical order."""
        return [f for f in self.fields.values() if f.block in ("B", "C")]

    def field_names(self):
        return list(self.fields)

    def stage(self, name):
        return self[name].pmt_stage

    def content_hash(self):
        payload = json.dumps(
            {n: [f.block, f.kind, list(f.levels), f.pmt_stage, f.skip_logic]
             for n, f in self.fields.items()},
            sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass(frozen=True)
class VulnerabilityFlags:
    low_income: bool = False
    minority: bool = False
    renter: bool = False
    disabled: bool = False

    @property
    def compound(self):
        return (self.low_income + self.minority + self.renter + self.disabled) >= 2

    def count(self):
        return self.low_income + self.minority + self.renter + self.disabled


@dataclass
class Respondent:
    id: str
    answers: dict                      # canonical field -> label
    skipped: frozenset = frozenset()   # fields absent by skip logic
    flags: VulnerabilityFlags = field(default_factory=VulnerabilityFlags)

    def ordinal(self, codebook, name):
        """Ordinal value of an answered ordinal field, else None."""
        spec = codebook[name]
        label = self.answers.get(spec.name)
        if label is None:
            return None
        return spec.ordinal_of(label)


@dataclass
class Dataset:
    codebook: Codebook
    respondents: list
    provenance: str = "synthetic"      # real | synthetic

    def __len__(self):
        return len(self.respondents)

    def by_id(self, rid):
        for r in self.respondents:
            if r.id == rid:
                return r
        raise KeyError(rid)

    def validate(self):
        for i, r in enumerate(self.respondents):
            for name, label in r.answers.items():
                spec = self.codebook[name]
                if label not in spec.labels:
                    raise SchemaError(
                        f"row {i} ({r.id}): label {label!r} not valid for field {name!r}")

    def to_csv(self, path_or_buf):
        """Write records as CSV with canonical headers; skip cells are empty."""
        names = self.codebook.field_names()
        close = False
        if isinstance(path_or_buf, (str, Path)):
            fh = open(path_or_buf, "w", newline="")
            close = True
        else:
            fh = path_or_buf
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["respondent_id"] + names)
            for r in self.respondents:
                w.writerow([r.id] + [r.answers.get(n, "") for n in names])
        finally:
            if close:
                fh.close()

    def to_csv_bytes(self):
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue().encode()


def derive_flags(answers, codebook) -> VulnerabilityFlags:
    """Vulnerability flags from Block A answers.

    A missing Block A field required by a flag leaves that flag False with a
    warning rather than failing the load.
    """
    def get(name):
        v = answers.get(name)
        if v is None:
            warnings.warn(f"flag derivation: Block A field {name!r} missing; flag left False")
        return v

    income = get("Income")
    low_income = False
    if income is not None:
        upper = INCOME_UPPER_BOUNDS.get(income)
        low_income = upper is not None and upper <= LOW_INCOME_MAX
    race = get("Race")
    minority = race is not None and race != "White"
    housing = get("Housing")
    renter = housing in RENTER_HOUSING
    health = get("Health_Issue")
    disabled = health is not None and health != NO_DIFFICULTY
    return VulnerabilityFlags(low_income, minority, renter, disabled)


def _load_rows(rows, header, codebook, provenance):
    if header[0] != "respondent_id":
        raise SchemaError("first column must be respondent_id")
    canon = []
    for h in header[1:]:
        if h not in codebook:
            raise SchemaError(f"unknown field in header: {h!r}")
        canon.append(codebook.canonical(h))
    respondents = []
    for i, row in enumerate(rows):
        if not any(cell.strip() for cell in row):
            continue
        rid, cells = row[0], row[1:]
        answers, skipped = {}, set()
        for name, cell in zip(canon, cells):
            spec = codebook[name]
            cell = cell.strip()
            if cell == "":
                if spec.skip_logic:
                    skipped.add(name)
                    continue
                raise SchemaError(f"row {i} ({rid}): empty cell for non-skip field {name!r}")
            if cell not in spec.labels:
                raise SchemaError(f"row {i} ({rid}): label {cell!r} not valid for field {name!r}")
            answers[name] = cell
        flags = derive_flags(answers, codebook)
        respondents.append(Respondent(rid, answers, frozenset(skipped), flags))
    return Dataset(codebook, respondents, provenance)


def load_dataset(records_file, codebook_file=None, provenance="real") -> Dataset:
    """Load a records CSV against a codebook (default codebook if omitted)."""
    codebook = (Codebook.from_json(codebook_file) if codebook_file is not None
                else Codebook.default())
    with open(records_file, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return Dataset(codebook, [], provenance)
        return _load_rows(list(reader), header, codebook, provenance)


def stable_hash64(*parts) -> int:
    """Platform-independent 64-bit hash of the given parts."""
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def stable_uniform(*parts) -> float:
    """Deterministic uniform(0,1) draw keyed by the given parts."""
    return stable_hash64(*parts) / 2**64


def split(dataset, seed=42, ratio=0.8):
    """Deterministic train/validation partition.

    Respondents are ordered by a stable 64-bit hash of (id, seed); the first
    ceil(ratio*n) become the training set.  Stable across runs and platforms.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0,1)")
    order = sorted(dataset.respondents, key=lambda r: (stable_hash64(r.id, seed), r.id))
    n_train = math.ceil(ratio * len(order))
    train = Dataset(dataset.codebook, order[:n_train], dataset.provenance)
    val = Dataset(dataset.codebook, order[n_train:], dataset.provenance)
    return train, val


@dataclass(frozen=True)
class SubgroupDef:
    """A subgroup as a set of allowed labels per field (AND across fields)."""
    name: str
    conditions: tuple    # ((field, (label, ...)), ...)

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple((f, tuple(v)) for f, v in d["conditions"].items()))

    def matches(self, respondent, codebook):
        for fname, labels in self.conditions:
            canon = codebook.canonical(fname)   # raises on unknown field
            if respondent.answers.get(canon) not in labels:
                return False
        return True


def sample_composition(dataset, subgroup_defs):
    """Percent of respondents satisfying each subgroup definition."""
    n = len(dataset)
    out = {}
    for sg in subgroup_defs:
        count = sum(sg.matches(r, dataset.codebook) for r in dataset.respondents)
        out[sg.name] = 100.0 * count / n if n else 0.0
    return out


def load_subgroups(path):
    data = json.loads(Path(path).read_text())
    return [SubgroupDef.from_dict(d) for d in data["subgroups"]]


def load_acs_reference(path):
    """ACS reference: subgroup name -> population percent."""
    data = json.loads(Path(path).read_text())
    return {k: float(v) for k, v in data.items()}
