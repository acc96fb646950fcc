"""Graph-grounded survey assistant: variable detection, evidence retrieval,
answer composition with numeric-grounding validation, and epistemic refusal.

Every number the assistant asserts must trace to a retrieved evidence cell;
when the evidence needed for a comparison is absent the assistant refuses and
states what additional data would be required.  A deterministic template path
provides the full behavior without any live model; a provider path, when
configured, must pass the identical grounding validator.
"""

import json
import re
from dataclasses import dataclass, field as dc_field, asdict

from .core import Codebook
from .graph import CooccurrenceGraph, crosstab, marginal

STAGE_NAMES = {
    0: "demographic persona",
    1: "routine time allocation",
    2: "time constraint (temporal response cost)",
    3: "threat appraisal",
    4: "coping appraisal",
    5: "protective behavior",
    6: "temporal impact",
}

DEFAULT_MIN_SUPPORT = 5
DEFAULT_WHITELIST = ("1 to 5", "1-5", "five-point")


@dataclass
class VariableBinding:
    question: str
    fields: list                        # canonical names, detection order
    method: str                         # provider | keyword-fallback
    notes: list = dc_field(default_factory=list)


@dataclass
class EvidenceCell:
    cell_id: str
    kind: str                           # marginal | crosstab
    fields: list
    stage_tags: list
    support_n: int
    payload: dict                       # distributions / counts / percents
    provenance: str


@dataclass
class EvidenceBundle:
    cells: list
    omissions: list = dc_field(default_factory=list)

    def by_id(self, cell_id):
        for c in self.cells:
            if c.cell_id == cell_id:
                return c
        raise KeyError(cell_id)

    def citable_values(self, min_support=DEFAULT_MIN_SUPPORT):
        """(value, cell_id, kind) triples a grounded answer may cite."""
        out = []
        for c in self.cells:
            if c.support_n < min_support:
                continue
            out.append((float(c.support_n), c.cell_id, "count"))
            if c.kind == "marginal":
                for label, pct in c.payload["percent"].items():
                    out.append((pct, c.cell_id, "percent"))
            else:
                for row in c.payload["rows"]:
                    out.append((float(row["n"]), c.cell_id, "count"))
                    for pct in row["percent"].values():
                        out.append((pct, c.cell_id, "percent"))
        return out


@dataclass
class GroundedAnswer:
    status: str                         # answered | refused
    answer_text: str
    citations: dict = dc_field(default_factory=dict)   # numeric token -> cell id
    pmt_notes: list = dc_field(default_factory=list)
    refusal_reason: str = ""
    missing_evidence: str = ""

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Variable detection
# ---------------------------------------------------------------------------

def keyword_detect(question, codebook) -> list:
    """Synonym/label scan; fields ordered by first match position."""
    q = question.lower()
    hits = {}
    for fname, spec in codebook.fields.items():
        candidates = [fname.lower().replace("_", " ")]
        candidates += [s.lower() for s in codebook.synonyms.get(fname, [])]
        candidates += [lab.lower() for lab in spec.labels if len(lab) > 6]
        best = None
        for cand in candidates:
            # Anchor the match start at a word boundary so e.g. "outage" does
            # not hit the synonym "age"; a trailing inflection ("renters") is
            # still allowed to match.
            m = re.search(r"\b" + re.escape(cand), q)
            if m and (best is None or m.start() < best):
                best = m.start()
        if best is not None:
            hits[fname] = best
    return sorted(hits, key=lambda f: (hits[f], f))


def detect_variables(question, codebook, provider=None) -> VariableBinding:
    if not question or not question.strip():
        raise ValueError("empty question")
    notes = []
    if provider is not None:
        try:
            response = provider.complete(
                "Identify which survey variables a question refers to. Reply "
                "with 'FIELDS: name1, name2' using only names from the list, "
                "or 'FIELDS: none'.",
                "Known variables: " + ", ".join(codebook.field_names())
                + f"\n\nQuestion: {question}")
            m = re.search(r"FIELDS:\s*(.+)", response)
            fields = []
            if m and m.group(1).strip().lower() != "none":
                for name in m.group(1).split(","):
                    name = name.strip()
                    if name in codebook:
                        fields.append(codebook.canonical(name))
                    else:
                        notes.append(f"provider named unknown field {name!r}; dropped")
            return VariableBinding(question, fields, "provider", notes)
        except Exception as exc:
            notes.append(f"provider detection failed ({exc}); keyword fallback")
    fields = keyword_detect(question, codebook)
    return VariableBinding(question, fields, "keyword-fallback", notes)


# ---------------------------------------------------------------------------
# Evidence retrieval
# ---------------------------------------------------------------------------

def retrieve_evidence(binding, train, codebook=None) -> EvidenceBundle:
    """Marginal per detected field; crosstab per detected pair when the two
    fields are jointly observed in the training data, else recorded omission."""
    cb = codebook or train.codebook
    cells, omissions = [], []
    for f in binding.fields:
        spec = cb[f]
        try:
            dist = marginal(train, f)
        except Exception:
            omissions.append({"kind": "marginal", "fields": [f],
                              "reason": "never observed"})
            continue
        percent = {lab: round(100.0 * p, 1)
                   for lab, p in zip(dist.levels, dist.probabilities)}
        cells.append(EvidenceCell(
            cell_id=f"m:{f}", kind="marginal", fields=[f],
            stage_tags=[f"{f} (stage {spec.pmt_stage}: {STAGE_NAMES[spec.pmt_stage]})"],
            support_n=dist.support_n,
            payload={"percent": percent},
            provenance=f"marginal({f}) over training data"))
    for i in range(len(binding.fields)):
        for j in range(i + 1, len(binding.fields)):
            fa, fb = binding.fields[i], binding.fields[j]
            xt = crosstab(train, fa, fb)
            if xt.total_n == 0:
                omissions.append({"kind": "crosstab", "fields": [fa, fb],
                                  "reason": "no joint observations in training data"})
                continue
            pct = xt.row_percentages()
            rows = []
            for ai, alab in enumerate(xt.levels_a):
                rows.append({
                    "level": alab,
                    "n": int(xt.counts[ai].sum()),
                    "percent": {blab: round(float(pct[ai, bi]), 1)
                                for bi, blab in enumerate(xt.levels_b)},
                })
            cells.append(EvidenceCell(
                cell_id=f"x:{fa}|{fb}", kind="crosstab", fields=[fa, fb],
                stage_tags=[
                    f"{fa} (stage {cb[fa].pmt_stage}: {STAGE_NAMES[cb[fa].pmt_stage]})",
                    f"{fb} (stage {cb[fb].pmt_stage}: {STAGE_NAMES[cb[fb].pmt_stage]})"],
                support_n=xt.total_n,
                payload={"rows": rows, "columns": list(xt.levels_b)},
                provenance=f"crosstab({fa}, {fb}) over training data"))
    return EvidenceBundle(cells, omissions)


# ---------------------------------------------------------------------------
# Grounding validation
# ---------------------------------------------------------------------------

NUMERIC_RE = re.compile(r"\d+(?:\.\d+)?%?")


def _strip_quoted(text):
    # Level labels are always rendered in single quotes; their embedded
    # numerals (e.g. scale anchors inside labels) are not numeric claims, and
    # neither are the stage numbers in PMT provenance tags.
    text = re.sub(r"'[^']*'", " ", text)
    return re.sub(r"stage \d", " ", text)


def validate_grounding(answer_text, bundle, min_support=DEFAULT_MIN_SUPPORT,
                       whitelist=DEFAULT_WHITELIST):
    """Every numeric token must match a citable bundle value.

    Percent tokens match within +-0.05 (one-decimal rendering); plain tokens
    match any citable count or percent value exactly to the rendered digit.
    Returns (ok, unmatched token list)."""
    text = _strip_quoted(answer_text)
    for phrase in whitelist:
        text = text.replace(phrase, " ")
    citable = bundle.citable_values(min_support)
    unmatched = []
    for token in NUMERIC_RE.findall(text):
        is_pct = token.endswith("%")
        value = float(token.rstrip("%"))
        ok = False
        for cval, _, ckind in citable:
            if is_pct and ckind == "percent" and abs(cval - value) <= 0.05:
                ok = True
                break
            if not is_pct and abs(cval - value) <= 1e-9:
                ok = True
                break
        if not ok:
            unmatched.append(token)
    return (len(unmatched) == 0), unmatched


def _cite(citations, token, cell_id):
    citations[token] = cell_id
    return token


# ---------------------------------------------------------------------------
# Answer composition
# ---------------------------------------------------------------------------

def compose_answer(question, binding, bundle, provider=None,
                   min_support=DEFAULT_MIN_SUPPORT) -> GroundedAnswer:
    if not binding.fields:
        return GroundedAnswer(
            status="refused", answer_text="",
            refusal_reason="no variables detected",
            missing_evidence="The question does not reference any survey "
                             "variable this dataset measures.")
    if provider is not None:
        answer = _provider_answer(question, bundle, provider, min_support)
        if answer is not None:
            return answer
        # fall through to refusal below via template logic? No: grounding failure
        return GroundedAnswer(
            status="refused", answer_text="",
            refusal_reason="grounding-failure",
            missing_evidence="The model's draft answers contained numeric "
                             "claims not present in the retrieved evidence.")
    return _template_answer(binding, bundle, min_support)


def _provider_answer(question, bundle, provider, min_support):
    evidence_json = json.dumps(
        [{"cell_id": c.cell_id, "kind": c.kind, "support_n": c.support_n,
          "stage_tags": c.stage_tags, "payload": c.payload} for c in bundle.cells])
    system = ("Answer survey questions using ONLY the supplied evidence cells. "
              "Quote level labels in single quotes. Every percentage or count "
              "you state must appear in the evidence. If the evidence cannot "
              "answer the question, reply exactly 'REFUSE: <what data would be "
              "needed>'.")
    for _ in range(2):
        response = provider.complete(system, f"Evidence: {evidence_json}\n\n"
                                             f"Question: {question}")
        if response.strip().startswith("REFUSE:"):
            return GroundedAnswer(
                status="refused", answer_text="",
                refusal_reason="insufficient evidence",
                missing_evidence=response.strip()[len("REFUSE:"):].strip())
        ok, unmatched = validate_grounding(response, bundle, min_support)
        if ok:
            citations = _extract_citations(response, bundle, min_support)
            notes = sorted({t for c in bundle.cells for t in c.stage_tags})
            return GroundedAnswer("answered", response, citations, notes)
        system += (" Your previous answer contained ungrounded numerics: "
                   + ", ".join(unmatched))
    return None


def _extract_citations(text, bundle, min_support):
    citations = {}
    citable = bundle.citable_values(min_support)
    for token in NUMERIC_RE.findall(_strip_quoted(text)):
        is_pct = token.endswith("%")
        value = float(token.rstrip("%"))
        for cval, cid, ckind in citable:
            if is_pct and ckind == "percent" and abs(cval - value) <= 0.05:
                citations[token] = cid
                break
            if not is_pct and abs(cval - value) <= 1e-9:
                citations[token] = cid
                break
    return citations


def _template_answer(binding, bundle, min_support):
    citations = {}
    notes = []
    parts = []
    if len(binding.fields) >= 2:
        fa, fb = binding.fields[0], binding.fields[1]
        try:
            cell = bundle.by_id(f"x:{fa}|{fb}")
        except KeyError:
            return GroundedAnswer(
                status="refused", answer_text="",
                refusal_reason="insufficient evidence",
                missing_evidence=f"No joint cross-tabulation of {fa} and {fb} "
                                 "exists in the training data; answering would "
                                 "require responses observing both items "
                                 "together.")
        rows = [r for r in cell.payload["rows"] if r["n"] > 0]
        if len(rows) < 2:
            return GroundedAnswer(
                status="refused", answer_text="",
                refusal_reason="insufficient evidence",
                missing_evidence=f"The joint data for {fa} and {fb} covers "
                                 "only one level; a comparison needs variation "
                                 f"in {fa}.")
        top, bottom = rows[-1], rows[0]
        col = cell.payload["columns"][0]
        for row, tag in ((top, "high"), (bottom, "low")):
            if row["n"] < min_support:
                parts.append(f"For '{row['level']}' the sample is below the "
                             "minimum support threshold, so no rate is reported.")
                continue
            pct = f"{row['percent'][col]}%"
            n_tok = str(row["n"])
            parts.append(
                f"Among the {_cite(citations, n_tok, cell.cell_id)} respondents "
                f"reporting '{row['level']}' on {fa}, "
                f"{_cite(citations, pct, cell.cell_id)} answered '{col}' on {fb}.")
        notes = cell.stage_tags
    else:
        f = binding.fields[0]
        try:
            cell = bundle.by_id(f"m:{f}")
        except KeyError:
            return GroundedAnswer(
                status="refused", answer_text="",
                refusal_reason="insufficient evidence",
                missing_evidence=f"No responses for {f} exist in the training data.")
        if cell.support_n < min_support:
            return GroundedAnswer(
                status="refused", answer_text="",
                refusal_reason="insufficient evidence",
                missing_evidence=f"Fewer than {min_support} responses for {f}.")
        top_label = max(cell.payload["percent"], key=cell.payload["percent"].get)
        pct = f"{cell.payload['percent'][top_label]}%"
        n_tok = str(cell.support_n)
        parts.append(
            f"Of the {_cite(citations, n_tok, cell.cell_id)} respondents who "
            f"answered {f}, the most common response was '{top_label}' at "
            f"{_cite(citations, pct, cell.cell_id)}.")
        notes = cell.stage_tags
    text = " ".join(parts)
    if notes:
        text += " (" + "; ".join(notes) + ".)"
    return GroundedAnswer("answered", text, citations, notes)


def answer_question(question, train, graph=None, provider=None,
                    detector_provider=None, min_support=DEFAULT_MIN_SUPPORT):
    binding = detect_variables(question, train.codebook, detector_provider)
    bundle = retrieve_evidence(binding, train)
    answer = compose_answer(question, binding, bundle, provider, min_support)
    return binding, bundle, answer


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------

def create_app(train, graph: CooccurrenceGraph = None, provider=None,
               min_support=DEFAULT_MIN_SUPPORT):
    """Read-only FastAPI app over an immutable graph + training dataset."""
    from fastapi import FastAPI, HTTPException, Request
    from fastapi.middleware.cors import CORSMiddleware

    app = FastAPI(title="grounded survey assistant")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    state = {"train": train, "graph": graph, "provider": provider}

    @app.get("/health")
    def health():
        if state["graph"] is None:
            raise HTTPException(status_code=503, detail="graph not loaded")
        return {"status": "ok", "graph_hash": state["graph"].content_hash()}

    @app.get("/graph/stats")
    def graph_stats():
        if state["graph"] is None:
            raise HTTPException(status_code=503, detail="graph not loaded")
        return state["graph"].stats

    @app.get("/codebook")
    def codebook_endpoint():
        cb = state["train"].codebook
        return {"version": cb.version,
                "fields": [{"name": f.name, "block": f.block, "kind": f.kind,
                            "pmt_stage": f.pmt_stage,
                            "levels": list(f.labels)} for f in cb.fields.values()]}

    @app.post("/ask")
    async def ask(request: Request):
        if state["graph"] is None:
            raise HTTPException(status_code=503, detail="graph not loaded")
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(status_code=400, detail="body must be JSON")
        question = (body or {}).get("question")
        if not question or not isinstance(question, str):
            raise HTTPException(status_code=400, detail="missing 'question'")
        binding, bundle, answer = answer_question(
            question, state["train"], state["graph"], state["provider"],
            min_support=min_support)
        return {
            "answer": answer.to_dict(),
            "binding": {"fields": binding.fields, "method": binding.method,
                        "notes": binding.notes},
            "evidence": [{"cell_id": c.cell_id, "kind": c.kind,
                          "fields": c.fields, "support_n": c.support_n,
                          "stage_tags": c.stage_tags, "payload": c.payload,
                          "insufficient": c.support_n < min_support,
                          "provenance": c.provenance} for c in bundle.cells],
            "omissions": bundle.omissions,
        }

    return app


def serve(records_path, graph_path, host="127.0.0.1", port=8000,
          provider=None, min_support=DEFAULT_MIN_SUPPORT):
    import uvicorn
    from .core import load_dataset
    train = load_dataset(records_path)
    cb = train.codebook
    graph = None
    try:
        graph = CooccurrenceGraph.from_json(open(graph_path).read(), cb)
    except FileNotFoundError:
        pass
    app = create_app(train, graph, provider, min_support)
    uvicorn.run(app, host=host, port=port)
