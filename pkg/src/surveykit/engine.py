"""Prompt configurations, evidence assembly, and the chat-provider contract.

Seven method kinds are supported: ZS, FS, ER, GR, Staged, Marginal, ATLM and
VE.  Evidence is carried in a machine-delimited pack embedded in the user
prompt; the deterministic stub provider answers by parsing the pack and
returning rounded conditional expectations, which makes every configuration
testable end-to-end with no live model.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .core import stable_hash64
from .graph import ConditionalDistribution

PACK_OPEN = "<<EVIDENCE-PACK v1>>"
PACK_CLOSE = "<<END EVIDENCE-PACK>>"

STAGE_ORDER = (1, 2, 3, 4, 5, 6)


class ResponseParseError(ValueError):
    pass


class ProviderError(RuntimeError):
    pass


@dataclass
class MethodConfig:
    kind: str                       # ZS | FS | ER | GR | Staged | Marginal | ATLM | VE
    k_examples: int = 5
    k_retrieval: int = 5
    k_peers: int = 5
    delta_threshold: float = 0.10
    graph_variant: str = "full"     # full | validated
    with_peers: bool = True         # ATLM ablation toggles
    with_deltas: bool = True

    def __post_init__(self):
        if self.kind not in ("ZS", "FS", "ER", "GR", "Staged", "Marginal", "ATLM", "VE"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if min(self.k_examples, self.k_retrieval, self.k_peers) < 0:
            raise ValueError("k parameters must be non-negative")
        if self.delta_threshold < 0:
            raise ValueError("delta_threshold must be >= 0")

    @property
    def tag(self):
        if self.kind == "ATLM" and not (self.with_peers and self.with_deltas):
            suffix = {(True, False): "+peers", (False, True): "+deltas",
                      (False, False): "-bare"}[(self.with_peers, self.with_deltas)]
            return f"ATLM{suffix}"
        return self.kind


@dataclass
class EvidencePack:
    """Ordered, machine-delimited prompt sections.

    Every numeric in the pack is a graph query result or training statistic.
    """
    persona: dict                           # field -> label
    marginals: list = dc_field(default_factory=list)       # ConditionalDistribution
    conditionals: list = dc_field(default_factory=list)    # ConditionalDistribution
    peers: list = dc_field(default_factory=list)           # (id, persona, targets)
    deltas: dict = dc_field(default_factory=dict)          # field -> delta
    staged: dict = dc_field(default_factory=dict)          # field -> committed ordinal

    def render(self):
        lines = [PACK_OPEN, "[SECTION persona]"]
        for f, v in self.persona.items():
            lines.append(f"{f}: {v}")
        if self.marginals:
            lines.append("[SECTION marginals]")
            for d in self.marginals:
                probs = ",".join(f"{p:.9f}" for p in d.probabilities)
                lines.append(f"{d.target_field} | n={d.support_n} | probs={probs}")
        if self.conditionals:
            lines.append("[SECTION conditionals]")
            for d in self.conditionals:
                src = ";".join(f"{f}={v}" for f, v in d.sources_used) or "none"
                probs = ",".join(f"{p:.9f}" for p in d.probabilities)
                flag = " | fallback=marginal" if d.fallback else ""
                lines.append(f"{d.target_field} | sources={src} | n={d.support_n} "
                             f"| probs={probs}{flag}")
        if self.peers:
            lines.append("[SECTION peers]")
            for rid, persona, targets in self.peers:
                pa = "; ".join(f"{f}={v}" for f, v in persona.items())
                ta = "; ".join(f"{f}={v}" for f, v in targets.items())
                lines.append(f"PEER {rid} | {pa} | answers: {ta}")
        if self.deltas:
            lines.append("[SECTION deltas]")
            for f, d in self.deltas.items():
                lines.append(
                    f"{f}: {d:+.4f} | compound-vulnerable training respondents average "
                    f"this far from the full sample; treat as directional guidance, "
                    f"not an arithmetic adjustment")
        if self.staged:
            lines.append("[SECTION staged]")
            for f, v in self.staged.items():
                lines.append(f"committed {f}={v}")
        lines.append(PACK_CLOSE)
        return "\n".join(lines)


@dataclass
class PredictionSet:
    respondent_id: str
    answers: dict                   # 16 target fields -> ordinal int
    method: str
    transcripts: list = dc_field(default_factory=list)   # (system, user, response)


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------

class StubProvider:
    """Deterministic oracle: answers are rounded conditional expectations
    from the prompt's evidence pack, shifted by any listed delta and clamped.
    Prompts without a pack get the scale midpoint for every field."""

    identity = "stub"

    def __init__(self, codebook):
        self.codebook = codebook

    def complete(self, system_text, user_text, temperature=0.1):
        targets = _requested_fields(user_text) or [f.name for f in
                                                   self.codebook.target_fields()]
        pack = _extract_pack(user_text)
        answers = {}
        if pack is None:
            for t in targets:
                answers[t] = 3
        else:
            cond, marg, deltas = _parse_pack_distributions(pack)
            for t in targets:
                probs = cond.get(t) or marg.get(t)
                spec = self.codebook[t]
                if probs is None:
                    answers[t] = round((spec.n_levels + 1) / 2)
                    continue
                exp = sum((i + 1) * p for i, p in enumerate(probs))
                exp += deltas.get(t, 0.0)
                answers[t] = int(min(max(round(exp), 1), spec.n_levels))
        return "\n".join(f"{t}: {answers[t]}" for t in targets)


def _extract_pack(text):
    i = text.find(PACK_OPEN)
    j = text.find(PACK_CLOSE)
    if i == -1 or j == -1:
        return None
    return text[i:j]


def _parse_pack_distributions(pack_text):
    cond, marg, deltas = {}, {}, {}
    section = None
    for line in pack_text.splitlines():
        line = line.strip()
        m = re.match(r"\[SECTION (\w+)\]", line)
        if m:
            section = m.group(1)
            continue
        if section in ("marginals", "conditionals") and "probs=" in line:
            fname = line.split("|")[0].strip()
            probs = [float(p) for p in line.split("probs=")[1].split("|")[0].split(",")]
            (cond if section == "conditionals" else marg)[fname] = probs
        elif section == "deltas" and ":" in line:
            fname, rest = line.split(":", 1)
            deltas[fname.strip()] = float(rest.strip().split("|")[0].strip())
    return cond, marg, deltas


def _requested_fields(user_text):
    m = re.search(r"\[ANSWER-FIELDS\]\s*(.+)", user_text)
    if not m:
        return None
    return [f.strip() for f in m.group(1).split(",") if f.strip()]


class ReplayProvider:
    """Content-addressed record/replay cache around an optional inner provider."""

    identity = "replay"

    def __init__(self, cache_dir, inner=None):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.inner = inner

    @staticmethod
    def request_key(system_text, user_text, temperature):
        payload = json.dumps({"system": system_text, "user": user_text,
                              "temperature": temperature}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def complete(self, system_text, user_text, temperature=0.1):
        key = self.request_key(system_text, user_text, temperature)
        path = self.cache_dir / f"{key}.json"
        if path.exists():
            return json.loads(path.read_text())["response"]
        if self.inner is None:
            raise ProviderError(f"no cached response for request {key[:12]} "
                                "and no inner provider configured")
        response = self.inner.complete(system_text, user_text, temperature)
        path.write_text(json.dumps({
            "request": {"system": system_text, "user": user_text,
                        "temperature": temperature},
            "response": response}, indent=1))
        return response


class LiveProvider:
    """HTTP chat backend configured from the environment.

    SURVEYKIT_PROVIDER_URL, SURVEYKIT_MODEL and SURVEYKIT_API_KEY must be set.
    Wrap in a ReplayProvider to make benchmark runs replayable.
    """

    identity = "live"

    def __init__(self, url=None, model=None, api_key=None, timeout=120.0):
        self.url = url or os.environ.get("SURVEYKIT_PROVIDER_URL")
        self.model = model or os.environ.get("SURVEYKIT_MODEL")
        self.api_key = api_key or os.environ.get("SURVEYKIT_API_KEY")
        self.timeout = timeout
        if not (self.url and self.model and self.api_key):
            raise ProviderError("live provider needs SURVEYKIT_PROVIDER_URL, "
                                "SURVEYKIT_MODEL and SURVEYKIT_API_KEY")

    def complete(self, system_text, user_text, temperature=0.1):
        import httpx
        payload = {
            "model": self.model,
            "max_tokens": 2048,
            "temperature": temperature,
            "system": system_text,
            "messages": [{"role": "user", "content": user_text}],
        }
        resp = httpx.post(self.url, json=payload, timeout=self.timeout,
                          headers={"x-api-key": self.api_key,
                                   "anthropic-version": "2023-06-01"})
        if resp.status_code != 200:
            raise ProviderError(f"provider returned {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        return data["content"][0]["text"]


def make_provider(name, codebook, cache_dir=None):
    if name == "stub":
        return StubProvider(codebook)
    if name == "replay":
        return ReplayProvider(cache_dir or ".replay-cache")
    if name == "live":
        return ReplayProvider(cache_dir or ".replay-cache", inner=LiveProvider())
    raise ValueError(f"unknown provider {name!r}")


# ---------------------------------------------------------------------------
# Evidence assembly
# ---------------------------------------------------------------------------

def persona_of(respondent, codebook):
    """Block A answers in canonical order."""
    return {f.name: respondent.answers[f.name] for f in codebook.block("A")
            if f.name in respondent.answers}


def persona_text(persona):
    return "\n".join(f"{f}: {v}" for f, v in persona.items())


def gower_distance(persona_a, persona_b, codebook):
    """Equal-weight Gower distance over Block A: categorical mismatch 1,
    ordinal absolute difference over range."""
    total = count = 0.0
    for spec in codebook.block("A"):
        va, vb = persona_a.get(spec.name), persona_b.get(spec.name)
        if va is None or vb is None:
            continue
        count += 1
        if spec.kind == "ordinal":
            total += abs(spec.ordinal_of(va) - spec.ordinal_of(vb)) / (spec.n_levels - 1)
        else:
            total += 0.0 if va == vb else 1.0
    return total / count if count else 0.0


def nearest_peers(persona, train, k=5):
    """k nearest training respondents by Gower distance; ties broken by id."""
    cb = train.codebook
    if k > len(train):
        raise ValueError("k exceeds training size")
    scored = sorted(
        ((gower_distance(persona, persona_of(r, cb), cb), r.id, r)
         for r in train.respondents),
        key=lambda t: (t[0], t[1]))
    return [r for _, _, r in scored[:k]]


def vulnerability_deltas(train, threshold=0.10):
    """Per target field: mean(compound) - mean(all), kept when |delta| >= threshold."""
    cb = train.codebook
    compound = [r for r in train.respondents if r.flags.compound]
    if not compound:
        warnings.warn("no compound-vulnerable respondents in training data")
        return {}
    out = {}
    for spec in cb.target_fields():
        all_vals = [r.ordinal(cb, spec.name) for r in train.respondents
                    if spec.name in r.answers]
        cmp_vals = [r.ordinal(cb, spec.name) for r in compound
                    if spec.name in r.answers]
        if not all_vals or not cmp_vals:
            continue
        delta = float(np.mean(cmp_vals) - np.mean(all_vals))
        if abs(delta) >= threshold:
            out[spec.name] = delta
    return out


class HashedEmbedder:
    """Deterministic fallback embedder: hashed bag-of-tokens, L2-normalized.

    Not equivalent to a pretrained sentence encoder; declared as such wherever
    its similarities are reported.
    """

    identity = "hashed-bow"

    def __init__(self, dim=256):
        self.dim = dim

    def embed(self, texts):
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for tok in re.findall(r"[a-z0-9$]+", text.lower()):
                out[i, stable_hash64("tok", tok) % self.dim] += 1.0
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


@dataclass
class EmbeddingIndex:
    ids: list
    vectors: np.ndarray
    embedder: object


def build_embedding_index(train, embedder=None) -> EmbeddingIndex:
    embedder = embedder or HashedEmbedder()
    cb = train.codebook
    texts = [persona_text(persona_of(r, cb)) for r in train.respondents]
    try:
        vectors = embedder.embed(texts)
    except Exception as exc:
        raise ProviderError(f"embedder {getattr(embedder, 'identity', '?')} failed: {exc}")
    return EmbeddingIndex([r.id for r in train.respondents], np.asarray(vectors), embedder)


def retrieve_similar(index, persona, k, train):
    if k == 0:
        return []
    q = np.asarray(index.embedder.embed([persona_text(persona)]))[0]
    qn = np.linalg.norm(q)
    sims = index.vectors @ (q / qn if qn else q)
    order = sorted(range(len(index.ids)), key=lambda i: (-sims[i], index.ids[i]))
    picked = [index.ids[i] for i in order[:k]]
    return [train.by_id(rid) for rid in picked]


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

SYSTEM_TEXT = (
    "You simulate survey answers for hurricane-preparedness research. "
    "Given a respondent profile and any supplied evidence, answer every listed "
    "survey field with a single integer on its ordinal scale. Respond with one "
    "line per field, formatted exactly as 'Field: <integer>'. No prose."
)


def _question_schema(codebook, targets):
    lines = ["Survey fields to answer (integer scales):"]
    for t in targets:
        spec = codebook[t]
        scale = "; ".join(f"{o}={lab}" for lab, o in spec.levels)
        lines.append(f"- {t} (1..{spec.n_levels}): {scale}")
    return "\n".join(lines)


def build_prompt(config, persona, graph, train, seed=42, targets=None,
                 committed=None):
    """Deterministic (config, persona, graph, train, seed) -> prompt + pack."""
    cb = train.codebook
    targets = targets or [f.name for f in cb.target_fields()]
    pack = None
    sections = [f"Respondent profile:\n{persona_text(persona)}"]

    evidence = dict(persona)
    if committed:
        evidence.update({f: cb[f].label_of(v) for f, v in committed.items()})

    if config.kind == "FS":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
        idx = rng.choice(len(train), size=min(config.k_examples, len(train)),
                         replace=False)
        lines = ["Example training respondents (complete answers):"]
        for i in sorted(idx):
            r = train.respondents[i]
            lines.append("EXAMPLE " + "; ".join(f"{f}={v}" for f, v in r.answers.items()))
        sections.append("\n".join(lines))
    elif config.kind == "ER":
        index = build_embedding_index(train)
        peers = retrieve_similar(index, persona, config.k_retrieval, train)
        if not peers:
            sections.append("Retrieval returned no narratives (degenerates to "
                            "zero-shot).")
        else:
            lines = ["Retrieved similar training respondents:"]
            for r in peers:
                lines.append("NARRATIVE " + "; ".join(f"{f}={v}"
                                                      for f, v in r.answers.items()))
            sections.append("\n".join(lines))
    elif config.kind in ("GR", "Marginal", "ATLM", "VE", "Staged"):
        pack = EvidencePack(persona=dict(persona))
        if config.kind != "GR":
            pack.marginals = [graph.marginal(t) for t in targets]
        pack.conditionals = [graph.conditional(t, evidence) for t in targets]
        if committed:
            pack.staged = dict(committed)
        if config.kind == "ATLM":
            if config.with_peers:
                pack.peers = [
                    (r.id, persona_of(r, cb),
                     {t: r.answers[t] for t in targets if t in r.answers})
                    for r in nearest_peers(persona, train, config.k_peers)]
            compound = derive_compound(persona, cb)
            if config.with_deltas and compound:
                pack.deltas = {f: d for f, d in
                               vulnerability_deltas(train, config.delta_threshold).items()
                               if f in targets}
        sections.append(pack.render())

    sections.append(_question_schema(cb, targets))
    sections.append("[ANSWER-FIELDS] " + ", ".join(targets))
    return SYSTEM_TEXT, "\n\n".join(sections), pack


def derive_compound(persona, codebook):
    from .core import derive_flags
    import warnings as _w
    with _w.catch_warnings():
        _w.simplefilter("ignore")
        return derive_flags(persona, codebook).compound


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

ANSWER_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*:\s*(-?\d+)\s*$")

REPAIR_TEXT = ("\n\nYour previous reply could not be parsed. Reply again with "
               "exactly one line per field in the form 'Field: <integer>'.")


def parse_response(text, codebook, targets):
    answers = {}
    for line in text.splitlines():
        m = ANSWER_RE.match(line)
        if not m:
            continue
        name, value = m.group(1), int(m.group(2))
        if name not in codebook:
            continue
        name = codebook.canonical(name)
        if name in targets:
            answers[name] = value
    missing = [t for t in targets if t not in answers]
    if missing:
        raise ResponseParseError(f"missing fields in response: {', '.join(missing)}")
    for t in targets:
        spec = codebook[t]
        if not 1 <= answers[t] <= spec.n_levels:
            raise ResponseParseError(
                f"field {t}: value {answers[t]} outside 1..{spec.n_levels}")
    return answers


def _complete_and_parse(provider, system_text, user_text, codebook, targets,
                        transcripts):
    response = provider.complete(system_text, user_text)
    transcripts.append((system_text, user_text, response))
    try:
        return parse_response(response, codebook, targets)
    except ResponseParseError:
        repaired = provider.complete(system_text, user_text + REPAIR_TEXT)
        transcripts.append((system_text, user_text + REPAIR_TEXT, repaired))
        return parse_response(repaired, codebook, targets)


def run_prediction(config, respondent, graph, train, provider, seed=42) -> PredictionSet:
    """One completion (six for Staged) -> 16 parsed ordinal answers."""
    cb = train.codebook
    persona = persona_of(respondent, cb)
    if config.kind == "Staged":
        return staged_run(config, respondent, graph, train, provider, seed)
    targets = [f.name for f in cb.target_fields()]
    system_text, user_text, _ = build_prompt(config, persona, graph, train, seed,
                                             targets=targets)
    transcripts = []
    answers = _complete_and_parse(provider, system_text, user_text, cb, targets,
                                  transcripts)
    return PredictionSet(respondent.id, answers, config.tag, transcripts)


def staged_run(config, respondent, graph, train, provider, seed=42) -> PredictionSet:
    """Six sequential completions in cascade-stage order; each stage's committed
    estimates condition the next stage's evidence."""
    cb = train.codebook
    persona = persona_of(respondent, cb)
    committed = {}
    transcripts = []
    for stage in STAGE_ORDER:
        targets = [f.name for f in cb.target_fields() if f.pmt_stage == stage]
        if not targets:
            continue
        system_text, user_text, pack = build_prompt(
            config, persona, graph, train, seed, targets=targets,
            committed=committed)
        if pack and all(d.fallback for d in pack.conditionals):
            transcripts.append(("note", f"stage {stage}", "marginal fallback"))
        answers = _complete_and_parse(provider, system_text, user_text, cb,
                                      targets, transcripts)
        committed.update(answers)
    return PredictionSet(respondent.id, committed, config.tag, transcripts)
