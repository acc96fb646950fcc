"""Theory-constrained co-occurrence graph over (field, level) nodes.

Edges connect a source node to a target node only when the source field sits
at a strictly lower cascade stage than the target field; weights are joint
occurrence counts in the training data.  Queries return marginal and
smoothed conditional distributions plus cross-tabulations, all of which are
pure counts: nothing here carries a causal claim.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np


class GraphQueryError(ValueError):
    pass


@dataclass(frozen=True)
class GraphNode:
    field: str
    level: str

    def key(self):
        return f"{self.field}={self.level}"


@dataclass
class ConditionalDistribution:
    target_field: str
    levels: tuple                  # level labels, codebook order
    probabilities: np.ndarray
    support_n: int
    sources_used: tuple = ()
    fallback: str | None = None    # "marginal" when no usable evidence

    def expectation(self, codebook):
        spec = codebook[self.target_field]
        ords = np.array([spec.ordinal_of(lab) for lab in self.levels], dtype=float)
        return float(np.dot(ords, self.probabilities))


class CooccurrenceGraph:
    """Immutable after build; all queries are read-only."""

    def __init__(self, codebook, edge_counts, node_counts, permitted_pairs,
                 built_from_n, codebook_hash=None):
        self.codebook = codebook
        # (src_field, src_level, tgt_field, tgt_level) -> count; zero counts omitted
        self.edge_counts = dict(edge_counts)
        # (field, level) -> occurrence count in training data
        self.node_counts = dict(node_counts)
        self.permitted_pairs = set(permitted_pairs)
        self.built_from_n = built_from_n
        self.codebook_hash = codebook_hash or codebook.content_hash()

    # -- stats ---------------------------------------------------------------

    @property
    def stats(self):
        source_fields = {s for s, _ in self.permitted_pairs}
        source_nodes = {(f, l) for f, l in self.node_counts if f in source_fields}
        return {
            "source_node_count": len(source_nodes),
            "total_node_count": len(self.node_counts),
            "edge_count": len(self.edge_counts),
            "pair_count": len(self.permitted_pairs),
            "built_from_n": self.built_from_n,
        }

    def edge_count(self, src_field, src_level, tgt_field, tgt_level):
        return self.edge_counts.get((src_field, src_level, tgt_field, tgt_level), 0)

    # -- queries -------------------------------------------------------------

    def marginal(self, field_name) -> ConditionalDistribution:
        spec = self.codebook[field_name]
        counts = np.array([self.node_counts.get((spec.name, lab), 0)
                           for lab in spec.labels], dtype=float)
        total = counts.sum()
        if total == 0:
            raise GraphQueryError(f"field {spec.name!r} never observed")
        return ConditionalDistribution(spec.name, spec.labels, counts / total, int(total))

    def conditional(self, target_field, evidence, alpha=1.0) -> ConditionalDistribution:
        """Mixture of Laplace-smoothed per-source conditionals.

        Evidence fields that are not permitted sources for the target are
        silently ignored but recorded; with no usable evidence the marginal is
        returned flagged as a fallback.
        """
        spec = self.codebook[target_field]
        per_source, used, support = [], [], []
        for ev_field, ev_level in evidence.items():
            ev_name = self.codebook.canonical(ev_field)
            if (ev_name, spec.name) not in self.permitted_pairs:
                continue
            counts = np.array([self.edge_count(ev_name, ev_level, spec.name, lab)
                               for lab in spec.labels], dtype=float)
            smoothed = counts + alpha
            per_source.append(smoothed / smoothed.sum())
            used.append((ev_name, ev_level))
            support.append(int(counts.sum()))
        if not per_source:
            marg = self.marginal(spec.name)
            return ConditionalDistribution(spec.name, spec.labels, marg.probabilities,
                                           marg.support_n, (), fallback="marginal")
        probs = np.mean(per_source, axis=0)
        return ConditionalDistribution(spec.name, spec.labels, probs,
                                       min(support), tuple(used))

    # -- serialization -------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "built_from_n": self.built_from_n,
            "codebook_hash": self.codebook_hash,
            "stats": self.stats,
            "nodes": [{"field": f, "level": l, "count": c}
                      for (f, l), c in sorted(self.node_counts.items())],
            "edges": [{"source": [s, sl], "target": [t, tl], "count": c}
                      for (s, sl, t, tl), c in sorted(self.edge_counts.items())],
            "permitted_pairs": sorted(list(p) for p in self.permitted_pairs),
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text, codebook):
        doc = json.loads(text)
        edges = {(e["source"][0], e["source"][1], e["target"][0], e["target"][1]): e["count"]
                 for e in doc["edges"]}
        nodes = {(n["field"], n["level"]): n["count"] for n in doc["nodes"]}
        pairs = {tuple(p) for p in doc["permitted_pairs"]}
        return cls(codebook, edges, nodes, pairs, doc["built_from_n"],
                   doc.get("codebook_hash"))

    def content_hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def permitted_field_pairs(codebook):
    """All stage-increasing (source field, target field) pairs."""
    pairs = set()
    names = codebook.field_names()
    for s in names:
        for t in names:
            if codebook.stage(s) < codebook.stage(t):
                pairs.add((s, t))
    return pairs


def build_graph(train, permitted=None) -> CooccurrenceGraph:
    """Count joint occurrences over the permitted stage-increasing pairs."""
    if len(train) == 0:
        raise ValueError("training dataset is empty")
    codebook = train.codebook
    permitted = permitted if permitted is not None else permitted_field_pairs(codebook)
    node_counts, edge_counts = {}, {}
    for r in train.respondents:
        for fname, label in r.answers.items():
            key = (fname, label)
            node_counts[key] = node_counts.get(key, 0) + 1
    for s, t in permitted:
        for r in train.respondents:
            sv, tv = r.answers.get(s), r.answers.get(t)
            if sv is None or tv is None:
                continue
            key = (s, sv, t, tv)
            edge_counts[key] = edge_counts.get(key, 0) + 1
    return CooccurrenceGraph(codebook, edge_counts, node_counts, permitted, len(train))


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties.

    Returns None (undefined) when either vector has zero variance.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("spearman requires two equal-length vectors, length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


def _average_ranks(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=float)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def empirical_pair_spearman(train, src_field, tgt_field):
    """Spearman over jointly observed ordinal values of a field pair."""
    cb = train.codebook
    xs, ys = [], []
    for r in train.respondents:
        xv, yv = r.ordinal(cb, src_field), r.ordinal(cb, tgt_field)
        if xv is not None and yv is not None:
            xs.append(xv)
            ys.append(yv)
    if len(xs) < 2:
        return None
    return spearman(xs, ys)


def validated_subgraph(graph, train, edge_signs=None) -> CooccurrenceGraph:
    """Restrict to field pairs whose empirical Spearman sign matches theory.

    Pairs with a categorical source are retained unchanged (no monotone
    expectation applies); ordinal pairs without a declared sign are excluded
    with a warning.
    """
    cb = graph.codebook
    signs = edge_signs if edge_signs is not None else cb.edge_signs
    keep = set()
    for s, t in graph.permitted_pairs:
        if cb[s].kind == "categorical" or cb[t].kind == "categorical":
            keep.add((s, t))
            continue
        declared = signs.get(f"{s}->{t}")
        if declared is None:
            warnings.warn(f"pair {s}->{t}: no declared sign, excluded from validated subgraph")
            continue
        rho = empirical_pair_spearman(train, s, t)
        if rho is None:
            continue
        if (rho > 0 and declared == "+") or (rho < 0 and declared == "-"):
            keep.add((s, t))
    edges = {k: c for k, c in graph.edge_counts.items() if (k[0], k[2]) in keep}
    return CooccurrenceGraph(cb, edges, graph.node_counts, keep,
                             graph.built_from_n, graph.codebook_hash)


def marginal(train, field_name, alpha=0.0) -> ConditionalDistribution:
    """Empirical level proportions from a dataset (skip cells excluded)."""
    spec = train.codebook[field_name]
    counts = np.zeros(spec.n_levels)
    for r in train.respondents:
        label = r.answers.get(spec.name)
        if label is not None:
            counts[spec.labels.index(label)] += 1
    total = counts.sum()
    if total == 0:
        raise GraphQueryError(f"field {spec.name!r} never observed")
    probs = (counts + alpha) / (total + alpha * spec.n_levels)
    return ConditionalDistribution(spec.name, spec.labels, probs, int(total))


@dataclass
class Crosstab:
    field_a: str
    field_b: str
    levels_a: tuple
    levels_b: tuple
    counts: np.ndarray          # |A| x |B| joint counts
    total_n: int

    def row_percentages(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = 100.0 * self.counts / self.counts.sum(axis=1, keepdims=True)
        return np.nan_to_num(pct)

    def cell(self, label_a, label_b):
        i = self.levels_a.index(label_a)
        j = self.levels_b.index(label_b)
        return int(self.counts[i, j])


def crosstab(train, field_a, field_b) -> Crosstab:
    cb = train.codebook
    sa, sb = cb[field_a], cb[field_b]
    counts = np.zeros((sa.n_levels, sb.n_levels), dtype=int)
    for r in train.respondents:
        va, vb = r.answers.get(sa.name), r.answers.get(sb.name)
        if va is None or vb is None:
            continue
        counts[sa.labels.index(va), sb.labels.index(vb)] += 1
    return Crosstab(sa.name, sb.name, sa.labels, sb.labels, counts, int(counts.sum()))
