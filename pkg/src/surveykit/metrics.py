"""Stage 3/4 evaluation metrics, sanity gates, and the benchmark runner.

Cell selections always exclude skip-logic cells.  Reports keep a stable
column schema regardless of the method mix, and subgroup breakdowns are
reported alongside every aggregate so opposite-signed subgroup errors
cannot hide behind a near-zero overall bias.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import engine
from .graph import build_graph, validated_subgraph
from .impute import (ImputationRun, build_frame, encode_block_a, ipw_mi,
                     mean_impute, mice_pmm, missforest, rubin_pool,
                     weighted_mean_sandwich)
from .missing import apply_mechanism, fisher_exact_2x2, compound_by_c_cell_table


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Elementary metrics
# ---------------------------------------------------------------------------

def _pairs(pred, truth, selection):
    p, t = [], []
    for cell in selection:
        if cell not in pred:
            raise EvaluationError(f"no prediction for cell {cell}")
        p.append(pred[cell])
        t.append(truth[cell])
    return np.asarray(p, dtype=float), np.asarray(t, dtype=float)


def mae(pred, truth, selection):
    p, t = _pairs(pred, truth, selection)
    if len(p) == 0:
        raise EvaluationError("empty cell selection")
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth, selection):
    p, t = _pairs(pred, truth, selection)
    if len(p) == 0:
        raise EvaluationError("empty cell selection")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def signed_bias(pred, truth, selection):
    p, t = _pairs(pred, truth, selection)
    if len(p) == 0:
        raise EvaluationError("empty cell selection")
    return float(np.mean(p - t))


def within1(pred, truth, selection):
    p, t = _pairs(pred, truth, selection)
    if len(p) == 0:
        raise EvaluationError("empty cell selection")
    return float(np.mean(np.abs(p - t) <= 1.0))


def quadratic_weighted_kappa(pred, truth, levels=5):
    """1 - sum(w*O) / sum(w*E) with w_ij = (i-j)^2 / (levels-1)^2."""
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.min() < 1 or pred.max() > levels or truth.min() < 1 or truth.max() > levels:
        raise ValueError("values outside 1..levels")
    n = len(pred)
    obs = np.zeros((levels, levels))
    for p, t in zip(pred, truth):
        obs[p - 1, t - 1] += 1
    marg_p = obs.sum(axis=1)
    marg_t = obs.sum(axis=0)
    expected = np.outer(marg_p, marg_t) / n
    idx = np.arange(levels)
    w = (idx[:, None] - idx[None, :]) ** 2 / (levels - 1) ** 2
    denom = (w * expected).sum()
    if denom == 0:
        return None
    return float(1.0 - (w * obs).sum() / denom)


def symmetric_kl(dist_imputed, dist_truth, eps=1e-6):
    """KL(p||q) + KL(q||p) after eps-smoothing and renormalization."""
    p = np.asarray(dist_imputed, dtype=float) + eps
    q = np.asarray(dist_truth, dtype=float) + eps
    if p.shape != q.shape:
        raise ValueError("distributions must share support")
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))


def level_distribution(values, levels=5):
    values = np.asarray(values, dtype=int)
    counts = np.bincount(values, minlength=levels + 1)[1:levels + 1]
    total = counts.sum()
    return counts / total if total else np.full(levels, 1.0 / levels)


def ols_fit(x, y, ridge=0.0):
    xtx = x.T @ x
    try:
        if ridge:
            raise np.linalg.LinAlgError
        return np.linalg.solve(xtx, x.T @ y)
    except np.linalg.LinAlgError:
        if not ridge:
            warnings.warn("singular OLS design, ridge fallback")
            ridge = 1e-8
        return np.linalg.solve(xtx + ridge * np.eye(x.shape[1]), x.T @ y)


def ols_coef_delta(run: ImputationRun, outcome="Prep_Start"):
    """L2 norm of the coefficient difference between OLS fits of `outcome` on
    the Block A design, imputed versus ground-truth data.  Multiply-imputed
    inputs use the coefficient average across the M copies."""
    frame = run.frame
    j = frame.target_names.index(outcome)
    usable = ~frame.skip[:, j]
    x = np.column_stack([np.ones(usable.sum()), frame.block_a[usable]])
    beta_truth = ols_fit(x, frame.y[usable, j])
    betas = [ols_fit(x, comp[usable, j]) for comp in run.completed]
    beta_imp = np.mean(betas, axis=0)
    return float(np.linalg.norm(beta_imp - beta_truth))


def ci_coverage(pooled_by_field, truth_means, level=0.95):
    """Fraction of fields whose Rubin interval covers the truth (closed).

    Fields with zero between-variance are excluded and counted.  Returns
    (coverage or None, detail dict)."""
    covered = total = excluded = 0
    for name, pooled in pooled_by_field.items():
        if pooled is None:
            continue
        if pooled.degenerate:
            excluded += 1
            continue
        half = sps.t.ppf(0.5 + level / 2, pooled.df) * math.sqrt(pooled.total)
        total += 1
        if pooled.q_bar - half <= truth_means[name] <= pooled.q_bar + half:
            covered += 1
    if total == 0:
        return None, {"reason": "no poolable fields", "excluded_b_zero": excluded}
    return covered / total, {"n_fields": total, "excluded_b_zero": excluded}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["method", "scenario", "block", "stratum", "n_cells", "rmse",
                  "signed_bias", "mae", "within1", "qwk", "sym_kl",
                  "ols_coef_delta", "ci_coverage", "ci_note"]


@dataclass
class MetricReport:
    method: str
    scenario: str
    block: str
    stratum: str
    n_cells: int
    rmse: float
    signed_bias: float
    mae: float
    within1: float
    qwk: float | None
    sym_kl: float
    ols_coef_delta: float | None = None
    ci_coverage: float | None = None
    ci_note: str = ""

    def row(self):
        d = asdict(self)
        return [d[c] for c in REPORT_COLUMNS]


def deleted_cell_selection(masked, block=None):
    """Deleted, ordinal-mappable, non-skip cells of a masked dataset."""
    cb = masked.dataset.codebook
    cells = []
    for rid, fname in sorted(masked.mask.deleted):
        spec = cb[fname]
        if spec.kind != "ordinal":
            continue
        if block is not None and spec.block != block:
            continue
        cells.append((rid, fname))
    return cells


def truth_map(dataset):
    cb = dataset.codebook
    out = {}
    for r in dataset.respondents:
        for spec in cb.target_fields():
            v = r.ordinal(cb, spec.name)
            if v is not None:
                out[(r.id, spec.name)] = v
    return out


def subgroup_stratify(pred, truth, selection, dataset, method="", scenario="",
                      block="all", extras=None):
    """Aggregate plus compound / non-compound stratified reports."""
    flags = {r.id: r.flags.compound for r in dataset.respondents}
    strata = {
        "all": selection,
        "compound": [c for c in selection if flags[c[0]]],
        "non_compound": [c for c in selection if not flags[c[0]]],
    }
    reports = {}
    for name, cells in strata.items():
        if not cells:
            reports[name] = None
            continue
        p, t = _pairs(pred, truth, cells)
        kappa = quadratic_weighted_kappa(np.round(p).astype(int),
                                         np.round(t).astype(int))
        rep = MetricReport(
            method=method, scenario=scenario, block=block, stratum=name,
            n_cells=len(cells),
            rmse=float(np.sqrt(np.mean((p - t) ** 2))),
            signed_bias=float(np.mean(p - t)),
            mae=float(np.mean(np.abs(p - t))),
            within1=float(np.mean(np.abs(p - t) <= 1.0)),
            qwk=kappa,
            sym_kl=symmetric_kl(level_distribution(np.round(p).astype(int)),
                                level_distribution(np.round(t).astype(int))))
        if extras and name == "all":
            rep.ols_coef_delta = extras.get("ols_coef_delta")
            rep.ci_coverage = extras.get("ci_coverage")
            rep.ci_note = extras.get("ci_note", "")
        reports[name] = rep
    return reports


# ---------------------------------------------------------------------------
# Independent conditional-expectation predictor (oracle for the stub path)
# ---------------------------------------------------------------------------

def graph_expectation_predictions(graph, respondent, codebook, deltas=None):
    """Rounded conditional expectations straight from graph queries.

    This is the reference predictor the Marginal-configuration stub pipeline
    must match cell-for-cell; it never touches prompt text."""
    persona = engine.persona_of(respondent, codebook)
    out = {}
    for spec in codebook.target_fields():
        cond = graph.conditional(spec.name, persona)
        exp = cond.expectation(codebook)
        if deltas and respondent.flags.compound and spec.name in deltas:
            exp += deltas[spec.name]
        out[spec.name] = int(min(max(round(exp), 1), spec.n_levels))
    return out


# ---------------------------------------------------------------------------
# Sanity gates
# ---------------------------------------------------------------------------

GATE_NAMES = ("between_variance_positive", "weights_capped", "imputed_in_range",
              "mnar_fisher_significant", "observed_cells_preserved")


def sanity_gate(bundle, weight_cap=10.0, fisher_alpha=1e-4):
    """Evaluate the five preregistered checks over a run bundle.

    bundle keys: "masked" {scenario: MaskedDataset}, "runs" [ImputationRun],
    "pooled" [{field: PooledEstimate}], "weights" [IpwWeights].
    Missing inputs leave a check not-run and the gate fails closed.
    """
    results = {}

    runs = bundle.get("runs")
    pooled_sets = bundle.get("pooled")
    if pooled_sets:
        ok = any(p is not None and p.between > 0
                 for pooled in pooled_sets for p in pooled.values())
        results["between_variance_positive"] = ("pass" if ok else "fail",
                                                "" if ok else "all between-variances zero")
    else:
        mi_runs = [r for r in (runs or []) if r.m > 1]
        if not mi_runs:
            results["between_variance_positive"] = ("not-run", "no MI output in bundle")
        else:
            ok = True
            for r in mi_runs:
                cells = ~r.frame.observed & ~r.frame.skip
                if not cells.any():
                    continue
                stack = np.stack([c[cells] for c in r.completed])
                if not (stack.var(axis=0) > 0).any():
                    ok = False
            results["between_variance_positive"] = ("pass" if ok else "fail", "")

    weights = bundle.get("weights")
    if not weights:
        results["weights_capped"] = ("not-run", "no IPW weights in bundle")
    else:
        worst = max(max(w.weights.values(), default=1.0) for w in weights)
        ok = worst <= weight_cap + 1e-12
        results["weights_capped"] = ("pass" if ok else "fail", f"max weight {worst:.3f}")

    if not runs:
        results["imputed_in_range"] = ("not-run", "no imputation runs in bundle")
    else:
        offender = None
        for r in runs:
            cells = ~r.frame.observed & ~r.frame.skip
            for mi, comp in enumerate(r.completed):
                vals = comp[cells]
                bad = (vals < 1) | (vals > 5)
                if bad.any():
                    i, j = np.argwhere(cells)[np.flatnonzero(bad)[0]]
                    offender = (r.method, mi, r.frame.ids[i], r.frame.target_names[j],
                                float(vals[bad][0]))
                    break
        ok = offender is None
        results["imputed_in_range"] = ("pass" if ok else "fail",
                                       "" if ok else f"out-of-range cell {offender}")

    masked = bundle.get("masked") or {}
    mnar = {s: m for s, m in masked.items() if s in ("S3", "S4")}
    if not mnar:
        results["mnar_fisher_significant"] = ("not-run", "no MNAR mask in bundle")
    else:
        detail, ok = [], True
        for scen, m in mnar.items():
            t = compound_by_c_cell_table(m)
            p = fisher_exact_2x2(t[0][0], t[0][1], t[1][0], t[1][1])
            detail.append(f"{scen} p={p:.3g}")
            ok = ok and p < fisher_alpha
        results["mnar_fisher_significant"] = ("pass" if ok else "fail", "; ".join(detail))

    if not runs:
        results["observed_cells_preserved"] = ("not-run", "no imputation runs in bundle")
    else:
        ok = all(r.check_observed_preserved() for r in runs)
        results["observed_cells_preserved"] = ("pass" if ok else "fail", "")

    passed = all(status == "pass" for status, _ in results.values())
    return passed, results


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------

CLASSICAL_METHODS = ("mean", "mice_pmm", "missforest", "ipw_mi")


def _classical_predictions(method, masked, seed):
    """Returns (predictions {(rid, field): value}, run, weights, pooled)."""
    if method == "mean":
        run, weights, pooled = mean_impute(masked), None, None
    elif method == "mice_pmm":
        run, weights, pooled = mice_pmm(masked, seed=seed), None, None
    elif method == "missforest":
        run, weights, pooled = missforest(masked, seed=seed), None, None
    elif method == "ipw_mi":
        run, weights, pooled = ipw_mi(masked, seed=seed)
    else:
        raise ValueError(f"unknown classical method {method!r}")
    frame = run.frame
    stack = np.stack(run.completed)
    mean_imp = stack.mean(axis=0)
    preds = {}
    holes = ~frame.observed & ~frame.skip
    for i, j in np.argwhere(holes):
        preds[(frame.ids[i], frame.target_names[j])] = float(mean_imp[i, j])
    return preds, run, weights, pooled


def _llm_predictions(config, masked, graph, train, provider, seed):
    preds = {}
    for r in masked.dataset.respondents:
        ps = engine.run_prediction(config, r, graph, train, provider, seed)
        for f, v in ps.answers.items():
            if masked.mask.is_deleted(r.id, f):
                preds[(r.id, f)] = float(v)
    return preds


def mi_pooled_means(run: ImputationRun):
    """Rubin-pool the per-field means of an MI run (complete-data variance of
    the mean = sample variance / n)."""
    if run.m < 2:
        return None
    frame = run.frame
    pooled = {}
    for j, name in enumerate(frame.target_names):
        usable = ~frame.skip[:, j]
        ests, vars_ = [], []
        for comp in run.completed:
            vals = comp[usable, j]
            ests.append(float(vals.mean()))
            vars_.append(float(vals.var(ddof=1) / len(vals)))
        pooled[name] = rubin_pool(ests, vars_)
    return pooled


def run_benchmark(methods, scenarios, train, validation, seeds=(42,),
                  provider=None, out_dir=None, graph=None, gate=True,
                  mechanism_params=None):
    """Cross-product (method x scenario x seed) evaluation.

    `methods` mixes classical tags and engine.MethodConfig instances.  Returns
    {"reports": [MetricReport], "gate": (passed, results) per seed} and writes
    CSV tables plus plot-data files when out_dir is given.
    """
    cb = train.codebook
    graph = graph or build_graph(train)
    vgraph = None
    provider = provider or engine.StubProvider(cb)
    mechanism_params = mechanism_params or {}
    truth = truth_map(validation)

    reports = []
    gates = {}
    for seed in seeds:
        bundle = {"masked": {}, "runs": [], "pooled": [], "weights": []}
        for scenario in scenarios:
            masked = apply_mechanism(validation, scenario, seed=seed,
                                     **mechanism_params.get(scenario, {}))
            bundle["masked"][scenario] = masked
            for method in methods:
                if isinstance(method, str):
                    preds, run, weights, pooled = _classical_predictions(
                        method, masked, seed)
                    tag = method
                    extras = {"ols_coef_delta": ols_coef_delta(run)}
                    if pooled is None and run.m > 1:
                        pooled = mi_pooled_means(run)
                    if pooled:
                        t_means = {n: float(np.nanmean(run.frame.y[:, j]))
                                   for j, n in enumerate(run.frame.target_names)}
                        cov, note = ci_coverage(pooled, t_means)
                        extras["ci_coverage"] = cov
                        extras["ci_note"] = json.dumps(note) if cov is None else ""
                        bundle["pooled"].append(pooled)
                    else:
                        extras["ci_coverage"] = None
                        extras["ci_note"] = "coverage undefined for M=1"
                    bundle["runs"].append(run)
                    if weights:
                        bundle["weights"].append(weights)
                else:
                    g = graph
                    if method.graph_variant == "validated":
                        if vgraph is None:
                            vgraph = validated_subgraph(graph, train)
                        g = vgraph
                    preds = _llm_predictions(method, masked, g, train, provider, seed)
                    tag = method.tag
                    extras = {"ci_coverage": None,
                              "ci_note": "coverage undefined for M=1"}
                for block in ("B", "C", None):
                    sel = deleted_cell_selection(masked, block=block)
                    if not sel:
                        continue
                    strat = subgroup_stratify(
                        preds, truth, sel, validation, method=tag,
                        scenario=f"{scenario}@{seed}",
                        block=block or "all", extras=extras if block is None else None)
                    reports.extend(r for r in strat.values() if r is not None)
        gates[seed] = sanity_gate(bundle) if gate else (True, {})

    result = {"reports": reports, "gates": gates}
    if out_dir:
        emit_report_files(reports, Path(out_dir))
    return result


def emit_report_files(reports, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in sorted(reports, key=lambda r: (r.method, r.scenario, r.block, r.stratum)):
            w.writerow(r.row())
    with open(out_dir / "rmse_by_scenario.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "scenario", "block", "rmse"])
        for r in sorted(reports, key=lambda r: (r.method, r.scenario, r.block)):
            if r.stratum == "all":
                w.writerow([r.method, r.scenario, r.block, r.rmse])
    with open(out_dir / "bias_rmse_frontier.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "scenario", "block", "signed_bias", "rmse"])
        for r in sorted(reports, key=lambda r: (r.method, r.scenario, r.block)):
            if r.stratum == "all":
                w.writerow([r.method, r.scenario, r.block, r.signed_bias, r.rmse])
    with open(out_dir / "subgroup_bias.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "scenario", "block", "stratum", "signed_bias", "n_cells"])
        for r in sorted(reports, key=lambda r: (r.method, r.scenario, r.block, r.stratum)):
            if r.stratum in ("compound", "non_compound"):
                w.writerow([r.method, r.scenario, r.block, r.stratum,
                            r.signed_bias, r.n_cells])


def run_ablation(scenarios, train, validation, seeds=(42,), provider=None,
                 out_dir=None, graph=None):
    """The four-variant component ablation on Block C signed bias."""
    variants = [
        engine.MethodConfig("Marginal"),
        engine.MethodConfig("ATLM", with_peers=True, with_deltas=False),
        engine.MethodConfig("ATLM", with_peers=False, with_deltas=True),
        engine.MethodConfig("ATLM", with_peers=True, with_deltas=True),
    ]
    result = run_benchmark(variants, scenarios, train, validation, seeds,
                           provider=provider, out_dir=None, graph=graph,
                           gate=False)
    grid = [r for r in result["reports"] if r.block == "C"]
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation_bias.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "scenario", "stratum", "signed_bias", "n_cells"])
            for r in sorted(grid, key=lambda r: (r.method, r.scenario, r.stratum)):
                w.writerow([r.method, r.scenario, r.stratum, r.signed_bias, r.n_cells])
    return grid
