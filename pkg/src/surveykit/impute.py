"""Classical imputation baselines: column means, MICE+PMM, an iterative
random-forest imputer, and IPW-weighted multiple imputation with Rubin pooling.

All imputers operate on the 16 ordinal Block B/C target columns, with Block A
encoded one-hot as predictors.  Ordinal targets are treated numerically and
rounded back to the 1..5 scale at the end (forest) or matched to observed
donor values (PMM), so imputed values can never leave the scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from sklearn.ensemble import RandomForestRegressor


class ConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Matrix encoding
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    """Numeric view of a masked dataset.

    y[i, j] holds the true ordinal for respondent i, target j (nan = skip).
    observed[i, j] is False where the mask deleted the cell.  Block A is
    encoded as numeric ordinals plus drop-first one-hot categoricals.
    """
    ids: list
    target_names: list
    y: np.ndarray
    observed: np.ndarray
    skip: np.ndarray
    block_a: np.ndarray
    block_a_columns: list
    blocks: list                    # per target column: "B" or "C"


def encode_block_a(dataset):
    cb = dataset.codebook
    cols, names = [], []
    for spec in cb.block("A"):
        if spec.kind == "ordinal":
            col = np.array([r.ordinal(cb, spec.name) if spec.name in r.answers else np.nan
                            for r in dataset.respondents], dtype=float)
            col[np.isnan(col)] = np.nanmean(col) if not np.all(np.isnan(col)) else 0.0
            cols.append(col)
            names.append(spec.name)
        else:
            for label in spec.labels[1:]:
                col = np.array([1.0 if r.answers.get(spec.name) == label else 0.0
                                for r in dataset.respondents])
                cols.append(col)
                names.append(f"{spec.name}={label}")
    return np.column_stack(cols), names


def build_frame(masked) -> Frame:
    ds = masked.dataset
    cb = ds.codebook
    targets = [f.name for f in cb.target_fields()]
    n = len(ds)
    y = np.full((n, len(targets)), np.nan)
    observed = np.zeros((n, len(targets)), dtype=bool)
    skip = np.zeros((n, len(targets)), dtype=bool)
    for i, r in enumerate(ds.respondents):
        for j, t in enumerate(targets):
            if t in r.skipped or t not in r.answers:
                skip[i, j] = True
                continue
            y[i, j] = r.ordinal(cb, t)
            observed[i, j] = not masked.mask.is_deleted(r.id, t)
    a, a_names = encode_block_a(ds)
    blocks = [cb[t].block for t in targets]
    return Frame([r.id for r in ds.respondents], targets, y, observed, skip,
                 a, a_names, blocks)


# ---------------------------------------------------------------------------
# Runs and pooling
# ---------------------------------------------------------------------------

@dataclass
class ImputationRun:
    method: str
    completed: list                 # M arrays, n x n_targets (nan on skip cells)
    frame: Frame
    config: dict
    seed: int | None = None

    @property
    def m(self):
        return len(self.completed)

    def check_observed_preserved(self):
        for comp in self.completed:
            mask = self.frame.observed & ~self.frame.skip
            if not np.array_equal(comp[mask], self.frame.y[mask]):
                return False
        return True

    def imputed_values(self):
        """All imputed cell values across the M copies (deleted cells only)."""
        cells = ~self.frame.observed & ~self.frame.skip
        return np.concatenate([comp[cells] for comp in self.completed])

    def cell_predictions(self):
        """Across-M mean prediction per deleted cell, {(rid, field): value}."""
        cells = ~self.frame.observed & ~self.frame.skip
        stack = np.stack(self.completed).mean(axis=0)
        return {(self.frame.ids[i], self.frame.target_names[j]): float(stack[i, j])
                for i, j in np.argwhere(cells)}


@dataclass
class PooledEstimate:
    q_bar: float
    within: float
    between: float
    total: float
    df: float
    m: int
    degenerate: bool = False        # between-variance collapsed to zero


def rubin_pool(estimates, variances) -> PooledEstimate:
    """Combine M completed-data estimates: T = W + (1 + 1/M) B."""
    estimates = np.asarray(estimates, dtype=float)
    variances = np.asarray(variances, dtype=float)
    m = len(estimates)
    if m < 2:
        raise ValueError("rubin_pool requires M >= 2")
    q = float(estimates.mean())
    w = float(variances.mean())
    b = float(estimates.var(ddof=1))
    t = w + (1 + 1 / m) * b
    if b > 0:
        df = (m - 1) * (1 + w / ((1 + 1 / m) * b)) ** 2
        degenerate = False
    else:
        df = float("inf")
        degenerate = True
    return PooledEstimate(q, w, b, t, df, m, degenerate)


# ---------------------------------------------------------------------------
# Imputers
# ---------------------------------------------------------------------------

def _column_means(frame):
    means = np.empty(len(frame.target_names))
    for j in range(len(frame.target_names)):
        vals = frame.y[frame.observed[:, j], j]
        means[j] = vals.mean() if len(vals) else 3.0
    return means


def mean_impute(masked) -> ImputationRun:
    """Reference floor: deleted cells get the rounded observed column mean."""
    frame = build_frame(masked)
    comp = frame.y.copy()
    means = _column_means(frame)
    for j in range(comp.shape[1]):
        holes = ~frame.observed[:, j] & ~frame.skip[:, j]
        comp[holes, j] = np.clip(round(means[j]), 1, 5)
    return ImputationRun("mean", [comp], frame, {})


def _lstsq(x, y, ridge=1e-8):
    xtx = x.T @ x + ridge * np.eye(x.shape[1])
    return np.linalg.solve(xtx, x.T @ y)


def _with_intercept(x):
    return np.column_stack([np.ones(len(x)), x])


def mice_pmm(masked, m=5, iters=10, donors=5, seed=42, extra_covariates=None,
             frame=None) -> ImputationRun:
    """Chained equations with predictive-mean-matching draws.

    Per column: OLS of the column on Block A plus all other targets;
    coefficients perturbed per imputation by bootstrap row resampling; each
    deleted cell receives the observed value of a uniformly chosen donor among
    the `donors` rows with closest predicted mean.  M independent chains.
    """
    frame = frame if frame is not None else build_frame(masked)
    n, k = frame.y.shape
    means = _column_means(frame)
    order = sorted(range(k), key=lambda j: ((~frame.observed[:, j] & ~frame.skip[:, j]).sum(), j))
    completed = []
    for chain in range(m):
        rng = np.random.default_rng(np.random.SeedSequence([seed, chain]))
        cur = frame.y.copy()
        for j in range(k):
            holes = ~frame.observed[:, j] & ~frame.skip[:, j]
            cur[holes, j] = means[j]
        for _ in range(iters):
            moved = False
            for j in order:
                holes = ~frame.observed[:, j] & ~frame.skip[:, j]
                if not holes.any():
                    continue
                obs = frame.observed[:, j]
                y_obs = frame.y[obs, j]
                if len(y_obs) < donors:
                    cur[holes, j] = np.clip(round(means[j]), 1, 5)
                    warnings.warn(f"column {frame.target_names[j]}: fewer than "
                                  f"{donors} observed rows, mean fallback")
                    continue
                others = [c for c in range(k) if c != j]
                pred_cols = cur[:, others].copy()
                # skip cells of predictor columns carry no information
                for idx, c in enumerate(others):
                    s = frame.skip[:, c]
                    pred_cols[s, idx] = means[c]
                x = np.column_stack([frame.block_a, pred_cols])
                if extra_covariates is not None:
                    x = np.column_stack([x, extra_covariates])
                x = _with_intercept(x)
                beta_obs = _lstsq(x[obs], y_obs)
                boot = rng.choice(np.flatnonzero(obs), size=obs.sum(), replace=True)
                beta_boot = _lstsq(x[boot], frame.y[boot, j])
                yhat_obs = x[obs] @ beta_obs
                yhat_mis = x[holes] @ beta_boot
                dist = np.abs(yhat_obs[None, :] - yhat_mis[:, None])
                donor_idx = np.argpartition(dist, donors - 1, axis=1)[:, :donors]
                pick = rng.integers(0, donors, size=donor_idx.shape[0])
                new_vals = y_obs[donor_idx[np.arange(len(pick)), pick]]
                if not np.array_equal(new_vals, cur[holes, j]):
                    moved = True
                cur[holes, j] = new_vals
            if not moved:
                break
        completed.append(cur)
    return ImputationRun("mice_pmm", completed, frame,
                         {"m": m, "iters": iters, "donors": donors}, seed)


def missforest(masked, trees=50, max_depth=8, max_iter=10, seed=42) -> ImputationRun:
    """Iterative random-forest imputer: column-by-column refits until the sum
    of squared changes between successive iterations increases, then keeps the
    previous iteration's values.  Single completed dataset, rounded and
    clamped to the ordinal scale."""
    frame = build_frame(masked)
    n, k = frame.y.shape
    medians = np.empty(k)
    for j in range(k):
        vals = frame.y[frame.observed[:, j], j]
        medians[j] = np.median(vals) if len(vals) else 3.0
    cur = frame.y.copy()
    for j in range(k):
        holes = ~frame.observed[:, j] & ~frame.skip[:, j]
        cur[holes, j] = medians[j]
    order = sorted(range(k), key=lambda j: ((~frame.observed[:, j] & ~frame.skip[:, j]).sum(), j))
    prev_delta = np.inf
    best = cur.copy()
    for it in range(max_iter):
        new = cur.copy()
        for idx, j in enumerate(order):
            holes = ~frame.observed[:, j] & ~frame.skip[:, j]
            obs = frame.observed[:, j]
            if not holes.any() or obs.sum() < 2:
                continue
            others = [c for c in range(k) if c != j]
            pred_cols = new[:, others].copy()
            for ci, c in enumerate(others):
                s = frame.skip[:, c]
                pred_cols[s, ci] = medians[c]
            x = np.column_stack([frame.block_a, pred_cols])
            rf = RandomForestRegressor(
                n_estimators=trees, max_depth=max_depth, max_features="sqrt",
                max_samples=0.8, bootstrap=True,
                random_state=(seed * 1000 + it * 100 + idx) % (2**31))
            rf.fit(x[obs], frame.y[obs, j])
            new[holes, j] = rf.predict(x[holes])
        delta = float(np.nansum((new - cur) ** 2))
        if delta > prev_delta:
            break
        best = new
        prev_delta = delta
        cur = new
    cells = ~frame.observed & ~frame.skip
    best[cells] = np.clip(np.round(best[cells]), 1, 5)
    return ImputationRun("missforest", [best], frame,
                         {"trees": trees, "max_depth": max_depth,
                          "max_iter": max_iter, "bagging": 0.8}, seed)


# ---------------------------------------------------------------------------
# IPW / MI
# ---------------------------------------------------------------------------

def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -35, 35)))


def irls_logistic(x, z, max_iter=100, tol=1e-8, ridge=0.0):
    """Logistic regression by iteratively reweighted least squares.

    Raises ConvergenceError after max_iter; on separation (coefficient
    blow-up or singular system) retries once with a small ridge."""
    x = _with_intercept(np.asarray(x, dtype=float))
    z = np.asarray(z, dtype=float)
    if z.min() == z.max():
        # Degenerate outcome: constant propensity, no slope to estimate
        beta = np.zeros(x.shape[1])
        beta[0] = 35.0 if z.min() == 1.0 else -35.0
        return beta, sigmoid(x @ beta)
    beta = np.zeros(x.shape[1])
    ll_prev = -np.inf
    for it in range(max_iter):
        p = sigmoid(x @ beta)
        w = np.clip(p * (1 - p), 1e-10, None)
        try:
            # With ridge > 0 this is a proper penalized Newton step (penalty
            # enters both gradient and Hessian), so separation cannot push
            # the coefficients off to infinity.
            h = x.T @ (w[:, None] * x) + ridge * np.eye(x.shape[1])
            step = np.linalg.solve(h, x.T @ (z - p) - ridge * beta)
        except np.linalg.LinAlgError:
            if ridge == 0.0:
                warnings.warn("logistic fit: singular system, ridge fallback")
                return irls_logistic(x[:, 1:], z, max_iter, tol, ridge=1e-4)
            raise
        beta = beta + step
        if np.max(np.abs(beta)) > 30 and ridge == 0.0:
            warnings.warn("logistic fit: separation suspected, ridge fallback")
            return irls_logistic(x[:, 1:], z, max_iter, tol, ridge=1e-4)
        p = sigmoid(x @ beta)
        ll = float(np.sum(z * np.log(np.clip(p, 1e-12, None))
                          + (1 - z) * np.log(np.clip(1 - p, 1e-12, None))))
        if abs(ll - ll_prev) < tol or np.max(np.abs(step)) < 1e-8:
            return beta, sigmoid(x @ beta)
        ll_prev = ll
    raise ConvergenceError(
        f"IRLS did not converge in {max_iter} iterations (last log-lik {ll_prev:.6f})")


@dataclass
class IpwWeights:
    weights: dict                   # respondent id -> weight (included only)
    cap: float
    coefficients: np.ndarray
    propensities: dict = dc_field(default_factory=dict)


def weighted_mean_sandwich(values, weights):
    """Weighted mean and its sandwich variance estimate."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    wsum = weights.sum()
    mean = float(np.dot(weights, values) / wsum)
    var = float(np.sum(weights**2 * (values - mean) ** 2) / wsum**2)
    return mean, var


def ipw_mi(masked, exclude_threshold=0.5, cap=10.0, m=5, seed=42):
    """IPW-weighted multiple imputation.

    Respondents with >= exclude_threshold Block B/C missingness are excluded
    from estimation; an inclusion propensity is fit on Block A by IRLS; the
    included respondents' isolated holes are multiply imputed with 1/p-hat as
    an extra covariate; per-field weighted means are pooled by Rubin's Rules
    with sandwich variances.

    Returns (ImputationRun, IpwWeights, {field: PooledEstimate}).  Excluded
    respondents' deleted cells are filled with the rounded pooled weighted
    mean so a complete matrix is still available for cell-level evaluation.
    """
    frame = build_frame(masked)
    n, k = frame.y.shape
    eligible = ~frame.skip
    missing_frac = np.where(eligible.sum(axis=1) > 0,
                            (~frame.observed & eligible).sum(axis=1)
                            / np.maximum(eligible.sum(axis=1), 1), 0.0)
    included = missing_frac < exclude_threshold
    if included.all():
        # Degenerate model: everyone included with certainty
        weights_arr = np.ones(n)
        beta = np.zeros(frame.block_a.shape[1] + 1)
        phat = np.ones(n)
    else:
        beta, phat = irls_logistic(frame.block_a, included.astype(float))
        weights_arr = np.clip(1.0 / np.clip(phat, 1e-6, None), 1.0, cap)
    ipw = IpwWeights(
        {frame.ids[i]: float(weights_arr[i]) for i in range(n) if included[i]},
        cap, beta, {frame.ids[i]: float(phat[i]) for i in range(n)})

    # MI on the included subset, inverse propensity as covariate
    sub_frame = Frame(
        [frame.ids[i] for i in range(n) if included[i]],
        frame.target_names,
        frame.y[included], frame.observed[included], frame.skip[included],
        frame.block_a[included], frame.block_a_columns, frame.blocks)
    extra = (1.0 / np.clip(phat[included], 1e-6, None))[:, None]
    sub_run = mice_pmm(masked, m=m, seed=seed, extra_covariates=extra, frame=sub_frame)

    pooled = {}
    for j, name in enumerate(frame.target_names):
        ests, vars_ = [], []
        for comp in sub_run.completed:
            usable = ~sub_frame.skip[:, j]
            vals = comp[usable, j]
            w = weights_arr[included][usable]
            mean, var = weighted_mean_sandwich(vals, w)
            ests.append(mean)
            vars_.append(var)
        pooled[name] = rubin_pool(ests, vars_) if m >= 2 else None

    # Re-expand to the full respondent set
    completed_full = []
    for comp in sub_run.completed:
        full = frame.y.copy()
        full[included] = comp
        for j, name in enumerate(frame.target_names):
            holes = ~included & ~frame.observed[:, j] & ~frame.skip[:, j]
            fill = np.clip(round(pooled[name].q_bar), 1, 5) if pooled[name] else 3
            full[holes, j] = fill
        completed_full.append(full)
    run = ImputationRun("ipw_mi", completed_full, frame,
                        {"exclude_threshold": exclude_threshold, "cap": cap, "m": m},
                        seed)
    return run, ipw, pooled
