"""Evaluation metrics and inferential statistics.

Rank-based AUROC with bootstrap intervals, block-permutation nulls, FDR
correction, signed-rank and rank-correlation tests, Welch's t, and a
random-intercept linear mixed model fit by profiled maximum likelihood.
All resampling is deterministic: iteration i draws from its own generator
seeded base_seed + i, so results never depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm, rankdata
from scipy.optimize import minimize_scalar

from .errors import (
    InsufficientDataError,
    RankDeficiencyError,
    UndefinedMetricError,
    UndefinedTestError,
)
from .features import LABEL_FREE, LABEL_STRESS, FeatureFrame

BOOTSTRAP_ITER = 1000
PERMUTATION_MODELS = 20     # null model trainings
PERMUTATION_BOOTSTRAP = 50  # bootstrap means per null model; 20 x 50 -> p floor ~0.001


@dataclass(frozen=True)
class AurocResult:
    auroc: float
    ci_low: float
    ci_high: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class LmmFit:
    beta: np.ndarray
    beta_ci: np.ndarray
    beta_p: np.ndarray
    sigma2_residual: float
    sigma2_intercept: float
    group_count: int
    log_likelihood: float
    theta: float


def _clean(values, name) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise UndefinedTestError(f"{name} contains non-finite values")
    return arr


def auroc(scores_pos, scores_neg) -> float:
    """Probability a positive outranks a negative; ties earn half credit."""
    pos = np.asarray(scores_pos, dtype=float).ravel()
    neg = np.asarray(scores_neg, dtype=float).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("auroc needs at least one score in each class")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise UndefinedMetricError("auroc scores must be finite")
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_ci(values, statistic, n_iter: int = BOOTSTRAP_ITER, seed: int = 0):
    """Percentile (2.5, 97.5) interval of `statistic` over full-size resamples."""
    arr = np.asarray(values, dtype=float)
    n = len(arr)
    if n < 2:
        raise InsufficientDataError("bootstrap needs at least two observations")
    stats = np.empty(n_iter)
    for i in range(n_iter):
        rng = np.random.default_rng(seed + i)
        idx = rng.integers(0, n, n)
        stats[i] = statistic(arr[idx])
    return float(np.percentile(stats, 2.5)), float(np.percentile(stats, 97.5))


def auroc_result(scores_pos, scores_neg, n_iter: int = BOOTSTRAP_ITER, seed: int = 0) -> AurocResult:
    """Point AUROC plus a pooled-resampling bootstrap interval.

    Each iteration resamples the pooled labeled scores at full size;
    iterations that lose an entire class are skipped. The interval is
    widened, if needed, to bracket the point estimate.
    """
    pos = np.asarray(scores_pos, dtype=float).ravel()
    neg = np.asarray(scores_neg, dtype=float).ravel()
    point = auroc(pos, neg)
    scores = np.concatenate([pos, neg])
    labels = np.concatenate([np.ones(len(pos), dtype=bool), np.zeros(len(neg), dtype=bool)])
    n = len(scores)
    vals = []
    for i in range(n_iter):
        rng = np.random.default_rng(seed + i)
        idx = rng.integers(0, n, n)
        lab = labels[idx]
        if lab.all() or not lab.any():
            continue
        vals.append(auroc(scores[idx][lab], scores[idx][~lab]))
    if not vals:
        low = high = point
    else:
        low = float(np.percentile(vals, 2.5))
        high = float(np.percentile(vals, 97.5))
    return AurocResult(
        auroc=point,
        ci_low=min(low, point),
        ci_high=max(high, point),
        n_pos=len(pos),
        n_neg=len(neg),
    )


def permute_session_labels(frame: FeatureFrame, flip: bool) -> FeatureFrame:
    """Swap the free/stress block assignment of one session (or keep it)."""
    if not flip:
        return frame
    labels = frame.labels.astype("<U8").copy()
    free = labels == LABEL_FREE
    stress = labels == LABEL_STRESS
    labels[free] = LABEL_STRESS
    labels[stress] = LABEL_FREE
    return replace(frame, labels=labels)


def _bootstrap_auroc_means(scores, labels, n_iter, seed):
    out = np.empty(n_iter)
    n = len(scores)
    for b in range(n_iter):
        rng = np.random.default_rng(seed + b)
        idx = rng.integers(0, n, n)
        lab = labels[idx]
        if lab.all() or not lab.any():
            out[b] = 0.5
            continue
        out[b] = auroc(scores[idx][lab], scores[idx][~lab])
    return out


def permutation_pvalue(
    frames,
    pipeline,
    n_models: int = PERMUTATION_MODELS,
    n_bootstrap: int = PERMUTATION_BOOTSTRAP,
    seed: int = 0,
) -> float:
    """Chance that block-permuted labels perform as well as the real ones.

    `pipeline` maps a list of FeatureFrames to (scores, binary labels) over
    its evaluation rows. Null models permute each session's free/stress
    block assignment (a per-session coin flip), retrain via the pipeline,
    and contribute `n_bootstrap` bootstrap AUROC means; the p-value is
    (1 + #{null >= observed mean}) / (1 + n_models * n_bootstrap).
    """
    if n_models < 1:
        raise InsufficientDataError("permutation test needs at least one null model")
    frames = [frames] if isinstance(frames, FeatureFrame) else list(frames)
    scores, labels = pipeline(frames)
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    observed = float(np.mean(_bootstrap_auroc_means(scores, labels, n_bootstrap, seed)))

    null_means = []
    for m in range(n_models):
        flip_rng = np.random.default_rng((seed, m))
        permuted = [permute_session_labels(f, bool(flip_rng.integers(0, 2))) for f in frames]
        null_scores, null_labels = pipeline(permuted)
        null_scores = np.asarray(null_scores, dtype=float)
        null_labels = np.asarray(null_labels, dtype=bool)
        chunk = _bootstrap_auroc_means(
            null_scores, null_labels, n_bootstrap, seed + (m + 1) * n_bootstrap
        )
        null_means.extend(chunk)
    null_means = np.asarray(null_means)
    return float((1 + np.sum(null_means >= observed)) / (1 + len(null_means)))


def fdr_bh(pvalues, alpha: float = 0.05):
    """Benjamini-Hochberg step-up: rejection flags and adjusted p-values."""
    p = np.asarray(pvalues, dtype=float).ravel()
    if len(p) == 0:
        return np.zeros(0, dtype=bool), np.zeros(0)
    if np.any((p < 0) | (p > 1) | ~np.isfinite(p)):
        raise UndefinedTestError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    thresholds = alpha * np.arange(1, m + 1) / m
    passing = np.flatnonzero(ranked <= thresholds)
    reject = np.zeros(m, dtype=bool)
    if len(passing):
        reject[order[: passing[-1] + 1]] = True
    adjusted_sorted = np.minimum.accumulate((m * ranked / np.arange(1, m + 1))[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(adjusted_sorted, 1.0)
    return reject, adjusted


def _wilcoxon_exact_tail(ranks2, w2_obs, alternative):
    # DP over doubled ranks keeps every achievable sum integral
    total = int(np.sum(ranks2))
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    n_assign = counts.sum()
    w2_obs = int(round(w2_obs))
    p_ge = counts[w2_obs:].sum() / n_assign
    p_le = counts[: w2_obs + 1].sum() / n_assign
    if alternative == "greater":
        return p_ge
    if alternative == "less":
        return p_le
    return min(1.0, 2.0 * min(p_ge, p_le))


def wilcoxon_signed_rank(differences, alternative: str = "two_sided") -> float:
    """Signed-rank test; exact for n <= 25, normal with tie correction beyond."""
    if alternative not in ("greater", "less", "two_sided"):
        raise UndefinedTestError(f"unknown alternative '{alternative}'")
    d = _clean(differences, "differences")
    if len(d) and np.all(d == 0.0):
        raise UndefinedTestError("all differences are zero")
    d = d[d != 0.0]
    n = len(d)
    if n < 5:
        raise UndefinedTestError("signed-rank test needs at least 5 nonzero differences")
    ranks = rankdata(np.abs(d))
    w_pos = ranks[d > 0].sum()
    if n <= 25:
        return float(_wilcoxon_exact_tail((2 * ranks).astype(np.int64), 2 * w_pos, alternative))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    sd = np.sqrt(var)
    if alternative == "greater":
        return float(norm.sf((w_pos - mean - 0.5) / sd))
    if alternative == "less":
        return float(norm.cdf((w_pos - mean + 0.5) / sd))
    z = (abs(w_pos - mean) - 0.5) / sd
    return float(min(1.0, 2.0 * norm.sf(z)))


def spearman_rho(x, y):
    """Rank correlation with average-rank ties; p from the t approximation."""
    xa = _clean(x, "x")
    ya = _clean(y, "y")
    if len(xa) != len(ya):
        raise UndefinedTestError("inputs differ in length")
    n = len(xa)
    if n < 3:
        raise UndefinedTestError("rank correlation needs at least 3 pairs")
    rx = rankdata(xa)
    ry = rankdata(ya)
    sx = np.std(rx)
    sy = np.std(ry)
    if sx < 1e-12 or sy < 1e-12:
        raise UndefinedTestError("rank correlation undefined for constant input")
    rho = float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    from scipy.stats import t as t_dist

    p = float(2.0 * t_dist.sf(abs(t), df=n - 2))
    return rho, min(1.0, p)


def welch_t_test(a, b):
    """Welch's unequal-variance t with Satterthwaite degrees of freedom."""
    xa = _clean(a, "a")
    xb = _clean(b, "b")
    na, nb = len(xa), len(xb)
    if na < 2 or nb < 2:
        raise UndefinedTestError("welch test needs at least 2 observations per sample")
    va = np.var(xa, ddof=1)
    vb = np.var(xb, ddof=1)
    if va == 0.0 and vb == 0.0:
        if np.mean(xa) == np.mean(xb):
            return 0.0, 1.0
        raise UndefinedTestError("welch test undefined: both samples have zero variance")
    se2 = va / na + vb / nb
    t = float((np.mean(xa) - np.mean(xb)) / np.sqrt(se2))
    df = se2**2 / (va**2 / (na**2 * (na - 1)) + vb**2 / (nb**2 * (nb - 1)))
    from scipy.stats import t as t_dist

    p = float(2.0 * t_dist.sf(abs(t), df=df))
    return t, min(1.0, p)


def _lmm_profile(theta, stats_by_group):
    """GLS beta, residual variance, and profiled ML log-likelihood at theta."""
    xtvx = np.zeros((2, 2))
    xtvy = np.zeros(2)
    ytvy = 0.0
    n_total = 0
    logdet = 0.0
    for n_i, sx, sy, sxx, sxy, syy in stats_by_group:
        c = theta / (1.0 + theta * n_i)
        xt1 = np.array([n_i, sx])
        xtvx += np.array([[n_i, sx], [sx, sxx]]) - c * np.outer(xt1, xt1)
        xtvy += np.array([sy, sxy]) - c * sy * xt1
        ytvy += syy - c * sy * sy
        n_total += int(n_i)
        logdet += np.log1p(theta * n_i)
    det = xtvx[0, 0] * xtvx[1, 1] - xtvx[0, 1] * xtvx[1, 0]
    scale = max(abs(xtvx).max(), 1.0)
    if abs(det) < 1e-12 * scale * scale:
        raise RankDeficiencyError("design is singular: regressor has no usable variation")
    beta = np.linalg.solve(xtvx, xtvy)
    rss = max(ytvy - 2.0 * beta @ xtvy + beta @ xtvx @ beta, 1e-300)
    sigma2 = rss / n_total
    loglik = -0.5 * (n_total * (np.log(2.0 * np.pi * sigma2) + 1.0) + logdet)
    return beta, sigma2, loglik, xtvx


def lmm_fit(y, x, groups, theta: float | None = None) -> LmmFit:
    """Random-intercept model y = b0 + b1 x + u_group + e by profiled ML.

    The variance ratio theta = var(u)/var(e) is profiled out on a log grid
    (zero included, so plain OLS is nested) and polished with a bounded
    scalar search. Pass `theta` to skip estimation and refit at that ratio.
    Wald intervals and p-values come from the plug-in GLS covariance.
    """
    ya = _clean(y, "y")
    xa = _clean(x, "x")
    garr = np.asarray(groups)
    if not (len(ya) == len(xa) == len(garr)):
        raise UndefinedTestError("response, regressor, and groups differ in length")
    uniq, inverse = np.unique(garr, return_inverse=True)
    if len(uniq) < 2:
        raise RankDeficiencyError("mixed model needs at least 2 groups")
    stats_by_group = []
    for gi in range(len(uniq)):
        sel = inverse == gi
        if sel.sum() < 3:
            raise RankDeficiencyError("mixed model needs at least 3 rows per group")
        xg = xa[sel]
        yg = ya[sel]
        stats_by_group.append(
            (float(sel.sum()), xg.sum(), yg.sum(), (xg * xg).sum(), (xg * yg).sum(), (yg * yg).sum())
        )

    if theta is not None:
        if theta < 0:
            raise UndefinedTestError("variance ratio must be non-negative")
        best_theta = float(theta)
    else:
        grid = np.concatenate([[0.0], np.logspace(-4.0, 4.0, 81)])
        lls = np.array([_lmm_profile(t, stats_by_group)[2] for t in grid])
        k = int(np.argmax(lls))
        best_theta = float(grid[k])
        if 0 < k < len(grid) - 1:
            lo, hi = grid[k - 1], grid[k + 1]
            res = minimize_scalar(
                lambda t: -_lmm_profile(t, stats_by_group)[2],
                bounds=(lo, hi),
                method="bounded",
                options={"xatol": 1e-10},
            )
            if np.isfinite(res.fun) and -res.fun >= lls[k]:
                best_theta = float(res.x)

    beta, sigma2, loglik, xtvx = _lmm_profile(best_theta, stats_by_group)
    cov = sigma2 * np.linalg.inv(xtvx)
    se = np.sqrt(np.diag(cov))
    zq = norm.ppf(0.975)
    ci = np.column_stack([beta - zq * se, beta + zq * se])
    with np.errstate(divide="ignore", invalid="ignore"):
        pvals = 2.0 * norm.sf(np.abs(beta) / se)
    pvals = np.where(se > 0, pvals, np.where(beta == 0, 1.0, 0.0))
    return LmmFit(
        beta=beta,
        beta_ci=ci,
        beta_p=np.minimum(pvals, 1.0),
        sigma2_residual=float(sigma2),
        sigma2_intercept=float(best_theta * sigma2),
        group_count=len(uniq),
        log_likelihood=float(loglik),
        theta=float(best_theta),
    )


def stat_report(test: str, statistic: float, p: float | None = None,
                ci=None, n=None, params=None) -> dict:
    """Uniform record shape for serialized statistical results."""
    return {
        "test": test,
        "statistic": float(statistic),
        "p": None if p is None else float(p),
        "ci": None if ci is None else [float(ci[0]), float(ci[1])],
        "n": None if n is None else int(n),
        "params": dict(params) if params else {},
    }
