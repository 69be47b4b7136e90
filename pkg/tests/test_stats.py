from itertools import product

import numpy as np
import pytest
import scipy.stats as sps

from drivestress.errors import (
    InsufficientDataError,
    RankDeficiencyError,
    UndefinedMetricError,
    UndefinedTestError,
)
from drivestress.features import FeatureFrame
from drivestress.stats import (
    AurocResult,
    auroc,
    auroc_result,
    bootstrap_ci,
    fdr_bh,
    lmm_fit,
    permutation_pvalue,
    permute_session_labels,
    spearman_rho,
    stat_report,
    welch_t_test,
    wilcoxon_signed_rank,
)


def auroc_oracle(pos, neg):
    wins = ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0

    def test_all_ties(self):
        assert auroc([0.5, 0.5], [0.5, 0.5]) == 0.5

    def test_three_quarters(self):
        assert auroc([0.7, 0.4], [0.5, 0.3]) == 0.75

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            pos = rng.normal(0.3, 1.0, 23)
            neg = rng.normal(0.0, 1.0, 31)
            # inject exact ties across classes
            neg[:4] = pos[:4]
            np.testing.assert_allclose(auroc(pos, neg), auroc_oracle(pos, neg), rtol=1e-12)

    def test_complement_property(self):
        rng = np.random.default_rng(1)
        pos = rng.normal(size=20)
        neg = rng.normal(size=15)
        np.testing.assert_allclose(auroc(pos, neg), 1.0 - auroc(neg, pos), rtol=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(2)
        pos = rng.normal(size=20)
        neg = rng.normal(size=15)
        np.testing.assert_allclose(auroc(pos, neg), auroc(np.exp(pos), np.exp(neg)), rtol=1e-12)

    def test_empty_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auroc([], [0.1])

    def test_nan_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.5, np.nan], [0.1])


class TestBootstrapCi:
    def test_constant_data_zero_width(self):
        low, high = bootstrap_ci(np.full(50, 3.25), np.mean, n_iter=200, seed=0)
        assert low == high == 3.25

    def test_mean_interval_width_near_analytic(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, 1000)
        low, high = bootstrap_ci(x, np.mean, n_iter=1000, seed=1)
        width = high - low
        analytic = 4.0 * np.std(x) / np.sqrt(len(x))
        assert analytic / 1.5 < width < analytic * 1.5

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=80)
        assert bootstrap_ci(x, np.mean, seed=7) == bootstrap_ci(x, np.mean, seed=7)

    def test_interval_contains_point_mean(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=120)
        low, high = bootstrap_ci(x, np.mean, seed=2)
        assert low <= np.mean(x) <= high

    def test_too_few_observations(self):
        with pytest.raises(InsufficientDataError):
            bootstrap_ci([1.0], np.mean)


class TestAurocResult:
    def test_perfect_separation_unit_interval(self):
        res = auroc_result(np.full(30, 1.0), np.zeros(30), n_iter=200, seed=0)
        assert res == AurocResult(auroc=1.0, ci_low=1.0, ci_high=1.0, n_pos=30, n_neg=30)

    def test_interval_brackets_point(self):
        rng = np.random.default_rng(6)
        res = auroc_result(rng.normal(0.5, 1, 40), rng.normal(0, 1, 40), n_iter=300, seed=1)
        assert res.ci_low <= res.auroc <= res.ci_high
        assert (res.n_pos, res.n_neg) == (40, 40)


def make_frame(subject, scores, stress_mask, excluded_mask=None):
    n = len(scores)
    labels = np.where(stress_mask, "stress", "free").astype("<U8")
    if excluded_mask is not None:
        labels[excluded_mask] = "excluded"
    return FeatureFrame(
        timestamps_s=np.arange(n, dtype=float),
        values=np.asarray(scores, dtype=float)[:, None],
        columns=("score",),
        labels=labels,
        subject_id=subject,
        session_kind="Irritation",
    )


def scores_pipeline(frames):
    """Evaluation closure: feature column 0 is the model score."""
    scores = np.concatenate([f.values[f.training_mask(), 0] for f in frames])
    labels = np.concatenate([f.labels[f.training_mask()] == "stress" for f in frames])
    return scores, labels


class TestPermutationPvalue:
    @staticmethod
    def cohort(seed, n_frames=10, rows=40):
        rng = np.random.default_rng(seed)
        frames = []
        for i in range(n_frames):
            stress = np.arange(rows) >= rows // 2
            # scores track the true block labels; unique noise breaks ties
            scores = stress.astype(float) + 0.01 * rng.random(rows)
            frames.append(make_frame(f"s{i:02d}", scores, stress))
        return frames

    def test_separating_scores_reach_floor(self):
        frames = self.cohort(seed=0)
        p = permutation_pvalue(frames, scores_pipeline, n_models=10, n_bootstrap=20, seed=0)
        assert p == 1.0 / (1 + 10 * 20)

    def test_chance_pipeline_uniform_p(self):
        rng = np.random.default_rng(7)
        ps = []
        for trial in range(20):
            frames = []
            for i in range(8):
                stress = np.arange(30) >= 15
                scores = rng.random(30)  # independent of labels
                frames.append(make_frame(f"s{i:02d}", scores, stress))
            ps.append(
                permutation_pvalue(frames, scores_pipeline, n_models=8, n_bootstrap=8, seed=trial)
            )
        assert 0.4 <= np.mean(ps) <= 0.6

    def test_anti_separating_scores_give_high_p(self):
        frames = self.cohort(seed=1)
        # invert every score so the observed model is maximally wrong
        flipped = [
            make_frame(f.subject_id, -f.values[:, 0], f.labels == "stress") for f in frames
        ]
        p = permutation_pvalue(flipped, scores_pipeline, n_models=10, n_bootstrap=20, seed=0)
        assert p > 0.99

    def test_deterministic(self):
        frames = self.cohort(seed=2, n_frames=4)
        a = permutation_pvalue(frames, scores_pipeline, n_models=5, n_bootstrap=10, seed=3)
        b = permutation_pvalue(frames, scores_pipeline, n_models=5, n_bootstrap=10, seed=3)
        assert a == b

    def test_flip_swaps_blocks_only(self):
        frame = make_frame(
            "s00",
            np.arange(10, dtype=float),
            np.arange(10) >= 5,
            excluded_mask=np.arange(10) < 2,
        )
        flipped = permute_session_labels(frame, True)
        assert list(flipped.labels[:2]) == ["excluded", "excluded"]
        assert all(flipped.labels[2:5] == "stress")
        assert all(flipped.labels[5:] == "free")
        same = permute_session_labels(frame, False)
        assert all(same.labels == frame.labels)


def bh_oracle(pvalues, alpha):
    m = len(pvalues)
    order = sorted(range(m), key=lambda i: pvalues[i])
    reject = [False] * m
    k = 0
    for rank, i in enumerate(order, start=1):
        if pvalues[i] <= rank * alpha / m:
            k = rank
    for rank, i in enumerate(order, start=1):
        if rank <= k:
            reject[i] = True
    adjusted = [None] * m
    best = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        best = min(best, m * pvalues[i] / rank)
        adjusted[i] = best
    return reject, adjusted


class TestFdrBh:
    def test_all_rejected_example(self):
        reject, adjusted = fdr_bh([0.01, 0.04, 0.03, 0.005], alpha=0.05)
        assert reject.all()
        assert np.all(adjusted <= 0.05)

    def test_all_ones(self):
        reject, adjusted = fdr_bh([1.0, 1.0, 1.0])
        assert not reject.any()
        np.testing.assert_allclose(adjusted, 1.0)

    def test_single_p_identity(self):
        reject, adjusted = fdr_bh([0.04], alpha=0.05)
        assert reject[0]
        np.testing.assert_allclose(adjusted, [0.04])

    def test_matches_hand_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(10)[::1]:
            p = rng.uniform(0, 1, rng.integers(2, 12))
            reject, adjusted = fdr_bh(p, alpha=0.1)
            oracle_reject, oracle_adjusted = bh_oracle(list(p), 0.1)
            assert list(reject) == oracle_reject
            np.testing.assert_allclose(adjusted, oracle_adjusted, rtol=1e-12)

    def test_lowering_a_pvalue_never_unrejects(self):
        rng = np.random.default_rng(9)
        p = rng.uniform(0, 1, 10)
        base_reject, _ = fdr_bh(p, alpha=0.2)
        for i in range(10):
            lowered = p.copy()
            lowered[i] = lowered[i] / 10
            new_reject, _ = fdr_bh(lowered, alpha=0.2)
            assert np.all(new_reject[base_reject])

    def test_invalid_p_rejected(self):
        with pytest.raises(UndefinedTestError):
            fdr_bh([0.5, 1.2])


def wilcoxon_oracle(diffs, alternative):
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    n = len(d)
    ws = []
    for signs in product([0, 1], repeat=n):
        ws.append(sum(r for r, s in zip(ranks, signs) if s))
    ws = np.asarray(ws)
    p_ge = np.mean(ws >= w_obs - 1e-12)
    p_le = np.mean(ws <= w_obs + 1e-12)
    if alternative == "greater":
        return p_ge
    if alternative == "less":
        return p_le
    return min(1.0, 2.0 * min(p_ge, p_le))


class TestWilcoxon:
    def test_all_positive_extreme(self):
        p = wilcoxon_signed_rank(np.arange(1.0, 11.0), alternative="greater")
        np.testing.assert_allclose(p, 1.0 / 1024.0, rtol=1e-12)

    def test_symmetric_pairs_two_sided_one(self):
        p = wilcoxon_signed_rank([1.0, -1.0, 2.0, -2.0, 3.0, -3.0], alternative="two_sided")
        assert p == 1.0

    def test_fixed_case_matches_enumeration(self):
        d = [1.0, 2.0, 3.0, -1.0, 4.0, 5.0]
        for alt in ("greater", "less", "two_sided"):
            np.testing.assert_allclose(
                wilcoxon_signed_rank(d, alternative=alt), wilcoxon_oracle(d, alt), rtol=1e-12
            )

    def test_random_tied_cases_match_enumeration(self):
        rng = np.random.default_rng(10)
        for _ in range(6):
            n = int(rng.integers(5, 12))
            d = rng.integers(-4, 5, n).astype(float)
            if np.all(d == 0) or np.count_nonzero(d) < 5:
                continue
            for alt in ("greater", "less", "two_sided"):
                np.testing.assert_allclose(
                    wilcoxon_signed_rank(d, alternative=alt), wilcoxon_oracle(d, alt), rtol=1e-12
                )

    def test_large_n_matches_reference_approximation(self):
        rng = np.random.default_rng(11)
        d = np.round(rng.normal(0.3, 1.0, 40), 1)
        d = d[d != 0]
        for mine, theirs in (("greater", "greater"), ("less", "less"), ("two_sided", "two-sided")):
            want = sps.wilcoxon(d, alternative=theirs, correction=True, method="approx").pvalue
            np.testing.assert_allclose(wilcoxon_signed_rank(d, alternative=mine), want, rtol=1e-9)

    def test_all_zero_rejected(self):
        with pytest.raises(UndefinedTestError):
            wilcoxon_signed_rank(np.zeros(10))

    def test_too_few_nonzero(self):
        with pytest.raises(UndefinedTestError):
            wilcoxon_signed_rank([1.0, -2.0, 3.0, 0.0, 0.0])


class TestSpearman:
    def test_monotone_increasing(self):
        rho, p = spearman_rho(np.arange(10.0), np.arange(10.0) ** 3)
        assert rho == 1.0
        assert p == 0.0

    def test_monotone_decreasing(self):
        rho, _ = spearman_rho(np.arange(10.0), -np.arange(10.0))
        assert rho == -1.0

    def test_fixed_case_matches_reference(self):
        x = np.array([3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0, 5.5, 3.5])
        y = np.array([2.0, 7.0, 1.0, 8.0, 2.5, 0.5, 6.0, 1.2, 3.0, 4.0])
        rho, p = spearman_rho(x, y)
        want = sps.spearmanr(x, y)
        np.testing.assert_allclose(rho, want.statistic, rtol=1e-12)
        np.testing.assert_allclose(p, want.pvalue, rtol=1e-9)

    def test_ties_match_reference(self):
        rng = np.random.default_rng(12)
        x = rng.integers(0, 5, 30).astype(float)
        y = x + rng.integers(0, 3, 30)
        rho, p = spearman_rho(x, y)
        want = sps.spearmanr(x, y)
        np.testing.assert_allclose(rho, want.statistic, rtol=1e-12)
        np.testing.assert_allclose(p, want.pvalue, rtol=1e-9)

    def test_constant_input_rejected(self):
        with pytest.raises(UndefinedTestError):
            spearman_rho(np.ones(10), np.arange(10.0))


class TestWelch:
    def test_identical_samples(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        t, p = welch_t_test(x, x.copy())
        assert t == 0.0
        assert p == 1.0

    def test_shifted_normals_significant(self):
        rng = np.random.default_rng(13)
        a = rng.normal(0.0, 1.0, 50)
        b = rng.normal(2.0, 1.0, 50)
        _, p = welch_t_test(a, b)
        assert p < 0.001

    def test_matches_reference(self):
        a = np.array([27.5, 21.0, 19.0, 23.6, 17.0, 17.9, 16.9, 20.1, 21.9, 22.6, 23.1, 19.6])
        b = np.array([27.1, 22.0, 20.8, 23.4, 23.4, 23.5, 25.8, 22.0, 24.8, 20.2, 21.9, 22.1])
        t, p = welch_t_test(a, b)
        want = sps.ttest_ind(a, b, equal_var=False)
        np.testing.assert_allclose(t, want.statistic, rtol=1e-12)
        np.testing.assert_allclose(p, want.pvalue, rtol=1e-12)

    def test_double_zero_variance_rejected(self):
        with pytest.raises(UndefinedTestError):
            welch_t_test([2.0, 2.0, 2.0], [3.0, 3.0])


def dense_lmm_loglik(y, x, groups, theta):
    """Independent dense-matrix evaluation of the profiled ML objective."""
    y = np.asarray(y, dtype=float)
    X = np.column_stack([np.ones_like(y), np.asarray(x, dtype=float)])
    uniq, inv = np.unique(groups, return_inverse=True)
    n = len(y)
    V = np.eye(n)
    for gi in range(len(uniq)):
        sel = np.flatnonzero(inv == gi)
        V[np.ix_(sel, sel)] += theta
    Vi = np.linalg.inv(V)
    beta = np.linalg.solve(X.T @ Vi @ X, X.T @ Vi @ y)
    r = y - X @ beta
    sigma2 = (r @ Vi @ r) / n
    _, logdet = np.linalg.slogdet(V)
    ll = -0.5 * (n * (np.log(2 * np.pi * sigma2) + 1.0) + logdet)
    return beta, sigma2, ll


def simulate_lmm(seed, beta1=-0.372, sigma_u=1.0, sigma_e=0.5, n_groups=20, rows=100):
    rng = np.random.default_rng(seed)
    groups = np.repeat(np.arange(n_groups), rows)
    x = rng.normal(size=n_groups * rows)
    u = sigma_u * rng.standard_normal(n_groups)
    y = 1.5 + beta1 * x + u[groups] + sigma_e * rng.standard_normal(len(x))
    return y, x, groups


class TestLmm:
    def test_reduces_to_ols_without_group_variance(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=300)
        y = 2.0 + 0.7 * x + 0.3 * rng.standard_normal(300)
        groups = np.repeat(np.arange(10), 30)
        fit = lmm_fit(y, x, groups)
        ols_slope = np.polyfit(x, y, 1)[0]
        np.testing.assert_allclose(fit.beta[1], ols_slope, atol=1e-6)

    def test_matches_dense_oracle(self):
        y, x, groups = simulate_lmm(seed=0, n_groups=8, rows=12)
        fit = lmm_fit(y, x, groups)
        beta_d, sigma2_d, ll_d = dense_lmm_loglik(y, x, groups, fit.theta)
        np.testing.assert_allclose(fit.beta, beta_d, rtol=1e-8)
        np.testing.assert_allclose(fit.sigma2_residual, sigma2_d, rtol=1e-8)
        np.testing.assert_allclose(fit.log_likelihood, ll_d, rtol=1e-8)
        # the chosen ratio beats a fine independent grid
        for theta in np.logspace(-3, 3, 40):
            assert fit.log_likelihood >= dense_lmm_loglik(y, x, groups, theta)[2] - 1e-6

    def test_monte_carlo_ci_coverage(self):
        covered = 0
        for seed in range(100):
            y, x, groups = simulate_lmm(seed)
            fit = lmm_fit(y, x, groups)
            lo, hi = fit.beta_ci[1]
            covered += lo <= -0.372 <= hi
        assert covered >= 90

    def test_variance_components_recovered(self):
        y, x, groups = simulate_lmm(seed=42)
        fit = lmm_fit(y, x, groups)
        assert 0.5 < fit.sigma2_intercept < 2.0
        assert 0.125 < fit.sigma2_residual < 0.5
        assert fit.group_count == 20

    def test_group_shift_absorbed_at_fixed_ratio(self):
        y, x, groups = simulate_lmm(seed=3, n_groups=6, rows=40)
        base = lmm_fit(y, x, groups, theta=1e6)
        shifted = y.copy()
        shifted[groups == 2] += 5.0
        moved = lmm_fit(shifted, x, groups, theta=1e6)
        np.testing.assert_allclose(base.beta[1], moved.beta[1], atol=1e-6)

    def test_profiled_optimum_dominates_ols_likelihood(self):
        y, x, groups = simulate_lmm(seed=7, n_groups=10, rows=20)
        free = lmm_fit(y, x, groups)
        ols = lmm_fit(y, x, groups, theta=0.0)
        assert free.log_likelihood >= ols.log_likelihood

    def test_too_few_groups(self):
        with pytest.raises(RankDeficiencyError):
            lmm_fit(np.arange(10.0), np.arange(10.0), np.zeros(10))

    def test_too_few_rows_per_group(self):
        with pytest.raises(RankDeficiencyError):
            lmm_fit(np.arange(4.0), np.arange(4.0), np.array([0, 0, 1, 1]))

    def test_constant_regressor_rejected(self):
        rng = np.random.default_rng(15)
        with pytest.raises(RankDeficiencyError):
            lmm_fit(rng.normal(size=30), np.ones(30), np.repeat(np.arange(5), 6))


class TestStatReport:
    def test_shape(self):
        rec = stat_report("welch", 1.5, p=0.02, ci=(0.1, 0.9), n=20, params={"alt": "two_sided"})
        assert rec == {
            "test": "welch",
            "statistic": 1.5,
            "p": 0.02,
            "ci": [0.1, 0.9],
            "n": 20,
            "params": {"alt": "two_sided"},
        }
