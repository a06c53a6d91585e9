import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetpref.dataio import (
    ComparisonDataset,
    SyntheticConfig,
    build_gap_matrix,
    generate_theta,
    make_probabilities,
    sample_comparisons,
)
from hetpref.debias import SplitFit, debias_pipeline, nr_debias
from hetpref.estimator import estimate_pipeline
from hetpref.inference import (
    BootstrapConfig,
    agg_bootstrap_draws,
    agg_gap_test,
    agg_variance,
    aggregated_rank_intervals,
    bootstrap_agg_quantile,
    bootstrap_indiv_quantile,
    bootstrap_quantile,
    indiv_gap_test,
    indiv_variance,
    indiv_variance_matrix,
    indiv_variance_row,
    individual_rank_intervals,
    normal_quantile,
    one_sided_upper_ranks,
    pair_set,
    point_ranks,
    rank_intervals,
    restricted_tied_ranks,
    sure_screen_top_k,
    tied_rank_intervals,
    top_k_placement_test,
    top_k_select,
    write_rank_intervals,
)
from hetpref.pairspace import PairSpace, lex_index, sigmoid


def dense(M, p):
    """Every entry observed, outcomes at their conditional means."""
    d1, K = M.shape
    users, pairs = np.divmod(np.arange(d1 * K), K)
    d2 = int(round((1 + math.sqrt(1 + 8 * K)) / 2))
    return ComparisonDataset(d1, PairSpace(d2), users, pairs, sigmoid(M).ravel(), np.asarray(p, float))


def fitted(d2, seed, p=0.8, split=False, theta=None):
    rng = np.random.default_rng(seed)
    if theta is None:
        theta = generate_theta(SyntheticConfig(d2=d2), rng)
    data = sample_comparisons(theta, make_probabilities(theta.shape[0], p), rng)
    bundle = estimate_pipeline(data)
    deb = debias_pipeline(data, bundle, rng=rng if split else None)
    return theta, data, bundle, deb


def test_normal_quantile():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
    assert normal_quantile(0.5) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(B=99)
    for alpha in (0.0, 1.0):
        with pytest.raises(ValueError):
            BootstrapConfig(alpha=alpha)


def test_agg_variance_examples():
    M = np.zeros((4, 3))
    assert agg_variance(M, dense(M, [0.5] * 4), 1) == pytest.approx(4 / (4 * 0.5))
    M8 = np.zeros((8, 3))
    assert agg_variance(M8, dense(M8, [0.5] * 8), 2) == pytest.approx(agg_variance(M, dense(M, [0.5] * 4), 2) / 2)
    M2 = np.array([[0.0], [math.log(3)]])
    assert agg_variance(M2, dense(M2, [0.5, 1.0]), 1) == pytest.approx(10 / 3, rel=1e-12)


def test_agg_gap_test_examples():
    M = np.zeros((5, 3))
    data = dense(M, [0.5] * 5)
    M_nr = np.full((5, 3), 0.7)
    res = agg_gap_test(M_nr, M, data, 2)
    assert res.point == pytest.approx(0.7)
    half = (res.ci[1] - res.ci[0]) / 2
    assert half == pytest.approx(1.959964 * math.sqrt(res.v_hat), rel=1e-6)
    assert res.ci[0] < res.point < res.ci[1]
    assert res.z == pytest.approx(0.7 / math.sqrt(res.v_hat))


def test_agg_gap_null_size():
    # items 1 and 2 identical for every user: the gap test should reject about 5% of the time
    rejections = 0
    reps = 500
    k = lex_index(PairSpace(20), 1, 2)
    for seed in range(reps):
        rng = np.random.default_rng(seed)
        theta = generate_theta(SyntheticConfig(d2=20), rng)
        theta[:, 1] = theta[:, 0]
        theta -= theta.mean(axis=1, keepdims=True)
        data = sample_comparisons(theta, np.full(theta.shape[0], 0.8), rng)
        b = estimate_pipeline(data)
        rejections += agg_gap_test(nr_debias(b.M_hat, data), b.M_hat, data, k).p_value < 0.05
    assert 0.02 <= rejections / reps <= 0.09


def test_indiv_variance_single_terms():
    d1, K = 3, 6
    M = np.zeros((d1, K))
    data = dense(M, [0.5] * d1)
    U = np.zeros((d1, 1))
    U[1, 0] = 1.0
    V = np.zeros((K, 1))
    V[4, 0] = 1.0
    w1, w2, w = indiv_variance(U, V, M, data, 2, 5)
    assert (w1, w2, w) == (8.0, 8.0, 16.0)


def test_indiv_variance_scales_with_rate():
    rng = np.random.default_rng(0)
    U = np.linalg.qr(rng.normal(size=(7, 2)))[0]
    V = np.linalg.qr(rng.normal(size=(10, 2)))[0]
    M = rng.normal(size=(7, 10))
    p = rng.uniform(0.3, 0.9, size=7)
    w1, w2 = indiv_variance_matrix(U, V, M, p)
    h1, h2 = indiv_variance_matrix(U, V, M, p / 2)
    np.testing.assert_allclose(h1 + h2, 2 * (w1 + w2), rtol=1e-12)
    assert np.all(w1 >= 0) and np.all(w2 >= 0)
    row = indiv_variance_row(U, V, M, p, 3)
    np.testing.assert_allclose(row, (w1 + w2)[2], rtol=1e-12)


def test_indiv_variance_uses_each_users_rate():
    # the user-side term weights user i' by its own rate
    M = np.zeros((2, 1))
    U = np.full((2, 1), 1 / math.sqrt(2))
    V = np.ones((1, 1))
    w1, w2 = indiv_variance_matrix(U, V, M, np.array([1.0, 0.25]))
    assert w2[0, 0] == pytest.approx(0.25 * (4 / 1.0 + 4 / 0.25))


def test_indiv_gap_test_examples():
    M = np.zeros((2, 3))
    res = indiv_gap_test(M, 1.0, 1, 1)
    assert res.ci == pytest.approx((-1.959964, 1.959964), abs=1e-6)
    wider = indiv_gap_test(M, 2.0, 1, 1)
    assert wider.ci[1] - wider.ci[0] > res.ci[1] - res.ci[0]
    with pytest.raises(ValueError):
        indiv_gap_test(M, 0.0, 1, 1)


@pytest.mark.xfail(
    strict=True,
    reason="at d2=20 the subspace noise exceeds the second singular value; coverage is near 0.8",
)
def test_indiv_gap_coverage():
    k = lex_index(PairSpace(20), 1, 2)
    hits = 0
    reps = 300
    for seed in range(reps):
        theta, data, bundle, deb = fitted(20, 1000 + seed, split=True)
        w = indiv_variance_row(deb.split.U1, deb.split.V1, bundle.M_hat, data.p, 1)[k - 1]
        lo, hi = indiv_gap_test(deb.M_proj, w, 1, k).ci
        hits += lo <= build_gap_matrix(theta)[0, k - 1] <= hi
    assert hits / reps >= 0.90


def test_pair_set_orientation():
    ps = pair_set(PairSpace(4), [2], [1, 2, 3, 4])
    assert ps.j2.tolist() == [1, 3, 4]
    assert ps.sign.tolist() == [-1, 1, 1]
    assert (ps.k0 + 1).tolist() == [1, 4, 5]
    with pytest.raises(ValueError):
        pair_set(PairSpace(4), [5])
    with pytest.raises(ValueError):
        pair_set(PairSpace(4), [1], [2, 3])


def test_bootstrap_quantile_order_statistic():
    draws = np.arange(1, 101, dtype=float)
    # ceil(0.95 * 100) = 95th smallest
    assert bootstrap_quantile(draws, 0.05) == 95.0
    assert bootstrap_quantile(np.arange(1, 1001, dtype=float), 0.1) == 900.0


def test_agg_bootstrap_single_pair_is_normal_quantile():
    _, data, bundle, deb = fitted(20, 3)
    G = bootstrap_agg_quantile(bundle.M_hat, data, [1], [1, 2], BootstrapConfig(B=5000, seed=1))
    assert 1.80 <= G <= 2.15


def test_agg_bootstrap_monotone_and_deterministic():
    _, data, bundle, _ = fitted(12, 4)
    cfg = BootstrapConfig(B=300, seed=9)
    sizes = [[1, 2], [1, 2, 3, 4], list(range(1, 13))]
    Gs = [bootstrap_agg_quantile(bundle.M_hat, data, [1], K_set, cfg) for K_set in sizes]
    assert Gs[0] <= Gs[1] <= Gs[2]
    # replicate by replicate, not just in the quantile
    d_small = agg_bootstrap_draws(bundle.M_hat, data, pair_set(data.space, [1], sizes[0]), cfg)
    d_big = agg_bootstrap_draws(bundle.M_hat, data, pair_set(data.space, [1], sizes[2]), cfg)
    # identical multipliers; only matmul rounding differs
    assert np.all(d_small <= d_big + 1e-12)
    again = bootstrap_agg_quantile(bundle.M_hat, data, [1], sizes[2], cfg)
    assert again == Gs[2]


def test_agg_bootstrap_alpha_monotone():
    _, data, bundle, deb = fitted(12, 5)
    G10 = bootstrap_agg_quantile(bundle.M_hat, data, [1], None, BootstrapConfig(B=400, alpha=0.10, seed=2))
    G05 = bootstrap_agg_quantile(bundle.M_hat, data, [1], None, BootstrapConfig(B=400, alpha=0.05, seed=2))
    assert G10 <= G05
    a = aggregated_rank_intervals(deb.M_nr, bundle.M_hat, data, [1, 2, 3], None, BootstrapConfig(B=400, alpha=0.10, seed=2))
    b = aggregated_rank_intervals(deb.M_nr, bundle.M_hat, data, [1, 2, 3], None, BootstrapConfig(B=400, alpha=0.05, seed=2))
    assert np.all(a.upper >= b.upper) and np.all(a.lower <= b.lower)


def test_indiv_bootstrap_zero_residuals():
    d1, d2 = 6, 5
    space = PairSpace(d2)
    rng = np.random.default_rng(6)
    M1 = rng.normal(size=(d1, space.K))
    M2 = rng.normal(size=(d1, space.K))
    idx = rng.permutation(d1 * space.K)
    half = idx.size // 2
    u1, k1 = np.divmod(idx[:half], space.K)
    u2, k2 = np.divmod(idx[half:], space.K)
    p = np.full(d1, 1.0)
    # each half's outcomes sit at the other half's pilot probabilities
    S1 = ComparisonDataset(d1, space, u1, k1, sigmoid(M2[u1, k1]), p)
    S2 = ComparisonDataset(d1, space, u2, k2, sigmoid(M1[u2, k2]), p)
    U = np.linalg.qr(rng.normal(size=(d1, 2)))[0]
    V = np.linalg.qr(rng.normal(size=(space.K, 2)))[0]
    fit = SplitFit(
        S1, S2, SimpleNamespace(M_hat=M1), SimpleNamespace(M_hat=M2), M1, M2, U, V, U, V
    )
    G = bootstrap_indiv_quantile(fit, 2, [1], None, np.ones(space.K), BootstrapConfig(B=200))
    assert G == pytest.approx(0.0, abs=1e-12)


def test_indiv_bootstrap_needs_split():
    with pytest.raises(ValueError, match="split"):
        bootstrap_indiv_quantile(None, 1, [1], None, np.ones(3), BootstrapConfig())


def _indiv_single_pair_quantile(d2, seed, B):
    _, data, bundle, deb = fitted(d2, seed, split=True)
    w = indiv_variance_row(deb.split.U1, deb.split.V1, bundle.M_hat, data.p, 1)
    return bootstrap_indiv_quantile(deb.split, 1, [1], [1, 2], w, BootstrapConfig(B=B, seed=3))


def test_indiv_bootstrap_deterministic():
    _, data, bundle, deb = fitted(10, 7, split=True)
    w = indiv_variance_row(deb.split.U1, deb.split.V1, bundle.M_hat, data.p, 1)
    cfg = BootstrapConfig(B=300, seed=3)
    G = bootstrap_indiv_quantile(deb.split, 1, [1], None, w, cfg)
    assert bootstrap_indiv_quantile(deb.split, 1, [1], None, w, cfg) == G


@pytest.mark.xfail(
    strict=True,
    reason="at d2=20 the halves' second singular directions are nearly orthogonal, inflating the multiplier variance",
)
def test_indiv_bootstrap_single_pair_d2_20():
    assert 1.5 <= _indiv_single_pair_quantile(20, 7, 5000) <= 2.5


def test_indiv_bootstrap_single_pair_d2_30():
    Gs = [_indiv_single_pair_quantile(30, seed, 5000) for seed in range(7, 11)]
    assert 1.5 <= np.median(Gs) <= 2.5


def test_rank_interval_extremes():
    space = PairSpace(6)
    theta = np.array([[0.5, -1.0, 2.0, 0.1, -0.3, 0.8]])
    gaps = build_gap_matrix(theta)[0]
    var = np.full(space.K, 0.01)
    wide = rank_intervals(gaps, var, 1e9, space, range(1, 7))
    assert np.all(wide.upper == 1) and np.all(wide.lower == 6)
    tight = rank_intervals(gaps, var, 0.0, space, range(1, 7))
    ranks = point_ranks(theta[0])
    np.testing.assert_array_equal(tight.upper, ranks)
    np.testing.assert_array_equal(tight.lower, ranks)
    with pytest.raises(ValueError):
        rank_intervals(gaps, var, -1.0, space, [1])


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**32 - 1), st.floats(0.0, 10.0))
def test_rank_interval_containment(d2, seed, G):
    rng = np.random.default_rng(seed)
    space = PairSpace(d2)
    scores = rng.normal(size=d2)
    gaps = build_gap_matrix(scores[None, :])[0]
    var = rng.uniform(0.01, 1.0, size=space.K)
    ri = rank_intervals(gaps, var, G, space, range(1, d2 + 1))
    ranks = point_ranks(scores)
    assert np.all(1 <= ri.upper)
    assert np.all(ri.upper <= ranks) and np.all(ranks <= ri.lower)
    assert np.all(ri.lower <= d2)


def test_rank_interval_counts_follow_definition():
    space = PairSpace(4)
    gaps = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])  # item 1 ahead of the rest
    ri = rank_intervals(gaps, np.full(6, 0.04), 2.0, space, [1, 2])
    # C for item 1 vs others: 1 +- 0.4 > 0, so lower = 4 - 3 = 1
    assert (ri.upper[0], ri.lower[0]) == (1, 1)
    # item 2: item 1 significantly better, others unresolved
    assert (ri.upper[1], ri.lower[1]) == (2, 4)
    np.testing.assert_array_equal(ri.lengths, [1, 3])


def test_simultaneous_coverage_of_gaps():
    covered = 0
    reps = 100
    J = list(range(1, 21))
    for seed in range(reps):
        theta, data, bundle, deb = fitted(20, 2000 + seed)
        ri = aggregated_rank_intervals(deb.M_nr, bundle.M_hat, data, J, J, BootstrapConfig(B=300, seed=seed))
        true = theta.mean(axis=0)
        diff = true[ri.J - 1][:, None] - true[ri.K_set - 1][None, :]
        off = ~np.eye(20, dtype=bool)
        covered += np.all((ri.C_L[off] <= diff[off]) & (diff[off] <= ri.C_U[off]))
    assert covered / reps >= 0.90


def test_ci_length_and_coverage_at_full_bootstrap():
    lengths, hits = [], 0
    for seed in range(100):
        theta, data, bundle, deb = fitted(20, 3000 + seed)
        ri = aggregated_rank_intervals(deb.M_nr, bundle.M_hat, data, [1], None, BootstrapConfig(B=2000, seed=seed))
        lo, hi = restricted_tied_ranks(theta.mean(axis=0), ri.J, ri.K_set)
        lengths.append(ri.lower[0] - ri.upper[0])
        hits += bool(ri.covers(lo, hi)[0])
    assert 7 <= np.mean(lengths) <= 14
    assert hits / 100 >= 0.90


def test_individual_rank_intervals_shape():
    theta, data, bundle, deb = fitted(10, 8, split=True)
    ri = individual_rank_intervals(deb.split, deb.M_proj, bundle.M_hat, data, 2, [1, 4], None, BootstrapConfig(B=200))
    assert ri.scope == "user 2"
    assert np.all((1 <= ri.upper) & (ri.upper <= ri.lower) & (ri.lower <= 10))
    with pytest.raises(ValueError):
        individual_rank_intervals(deb.split, deb.M_proj, bundle.M_hat, data, 2, [1], None, BootstrapConfig(B=200), 3)


def test_top_k_select_examples():
    assert top_k_select(np.array([[3.0, 1.0, 2.0]]), 2, user=1) == [1, 3]
    assert top_k_select(np.array([[3.0, 1.0, 2.0]]), 3, user=1) == [1, 2, 3]
    # ties go to the smaller id
    assert top_k_select(np.array([[1.0, 1.0, 0.0]]), 1, user=1) == [1]
    with pytest.raises(ValueError):
        top_k_select(np.zeros((1, 3)), 0)


def test_one_sided_ranks_extremes():
    space = PairSpace(5)
    scores = np.array([2.0, 1.0, 0.0, -1.0, -2.0])
    gaps = build_gap_matrix(scores[None, :])[0]
    pairs = pair_set(space, range(1, 6))
    var = np.full(space.K, 0.01)
    np.testing.assert_array_equal(one_sided_upper_ranks(gaps, var, 1e9, pairs), 1)
    np.testing.assert_array_equal(one_sided_upper_ranks(gaps, var, 0.0, pairs), [1, 2, 3, 4, 5])


def test_placement_and_screening_on_strong_signal():
    d1, d2 = 60, 5
    theta = np.tile(np.array([3.0, 1.5, 0.0, -1.5, -3.0]), (d1, 1))
    _, data, bundle, deb = fitted(d2, 9, p=1.0, theta=theta)
    cfg = BootstrapConfig(B=300, seed=4)
    best = top_k_placement_test(deb.M_nr, bundle.M_hat, data, 1, 1, cfg)
    assert not best.reject and best.r_upper == 1
    worst = top_k_placement_test(deb.M_nr, bundle.M_hat, data, 5, 1, cfg)
    assert worst.reject
    screened, G = sure_screen_top_k(deb.M_nr, bundle.M_hat, data, 5, cfg)
    assert screened == [1, 2, 3, 4, 5] and G > 0
    top1, _ = sure_screen_top_k(deb.M_nr, bundle.M_hat, data, 1, cfg)
    assert 1 in top1


def test_screening_covers_top_k_standard_design():
    hits = 0
    for seed in range(100):
        theta, data, bundle, deb = fitted(20, 4000 + seed)
        screened, _ = sure_screen_top_k(deb.M_nr, bundle.M_hat, data, 3, BootstrapConfig(B=300, seed=seed))
        hits += set(top_k_select(theta, 3)) <= set(screened)
    assert hits / 100 >= 0.90


def test_tied_rank_intervals():
    lo, hi = tied_rank_intervals(np.array([3.0, 5.0, 3.0, 3.0, 1.0]))
    np.testing.assert_array_equal(lo, [2, 1, 2, 2, 5])
    np.testing.assert_array_equal(hi, [4, 1, 4, 4, 5])
    lo, hi = restricted_tied_ranks(np.array([3.0, 5.0, 3.0, 1.0]), np.array([1]), np.array([1, 2, 4]))
    assert (lo[0], hi[0]) == (2, 2)


def test_rank_interval_csv(tmp_path):
    space = PairSpace(4)
    gaps = build_gap_matrix(np.array([[1.0, 0.0, -1.0, 0.5]]))[0]
    ri = rank_intervals(gaps, np.full(6, 0.01), 0.0, space, [1, 2])
    path = tmp_path / "ri.csv"
    write_rank_intervals(path, ri, true_rank=[(1, 1), (2, 3)])
    assert path.read_text().splitlines() == ["item,r_upper,r_lower,true_rank", "1,1,1,1", "2,3,3,2-3"]
    json.dumps(ri.meta)
