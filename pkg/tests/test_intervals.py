import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cmcboot.bootstrap import BootstrapConfig, Method, run_ensemble
from cmcboot.bellman import bootstrap_targets, solve_ope
from cmcboot.core import Policy, SeedSpec, simulate_episodes
from cmcboot.counting import count, estimate, repaired_kernel
from cmcboot.intervals import (CIMethod, ConfidenceInterval, EmptySamples, covers,
                               empirical_quantile, percentile_ci, pivot_ci, quantile_pair)

samples_st = st.lists(st.integers(-1000, 1000).map(lambda x: x / 8), min_size=1, max_size=60)
alpha_st = st.floats(0.0, 1.0)


def test_quantile_examples():
    assert empirical_quantile([3, 1, 2], 0.5) == 2
    assert empirical_quantile([10, 20, 30, 40], 0.975) == 40
    assert empirical_quantile([4.2] * 7, 0.3) == 4.2


def test_quantile_errors():
    with pytest.raises(EmptySamples):
        empirical_quantile([], 0.5)
    with pytest.raises(ValueError):
        empirical_quantile([1.0], 1.5)


def test_percentile_examples():
    ci = percentile_ci([2.5] * 10, 0.05)
    assert (ci.lower, ci.upper, ci.degenerate) == (2.5, 2.5, True)
    ci = percentile_ci(np.arange(1, 101), 0.1)
    assert (ci.lower, ci.upper) == (5, 95)
    assert ci.method is CIMethod.PERCENTILE and not ci.degenerate


def test_pivot_examples():
    ci = pivot_ci([7.0] * 5, 7.0, 0.05)
    assert (ci.lower, ci.upper) == (7.0, 7.0)
    # B=40: ranks 1 and 39 give q_lo = 8 and q_hi = 14.
    samples = [8.0] + [10.0] * 37 + [14.0] * 2
    ci = pivot_ci(samples, 10.0, 0.05)
    assert (ci.lower, ci.upper) == (6.0, 12.0)


def test_empty_samples_raise():
    with pytest.raises(EmptySamples):
        percentile_ci([], 0.1)
    with pytest.raises(EmptySamples):
        pivot_ci([], 0.0, 0.1)


def test_covers_closed_interval():
    ci = ConfidenceInterval(0.0, 1.0, 0.95, CIMethod.PERCENTILE)
    assert covers(ci, 0.0) and covers(ci, 1.0)
    assert not covers(ci, 1.0000001)
    assert covers(ConfidenceInterval(2.0, 2.0, 0.95, CIMethod.PIVOT, True), 2.0)


def test_interval_order_enforced():
    with pytest.raises(ValueError):
        ConfidenceInterval(1.0, 0.0, 0.9, CIMethod.CLT)


def test_k1_episodic_interval_is_degenerate(rs, behavior):
    data = simulate_episodes(rs.kernel, behavior, [0], 50, SeedSpec(41).stream(0))
    ens = run_ensemble(data, None, BootstrapConfig(100, SeedSpec(41), Method.EPISODIC))
    pi = Policy.uniform(rs.space)
    targets = bootstrap_targets(ens, rs.rewards, pi, opr=False)
    point = solve_ope(repaired_kernel(estimate(count(data))), pi, rs.rewards)[0].v[0]
    truth = solve_ope(rs.kernel, pi, rs.rewards)[0].v[0]
    for ci in (percentile_ci(targets.v_ope[:, 0], 0.05),
               pivot_ci(targets.v_ope[:, 0], point, 0.05)):
        assert ci.degenerate and ci.lower == ci.upper == point
        assert not covers(ci, truth)


def test_quantile_pair_vectorized():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(37, 4, 3))
    lo, hi = quantile_pair(x, 0.1)
    for i in range(4):
        for j in range(3):
            assert lo[i, j] == empirical_quantile(x[:, i, j], 0.05)
            assert hi[i, j] == empirical_quantile(x[:, i, j], 0.95)


@given(samples_st, alpha_st)
def test_quantile_matches_brute_force_definition(samples, alpha):
    # inf{x : F(x) >= alpha} over the sample values.
    x = np.array(samples)
    cdf = lambda v: np.mean(x <= v)  # noqa: E731
    feasible = [v for v in np.unique(x) if cdf(v) >= alpha - 1e-12]
    expect = min(feasible)
    assert empirical_quantile(samples, alpha) == expect


@given(samples_st, alpha_st, alpha_st)
def test_quantile_monotone_in_alpha(samples, a1, a2):
    lo, hi = sorted((a1, a2))
    assert empirical_quantile(samples, lo) <= empirical_quantile(samples, hi)


@given(samples_st, st.floats(0.01, 0.99), st.integers(-64, 64).map(lambda c: c / 4),
       st.sampled_from([0.25, 0.5, 2.0, 4.0]), st.integers(-100, 100).map(lambda p: p / 8))
def test_equivariance(samples, alpha, c, m, point):
    # Dyadic values keep shifts and scalings exact in floating point.
    x = np.array(samples)
    base_pct, base_piv = percentile_ci(x, alpha), pivot_ci(x, point, alpha)
    pct, piv = percentile_ci(x + c, alpha), pivot_ci(x + c, point + c, alpha)
    assert (pct.lower, pct.upper) == (base_pct.lower + c, base_pct.upper + c)
    assert (piv.lower, piv.upper) == (base_piv.lower + c, base_piv.upper + c)
    pct, piv = percentile_ci(x * m, alpha), pivot_ci(x * m, point * m, alpha)
    assert (pct.lower, pct.upper) == (base_pct.lower * m, base_pct.upper * m)
    assert (piv.lower, piv.upper) == (base_piv.lower * m, base_piv.upper * m)


@given(samples_st, st.floats(0.01, 0.99), st.floats(-1e3, 1e3))
def test_pivot_ordered(samples, alpha, point):
    ci = pivot_ci(samples, point, alpha)
    assert ci.lower <= ci.upper


@given(st.lists(st.integers(1, 500).map(lambda x: x / 4), min_size=1, max_size=30),
       st.integers(-50, 50).map(lambda p: p / 2), st.floats(0.01, 0.99))
def test_symmetric_samples_pivot_close_to_percentile(half, point, alpha):
    x = np.concatenate([point - np.array(half), point + np.array(half)])
    assume(len(x) >= 2)
    pct, piv = percentile_ci(x, alpha), pivot_ci(x, point, alpha)
    gap = np.diff(np.sort(x)).max()
    assert abs(pct.lower - piv.lower) <= gap
    assert abs(pct.upper - piv.upper) <= gap
