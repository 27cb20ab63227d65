import warnings

import numpy as np
import pytest
from hypothesis import given

from cmcboot.core import Policy, RewardTable, StateActionSpace, TransitionKernel
from cmcboot.counting import CountStatistics
from cmcboot.covariance import (DegeneracyWarning, IndexConventionError, NegativeVariance,
                                clt_interval, delta_method_oracle, lambda_bar, plugin_lambda,
                                sigma_ope, sigma_opr, unvec, vec)
from cmcboot.intervals import CIMethod
from cmcboot.reference_chain import stationary_occupation

from conftest import instances


def _occupation(rng, S, A):
    p = rng.random((S, A)) + 0.05
    return p / p.sum()


def test_two_state_block():
    space = StateActionSpace(2, 1)
    k = TransitionKernel(space, np.full((2, 1, 2), 0.5))
    lam = lambda_bar(k, np.array([[0.5], [0.5]]))
    assert np.allclose(lam.block(0, 0), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)


def test_deterministic_row_block_is_zero():
    space = StateActionSpace(2, 1)
    k = TransitionKernel(space, np.array([[[0.0, 1.0]], [[0.3, 0.7]]]))
    lam = lambda_bar(k, np.array([[0.4], [0.6]]))
    assert np.all(lam.block(0, 0) == 0)
    assert np.any(lam.block(1, 0) != 0)


def test_zero_occupation_needs_floor():
    space = StateActionSpace(2, 1)
    k = TransitionKernel(space, np.full((2, 1, 2), 0.5))
    with pytest.raises(ValueError):
        lambda_bar(k, np.array([[1.0], [0.0]]))
    lam = lambda_bar(k, np.array([[1.0], [0.0]]), floor=0.01)
    assert lam.floored.tolist() == [[False], [True]]
    assert lam.block(1, 0)[0, 0] == pytest.approx(0.25 / 0.01)


def test_plugin_lambda_counts_unvisited_pairs_once():
    space = StateActionSpace(2, 1)
    n_sat = np.zeros((2, 1, 2), dtype=int)
    n_sat[0, 0] = [3, 1]
    k = TransitionKernel(space, np.array([[[0.75, 0.25]], [[0.0, 1.0]]]))
    lam = plugin_lambda(k, CountStatistics(space, n_sat))
    assert lam.floored.tolist() == [[False], [True]]
    assert lam.block(0, 0)[0, 0] == pytest.approx(0.75 * 0.25 / 1.0)


def test_shape_mismatch_raises():
    space = StateActionSpace(2, 2)
    k = TransitionKernel(space, np.full((2, 2, 2), 0.5))
    with pytest.raises(IndexConventionError):
        lambda_bar(k, np.ones((2, 1)) / 2)
    with pytest.raises(IndexConventionError):
        unvec(np.zeros(7), space)
    other = lambda_bar(TransitionKernel(StateActionSpace(1, 1), [[[1.0]]]), [[1.0]])
    with pytest.raises(IndexConventionError):
        sigma_ope(k, Policy.uniform(space), RewardTable(space, np.ones((2, 2)), 0.9), other)


def test_vec_round_trip():
    space = StateActionSpace(3, 2)
    m = np.arange(18.0).reshape(3, 2, 3)
    assert vec(m)[(2 * 2 + 1) * 3 + 1] == m[2, 1, 1]
    assert np.array_equal(unvec(vec(m), space), m)


def test_deterministic_kernel_gives_zero_sigma():
    space = StateActionSpace(3, 2)
    m = np.zeros((3, 2, 3))
    m[:, 0, 0] = 1.0
    m[:, 1, 2] = 1.0
    k = TransitionKernel(space, m)
    lam = lambda_bar(k, np.full((3, 2), 1 / 6))
    rewards = RewardTable(space, np.arange(6.0).reshape(3, 2), 0.9)
    cov = sigma_ope(k, Policy.uniform(space), rewards, lam)
    assert np.all(cov.sigma_v == 0) and np.all(cov.sigma_q == 0)


def test_single_action_opr_equals_ope():
    rng = np.random.default_rng(2)
    S = 4
    space = StateActionSpace(S, 1)
    m = rng.random((S, 1, S))
    m /= m.sum(-1, keepdims=True)
    k = TransitionKernel(space, m)
    rewards = RewardTable(space, rng.normal(size=(S, 1)), 0.8)
    lam = lambda_bar(k, _occupation(rng, S, 1))
    a = sigma_opr(k, rewards, lam)
    b = sigma_ope(k, Policy.uniform(space), rewards, lam)
    assert np.allclose(a.sigma_v, b.sigma_v, atol=1e-12)
    assert np.allclose(a.sigma_q, b.sigma_q, atol=1e-12)


def test_zero_rewards_opr_sigma_zero():
    rng = np.random.default_rng(3)
    space = StateActionSpace(3, 2)
    m = rng.random((3, 2, 3))
    m /= m.sum(-1, keepdims=True)
    k = TransitionKernel(space, m)
    lam = lambda_bar(k, _occupation(rng, 3, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneracyWarning)
        cov = sigma_opr(k, RewardTable(space, np.zeros((3, 2)), 0.9), lam)
    assert np.all(cov.sigma_v == 0) and np.all(cov.sigma_q == 0)
    # All-zero Q ties every action, so the gap is zero and the warning is attached.
    assert isinstance(cov.warning, DegeneracyWarning)


def test_riverswim_optimal_not_degenerate(rs, behavior):
    lam = lambda_bar(rs.kernel, stationary_occupation(rs.kernel, behavior))
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegeneracyWarning)
        cov = sigma_opr(rs.kernel, rs.rewards, lam)
    assert cov.warning is None
    assert cov.gap == pytest.approx(0.02299, abs=1e-5)
    assert cov.policy.probs[:, 1].tolist() == [1.0] * 6


def test_riverswim_delta_method_oracle(rs, behavior):
    lam = lambda_bar(rs.kernel, stationary_occupation(rs.kernel, behavior))
    for pi in (Policy.uniform(rs.space), behavior):
        cov = sigma_ope(rs.kernel, pi, rs.rewards, lam)
        sv, sq = delta_method_oracle(rs.kernel, pi, rs.rewards, lam)
        assert np.abs(cov.sigma_v - sv).max() <= 1e-6
        assert np.abs(cov.sigma_q - sq).max() <= 1e-6


def test_clt_interval_examples():
    ci = clt_interval(0.0, 1.0, 1, 0.05)
    assert ci.lower == pytest.approx(-1.959964, abs=1e-5)
    assert ci.upper == pytest.approx(1.959964, abs=1e-5)
    assert ci.method is CIMethod.CLT and ci.level == pytest.approx(0.95)
    ci = clt_interval(10.0, 4.0, 100, 0.1)
    assert ci.lower == pytest.approx(10 - 1.644854 * 0.2, abs=1e-6)
    assert ci.upper == pytest.approx(10 + 1.644854 * 0.2, abs=1e-6)


def test_clt_zero_variance_degenerate():
    ci = clt_interval(3.5, 0.0, 50, 0.05)
    assert (ci.lower, ci.upper, ci.degenerate) == (3.5, 3.5, True)


def test_clt_negative_variance_raises():
    with pytest.raises(NegativeVariance):
        clt_interval(0.0, -1e-3, 10, 0.05)


@given(instances(max_s=4, max_a=4))
def test_lambda_block_structure(inst):
    kernel, _, _ = inst
    S, A = kernel.space.S, kernel.space.A
    rng = np.random.default_rng(S * 10 + A)
    lam = lambda_bar(kernel, _occupation(rng, S, A))
    mat = lam.matrix
    mask = np.kron(np.eye(S * A), np.ones((S, S))).astype(bool)
    assert np.all(mat[~mask] == 0)
    assert np.abs(mat.sum(axis=1)).max() <= 1e-12
    assert np.array_equal(mat, mat.T)
    assert np.linalg.eigvalsh(mat).min() >= -1e-10


@given(instances(max_s=4, max_a=4))
def test_sigma_matches_delta_method(inst):
    kernel, policy, rewards = inst
    S, A = kernel.space.S, kernel.space.A
    rng = np.random.default_rng(S * 7 + A)
    lam = lambda_bar(kernel, _occupation(rng, S, A))
    cov = sigma_ope(kernel, policy, rewards, lam)
    sv, sq = delta_method_oracle(kernel, policy, rewards, lam)
    assert np.abs(cov.sigma_v - sv).max() <= 1e-6
    assert np.abs(cov.sigma_q - sq).max() <= 1e-6
    for sig in (cov.sigma_v, cov.sigma_q):
        assert np.abs(sig - sig.T).max() <= 1e-10
        assert np.linalg.eigvalsh(sig).min() >= -1e-10
