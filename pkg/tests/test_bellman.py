import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cmcboot.bellman import (NoConvergence, bellman_residual, bootstrap_targets,
                             evaluate_by_iteration, opr_arrays, solve_ope, solve_opr)
from cmcboot.bootstrap import BootstrapConfig, Method, run_ensemble
from cmcboot.core import (Policy, RewardTable, SeedSpec, StateActionSpace, TransitionKernel,
                          simulate_episodes)
from cmcboot.counting import count, estimate, repaired_kernel
from cmcboot.covariance import plugin_lambda, sigma_ope
from cmcboot.environments import RIGHT

from conftest import instances, random_instance


def _one_state(r, gamma):
    space = StateActionSpace(1, len(r))
    kernel = TransitionKernel(space, np.ones((1, len(r), 1)))
    return kernel, RewardTable(space, [r], gamma)


def test_single_state_geometric_series():
    kernel, rewards = _one_state([3.0], 0.8)
    v, q = solve_ope(kernel, Policy.uniform(kernel.space), rewards)
    assert v.v[0] == pytest.approx(15.0, abs=1e-12)
    assert q.q[0, 0] == pytest.approx(15.0, abs=1e-12)


def test_two_state_cycle_hand_solution():
    space = StateActionSpace(2, 1)
    m = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    v, q = solve_ope(TransitionKernel(space, m), Policy.uniform(space),
                     RewardTable(space, [[1.0], [0.0]], 0.5))
    assert np.allclose(v.v, [4 / 3, 2 / 3], atol=1e-14)
    assert np.allclose(q.q[:, 0], [4 / 3, 2 / 3], atol=1e-14)


def test_riverswim_uniform_matches_iteration(rs):
    pi = Policy.uniform(rs.space)
    v, q = solve_ope(rs.kernel, pi, rs.rewards)
    v_it, q_it = evaluate_by_iteration(rs.kernel, pi, rs.rewards)
    assert np.abs(v.v - v_it).max() <= 1e-8
    assert np.abs(q.q - q_it).max() <= 1e-8
    assert np.allclose(v.v, [7.62, 6.79, 6.12, 5.79, 6.64, 12.09], atol=0.01)


def test_zero_rewards_give_zero_and_action_zero():
    kernel, policy, _ = random_instance(np.random.default_rng(0), 4, 3)
    sol = solve_opr(kernel, RewardTable(kernel.space, np.zeros((4, 3)), 0.9))
    assert np.all(sol.q_star.q == 0) and np.all(sol.v_star.v == 0)
    assert sol.actions.tolist() == [0, 0, 0, 0]
    assert sol.gap == 0.0


def test_one_state_two_actions_closed_form():
    kernel, rewards = _one_state([1.0, 2.0], 0.9)
    sol = solve_opr(kernel, rewards)
    assert sol.q_star.q[0, 1] == pytest.approx(20.0, abs=1e-9)
    assert sol.q_star.q[0, 0] == pytest.approx(19.0, abs=1e-9)
    assert sol.actions.tolist() == [1]
    assert sol.gap == pytest.approx(1.0, abs=1e-9)


def test_riverswim_optimal_policy(rs):
    sol = solve_opr(rs.kernel, rs.rewards)
    assert np.all(sol.actions[1:] == RIGHT)
    # Smallest action gap sits at the leftmost state.
    q = sol.q_star.q
    gaps = np.abs(q[:, 1] - q[:, 0])
    assert np.argmin(gaps) == 0
    assert sol.gap == pytest.approx(gaps[0])
    assert bellman_residual(rs.kernel, rs.rewards, q) <= 1e-10


def test_no_convergence_reports_replicates(rs):
    with pytest.raises(NoConvergence) as info:
        opr_arrays(np.stack([rs.kernel.probs] * 2), rs.rewards.r, rs.rewards.gamma, max_iter=5)
    assert info.value.replicates == [0, 1]


def test_opr_batch_slices_are_independent(rs):
    # Freezing converged replicates must not change any replicate's answer.
    rng = np.random.default_rng(1)
    kernels = rng.random((5, 6, 2, 6))
    kernels /= kernels.sum(-1, keepdims=True)
    kernels[2] = rs.kernel.probs
    q_all, _, a_all, _, it_all = opr_arrays(kernels, rs.rewards.r, rs.rewards.gamma)
    for j in range(5):
        q, _, a, _, it = opr_arrays(kernels[j:j + 1], rs.rewards.r, rs.rewards.gamma)
        assert np.array_equal(q[0], q_all[j]) and it[0] == it_all[j]


@pytest.fixture(scope="module")
def rs_ensemble(rs, behavior):
    data = simulate_episodes(rs.kernel, behavior, [0] * 20, 50, SeedSpec(31).stream(0))
    model = estimate(count(data))
    return data, model, run_ensemble(data, model, BootstrapConfig(1000, SeedSpec(32)))


def test_single_episode_targets_equal_plugin(rs):
    # An episodic ensemble of one episode reproduces the source exactly.
    one = simulate_episodes(rs.kernel, Policy.constant(rs.space, [0.2, 0.8]), [0], 400,
                            SeedSpec(33).stream(0))
    e1 = run_ensemble(one, None, BootstrapConfig(3, SeedSpec(1), Method.EPISODIC))
    pi = Policy.uniform(rs.space)
    targets = bootstrap_targets(e1, rs.rewards, pi)
    kernel = repaired_kernel(estimate(count(one)))
    v, q = solve_ope(kernel, pi, rs.rewards)
    sol = solve_opr(kernel, rs.rewards)
    for j in range(3):
        assert np.array_equal(targets.v_ope[j], targets.v_ope[0])
        assert np.allclose(targets.v_ope[j], v.v, atol=1e-10)
        assert np.allclose(targets.q_opr[j], sol.q_star.q, atol=1e-10)


def test_bootstrap_variance_matches_sigma(rs, rs_ensemble):
    data, model, ens = rs_ensemble
    pi = Policy.uniform(rs.space)
    targets = bootstrap_targets(ens, rs.rewards, pi, opr=False)
    v_hat, _ = solve_ope(repaired_kernel(model), pi, rs.rewards)
    n = data.n
    boot_var = n * np.var(targets.v_ope[:, 0] - v_hat.v[0], ddof=1)
    kernel = repaired_kernel(model)
    sigma = sigma_ope(kernel, pi, rs.rewards, plugin_lambda(kernel, model.counts)).sigma_v[0, 0]
    assert abs(boot_var / sigma - 1) < 0.15


def test_repaired_flag(rs, rs_ensemble):
    _, _, ens = rs_ensemble
    targets = bootstrap_targets(ens, rs.rewards, None, opr=False)
    expect = ~ens.kernel_defined.reshape(ens.B, -1).all(axis=1)
    assert np.array_equal(targets.repaired, expect)
    assert targets.v_ope is None and targets.v_opr is None


@given(instances(max_s=5, max_a=3))
def test_linear_solve_matches_iteration(inst):
    kernel, policy, rewards = inst
    v, q = solve_ope(kernel, policy, rewards)
    v_it, q_it = evaluate_by_iteration(kernel, policy, rewards)
    assert np.abs(v.v - v_it).max() <= 1e-8
    assert np.abs(q.q - q_it).max() <= 1e-8


@given(instances(max_s=5, max_a=3, sparse=True))
def test_opr_bellman_residual(inst):
    kernel, _, rewards = inst
    sol = solve_opr(kernel, rewards)
    assert bellman_residual(kernel, rewards, sol.q_star.q) <= 1e-10
    assert np.array_equal(sol.v_star.v, sol.q_star.q.max(axis=1))


@given(instances(max_s=4, max_a=3), st.integers(0, 2**32 - 1), st.floats(0.01, 5.0))
def test_raising_a_reward_never_lowers_optimal_values(inst, seed, bump):
    kernel, _, rewards = inst
    rng = np.random.default_rng(seed)
    r = rewards.r.copy()
    s, a = rng.integers(0, kernel.space.S), rng.integers(0, kernel.space.A)
    r[s, a] += bump
    before = solve_opr(kernel, rewards).v_star.v
    after = solve_opr(kernel, RewardTable(kernel.space, r, rewards.gamma)).v_star.v
    assert np.all(after >= before - 1e-9)


@given(instances(max_s=4, max_a=3), st.sampled_from([0.5, 2.0, 8.0]))
def test_reward_scaling_keeps_optimal_policy(inst, c):
    kernel, _, rewards = inst
    base = solve_opr(kernel, rewards)
    # Skip near-ties, where the argmax is decided by round-off.
    if base.gap < 1e-6 and kernel.space.A > 1:
        return
    scaled = solve_opr(kernel, RewardTable(kernel.space, c * rewards.r, rewards.gamma))
    assert np.array_equal(base.actions, scaled.actions)
