"""Policy evaluation and optimal-control solvers for tabular discounted MDPs.

Batched entry points take kernels of shape ``(B, S, A, S)`` and solve each
slice independently; every reduction runs along a contiguous trailing axis so
slice ``b`` of a batched solve is bit-identical to solving it alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CMCError, Policy, RewardTable, TransitionKernel
from .counting import repair_arrays

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000


class SingularSystem(CMCError):
    pass


class NoConvergence(CMCError):
    def __init__(self, max_iter, replicates=None):
        self.max_iter = max_iter
        self.replicates = replicates
        where = "" if replicates is None else f" (replicates {list(replicates)[:10]})"
        super().__init__(f"value iteration did not converge in {max_iter} iterations{where}")


@dataclass(frozen=True, eq=False)
class ValueFunction:
    v: np.ndarray


@dataclass(frozen=True, eq=False)
class QFunction:
    q: np.ndarray


@dataclass(frozen=True, eq=False)
class OptimalSolution:
    q_star: QFunction
    v_star: ValueFunction
    pi_star: Policy
    gap: float
    iterations: int = 0

    @property
    def actions(self) -> np.ndarray:
        return self.pi_star.probs.argmax(axis=1)


def _policy_kernel(kernels: np.ndarray, policy_probs: np.ndarray) -> np.ndarray:
    """``(Pi M)[s, t] = sum_a pi(a|s) M[s, a, t]`` for a batch of kernels."""
    return (policy_probs[..., None] * kernels).sum(axis=-2)


def ope_arrays(kernels: np.ndarray, policy_probs: np.ndarray, r: np.ndarray, gamma: float):
    """Batched policy evaluation by dense linear solves.

    ``kernels`` has shape ``(..., S, A, S)`` and ``policy_probs`` is ``(S, A)``
    (or broadcastable to ``(..., S, A)``). Returns ``V (..., S)`` and
    ``Q (..., S, A)``.
    """
    S, A = kernels.shape[-3], kernels.shape[-2]
    g = (policy_probs * r).sum(axis=-1)
    p_pi = _policy_kernel(kernels, policy_probs)
    lhs_v = np.eye(S) - gamma * p_pi
    # (M Pi)[(s,a), (t,b)] = M[s,a,t] pi(b|t)
    m_pi = (kernels[..., :, None] * policy_probs).reshape(kernels.shape[:-3] + (S * A, S * A))
    lhs_q = np.eye(S * A) - gamma * m_pi
    rhs_q = np.broadcast_to(r.reshape(S * A), lhs_q.shape[:-1])
    rhs_v = np.broadcast_to(g, lhs_v.shape[:-1])
    try:
        v = np.linalg.solve(lhs_v, rhs_v[..., None])[..., 0]
        q = np.linalg.solve(lhs_q, rhs_q[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    return v, q.reshape(q.shape[:-1] + (S, A))


def solve_ope(kernel: TransitionKernel, policy: Policy,
              rewards: RewardTable) -> tuple[ValueFunction, QFunction]:
    """Value and action-value functions of a fixed policy.

    Solves ``(I - gamma Pi M) V = g`` and ``(I - gamma M Pi) Q = r``.
    """
    v, q = ope_arrays(kernel.probs, policy.probs, rewards.r, rewards.gamma)
    return ValueFunction(v), QFunction(q)


def evaluate_by_iteration(kernel: TransitionKernel, policy: Policy, rewards: RewardTable,
                          tol: float = 1e-12, max_iter: int = DEFAULT_MAX_ITER):
    """Fixed-policy value iteration ``V <- g + gamma Pi M V``; a solver-free reference.

    Returns ``(V, Q)`` with ``Q = r + gamma M V``.
    """
    gamma = rewards.gamma
    g = rewards.expected(policy)
    p_pi = _policy_kernel(kernel.probs, policy.probs)
    v = np.zeros(kernel.space.S)
    stop = tol * (1 - gamma) / gamma
    for _ in range(max_iter):
        v_new = g + gamma * (p_pi * v).sum(axis=1)
        if np.max(np.abs(v_new - v)) <= stop:
            return v_new, rewards.r + gamma * (kernel.probs * v_new).sum(axis=-1)
        v = v_new
    raise NoConvergence(max_iter)


def greedy_gap(q: np.ndarray) -> np.ndarray:
    """Smallest margin between the best and second-best action over states."""
    if q.shape[-1] < 2:
        return np.full(q.shape[:-2], np.inf)
    top2 = -np.partition(-q, 1, axis=-1)[..., :2]
    return (top2[..., 0] - top2[..., 1]).min(axis=-1)


def opr_arrays(kernels: np.ndarray, r: np.ndarray, gamma: float,
               tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    """Batched Q value iteration on kernels of shape ``(B, S, A, S)``.

    Each slice stops independently once its sup-norm change is at most
    ``tol * (1 - gamma) / (2 * gamma)``, which bounds its distance to the
    fixed point by ``tol / 2``. Returns ``(Q, V, actions, gap, iterations)``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    batch, S, A = kernels.shape[:3]
    stop = tol * (1 - gamma) / (2 * gamma)
    flat = kernels.reshape(batch, S * A, S)
    r_flat = np.broadcast_to(r, (S, A)).reshape(S * A)
    q = np.zeros((batch, S * A))
    iters = np.zeros(batch, dtype=np.int64)
    active = np.arange(batch)
    m_act, q_act = flat, q.copy()
    for it in range(1, max_iter + 1):
        v = q_act.reshape(-1, S, A).max(axis=-1)
        q_new = r_flat + gamma * np.matmul(m_act, v[:, :, None])[..., 0]
        done = np.abs(q_new - q_act).max(axis=1) <= stop
        q_act = q_new
        if done.any():
            q[active[done]] = q_new[done]
            iters[active[done]] = it
            keep = ~done
            active, m_act, q_act = active[keep], m_act[keep], q_act[keep]
            if len(active) == 0:
                break
    else:
        q[active] = q_act
        raise NoConvergence(max_iter, replicates=active.tolist())
    q = q.reshape(batch, S, A)
    v = q.max(axis=-1)
    actions = q.argmax(axis=-1)
    return q, v, actions, greedy_gap(q), iters


def solve_opr(kernel: TransitionKernel, rewards: RewardTable, tol: float = DEFAULT_TOL,
              max_iter: int = DEFAULT_MAX_ITER) -> OptimalSolution:
    """Optimal Q function by value iteration; ties go to the lowest action index."""
    q, v, actions, gap, iters = opr_arrays(kernel.probs[None], rewards.r, rewards.gamma,
                                           tol, max_iter)
    pi = Policy.deterministic(kernel.space, actions[0])
    return OptimalSolution(QFunction(q[0]), ValueFunction(v[0]), pi, float(gap[0]), int(iters[0]))


def bellman_residual(kernel: TransitionKernel, rewards: RewardTable, q: np.ndarray) -> float:
    v = q.max(axis=1)
    tq = rewards.r + rewards.gamma * (kernel.probs * v).sum(axis=-1)
    return float(np.max(np.abs(q - tq)))


@dataclass(frozen=True, eq=False)
class BootstrapTargets:
    """Per-replicate OPE/OPR targets; leading axis is the replicate index."""

    v_ope: np.ndarray | None
    q_ope: np.ndarray | None
    v_opr: np.ndarray | None
    q_opr: np.ndarray | None
    opr_actions: np.ndarray | None
    opr_gap: np.ndarray | None
    repaired: np.ndarray


def targets_from_kernels(kernels: np.ndarray, defined: np.ndarray, rewards: RewardTable,
                         target_policy: Policy | None = None, opr: bool = True,
                         tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER):
    kernels = repair_arrays(kernels, defined)
    repaired = ~defined.reshape(defined.shape[0], -1).all(axis=1)
    v_ope = q_ope = v_opr = q_opr = acts = gap = None
    if target_policy is not None:
        v_ope, q_ope = ope_arrays(kernels, target_policy.probs, rewards.r, rewards.gamma)
    if opr:
        q_opr, v_opr, acts, gap, _ = opr_arrays(kernels, rewards.r, rewards.gamma, tol, max_iter)
    return BootstrapTargets(v_ope, q_ope, v_opr, q_opr, acts, gap, repaired)


def bootstrap_targets(ensemble, rewards: RewardTable, target_policy: Policy | None = None,
                      opr: bool = True, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER) -> BootstrapTargets:
    """OPE (when a target policy is given) and OPR targets for every replicate.

    Replicate kernels with unvisited state-action rows are solved on their
    self-loop repair; ``repaired[j]`` records whether replicate ``j`` needed it.
    """
    return targets_from_kernels(ensemble.kernels, ensemble.kernel_defined, rewards,
                                target_policy, opr, tol, max_iter)
