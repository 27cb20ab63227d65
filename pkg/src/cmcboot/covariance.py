"""Asymptotic covariances of the kernel estimator and of plug-in OPE/OPR targets.

All matrices indexed by kernel entries use the stacked order produced by
:func:`vec`, i.e. entry ``(s, a, t)`` at position ``(s * A + a) * S + t``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .bellman import ope_arrays, solve_opr
from .core import CMCError, Policy, RewardTable, StateActionSpace, TransitionKernel
from .counting import CountStatistics
from .intervals import CIMethod, ConfidenceInterval

GAP_THRESHOLD = 1e-8


class IndexConventionError(CMCError):
    pass


class NegativeVariance(CMCError, ValueError):
    pass


class DegeneracyWarning(UserWarning):
    pass


def vec(probs: np.ndarray) -> np.ndarray:
    """Stack an ``(..., S, A, S)`` kernel into ``(..., S*A*S)``."""
    return probs.reshape(probs.shape[:-3] + (-1,))


def unvec(v: np.ndarray, space: StateActionSpace) -> np.ndarray:
    S, A = space.S, space.A
    if v.shape[-1] != S * A * S:
        raise IndexConventionError(f"vector length {v.shape[-1]} != S*A*S = {S * A * S}")
    return v.reshape(v.shape[:-1] + (S, A, S))


@dataclass(frozen=True, eq=False)
class LambdaBar:
    space: StateActionSpace
    matrix: np.ndarray
    floored: np.ndarray

    def block(self, s: int, a: int) -> np.ndarray:
        S = self.space.S
        i = (s * self.space.A + a) * S
        return self.matrix[i:i + S, i:i + S]

    def diagonal(self) -> np.ndarray:
        """Diagonal entries reshaped to ``(S, A, S)``."""
        return unvec(np.diag(self.matrix).copy(), self.space)


def lambda_blocks(kernel_probs: np.ndarray, occupation: np.ndarray) -> np.ndarray:
    """Per-row blocks ``(diag(m) - m m^T) / p``, shape ``(S, A, S, S)``."""
    m = kernel_probs
    outer = m[..., :, None] * m[..., None, :]
    diag = m[..., :, None] * np.eye(m.shape[-1])
    return (diag - outer) / occupation[..., None, None]


def lambda_bar(kernel: TransitionKernel, occupation, floor: float | None = None) -> LambdaBar:
    """Asymptotic covariance of ``sqrt(n) vec(M_hat - M)``.

    Occupation entries below ``floor`` are raised to it and flagged; the
    plug-in estimate uses ``floor = 1/n`` so that unvisited pairs count as
    visited once.
    """
    space = kernel.space
    p = np.asarray(occupation, dtype=float)
    if p.shape != (space.S, space.A):
        raise IndexConventionError(f"occupation shape {p.shape} != {(space.S, space.A)}")
    if np.any(p < 0):
        raise ValueError("occupation entries must be non-negative")
    floored = np.zeros(p.shape, dtype=bool)
    if floor is not None:
        floored = p < floor
        p = np.where(floored, floor, p)
    if np.any(p <= 0):
        raise ValueError("zero occupation entry; supply a floor")
    blocks = lambda_blocks(kernel.probs, p).reshape(space.n_pairs, space.S, space.S)
    n = space.n_pairs * space.S
    mat = np.zeros((n, n))
    for i, blk in enumerate(blocks):
        sl = slice(i * space.S, (i + 1) * space.S)
        mat[sl, sl] = blk
    return LambdaBar(space, mat, floored)


def plugin_lambda(kernel: TransitionKernel, counts: CountStatistics) -> LambdaBar:
    """Plug-in estimate at ``(M_hat, p_hat)`` with ``p_hat = max(N_s^(a), 1) / n``."""
    n = counts.n_total
    return lambda_bar(kernel, counts.n_sa / n, floor=1.0 / n)


@dataclass(frozen=True, eq=False)
class TargetCovariance:
    sigma_v: np.ndarray
    sigma_q: np.ndarray
    policy: Policy
    gap: float | None = None
    warning: DegeneracyWarning | None = None


def ope_jacobians(kernel_probs: np.ndarray, policy: Policy, rewards: RewardTable):
    """Closed-form derivatives of ``V_pi`` and ``Q_pi`` with respect to ``vec(M)``.

    ``J_V = gamma (I - gamma Pi M)^-1 Pi (x) V^T`` and
    ``J_Q = gamma (I - gamma M Pi)^-1 (x) (Pi Q)^T``.
    """
    S, A = policy.space.S, policy.space.A
    gamma = rewards.gamma
    v, q = ope_arrays(kernel_probs, policy.probs, rewards.r, gamma)
    pi_mat = policy.matrix()
    m = kernel_probs.reshape(S * A, S)
    res_v = np.linalg.inv(np.eye(S) - gamma * pi_mat @ m)
    res_q = np.linalg.inv(np.eye(S * A) - gamma * m @ pi_mat)
    pi_q = pi_mat @ q.reshape(S * A)
    j_v = gamma * np.kron(res_v @ pi_mat, v[None, :])
    j_q = gamma * np.kron(res_q, pi_q[None, :])
    return j_v, j_q


def _sandwich(j: np.ndarray, lam: np.ndarray) -> np.ndarray:
    if j.shape[1] != lam.shape[0]:
        raise IndexConventionError(f"Jacobian width {j.shape[1]} != Lambda size {lam.shape[0]}")
    out = j @ lam @ j.T
    return 0.5 * (out + out.T)


def sigma_ope(kernel: TransitionKernel, policy: Policy, rewards: RewardTable,
              lam: LambdaBar) -> TargetCovariance:
    if lam.space != kernel.space or policy.space != kernel.space:
        raise IndexConventionError("kernel, policy and Lambda live on different spaces")
    j_v, j_q = ope_jacobians(kernel.probs, policy, rewards)
    return TargetCovariance(_sandwich(j_v, lam.matrix), _sandwich(j_q, lam.matrix), policy)


def sigma_opr(kernel: TransitionKernel, rewards: RewardTable, lam: LambdaBar,
              gap_threshold: float = GAP_THRESHOLD, solution=None) -> TargetCovariance:
    """Covariances of the optimal targets: ``sigma_ope`` at the greedy optimal policy."""
    if solution is None:
        solution = solve_opr(kernel, rewards)
    cov = sigma_ope(kernel, solution.pi_star, rewards, lam)
    warn = None
    if solution.gap < gap_threshold:
        warn = DegeneracyWarning(f"optimal action gap {solution.gap:.3g} < {gap_threshold:.3g}")
        warnings.warn(warn)
    return TargetCovariance(cov.sigma_v, cov.sigma_q, solution.pi_star, solution.gap, warn)


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


def clt_interval(estimate: float, variance: float, n: int, alpha: float) -> ConfidenceInterval:
    """Wald interval ``estimate +- z_{1-alpha/2} sqrt(variance / n)``."""
    if variance < 0:
        raise NegativeVariance(f"variance {variance!r} is negative")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    half = normal_quantile(1 - alpha / 2) * math.sqrt(variance / n)
    estimate = float(estimate)
    return ConfidenceInterval(estimate - half, estimate + half, 1 - alpha, CIMethod.CLT,
                              half == 0.0)


def _solve_extended(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting in ``np.longdouble``."""
    a = np.array(a, dtype=np.longdouble)
    b = np.array(b, dtype=np.longdouble)
    n = a.shape[0]
    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
            b[[k, piv]] = b[[piv, k]]
        f = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= f[:, None] * a[k, k:]
        b[k + 1:] -= f * b[k]
    x = np.zeros(n, dtype=np.longdouble)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x


def ope_extended(kernel_probs, policy_probs, r, gamma):
    """Policy evaluation in extended precision; returns ``(V, Q)`` as longdouble."""
    m = np.asarray(kernel_probs, dtype=np.longdouble)
    pi = np.asarray(policy_probs, dtype=np.longdouble)
    r = np.asarray(r, dtype=np.longdouble)
    gamma = np.longdouble(gamma)
    S, A = pi.shape
    p_pi = (pi[..., None] * m).sum(axis=1)
    v = _solve_extended(np.eye(S, dtype=np.longdouble) - gamma * p_pi, (pi * r).sum(axis=1))
    m_pi = (m[..., :, None] * pi).reshape(S * A, S * A)
    q = _solve_extended(np.eye(S * A, dtype=np.longdouble) - gamma * m_pi, r.reshape(-1))
    return v, q.reshape(S, A)


def numeric_jacobian(fn, kernel_probs: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` along simplex-preserving directions.

    Column ``(s, a, t)`` perturbs ``M[s, a, t]`` by ``+h`` and ``M[s, a, t0]``
    by ``-h``, where ``t0`` is the largest entry of that row. The result equals
    the unconstrained Jacobian up to a per-row shift, which vanishes when
    sandwiched with a covariance whose row blocks sum to zero.

    Perturbation and differencing run in ``np.longdouble``; ``fn`` should
    evaluate in that precision too (see :func:`ope_extended`) so that
    round-off stays far below the truncation error.
    """
    m = np.asarray(kernel_probs, dtype=np.longdouble)
    h = np.longdouble(h)
    S, A, _ = m.shape
    base = np.asarray(fn(m)).ravel()
    jac = np.zeros((base.size, S * A * S), dtype=np.longdouble)
    ref = m.argmax(axis=-1)
    for s in range(S):
        for a in range(A):
            t0 = ref[s, a]
            for t in range(S):
                if t == t0:
                    continue
                d = np.zeros_like(m)
                d[s, a, t] += h
                d[s, a, t0] -= h
                plus = np.asarray(fn(m + d)).ravel()
                minus = np.asarray(fn(m - d)).ravel()
                jac[:, (s * A + a) * S + t] = (plus - minus) / (2 * h)
    return jac.astype(float)


def delta_method_oracle(kernel: TransitionKernel, policy: Policy, rewards: RewardTable,
                        lam: LambdaBar, h: float = 1e-6):
    """``(Sigma_V, Sigma_Q)`` from finite-difference Jacobians, for cross-checking."""
    def value(m):
        return ope_extended(m, policy.probs, rewards.r, rewards.gamma)[0]

    def qvalue(m):
        return ope_extended(m, policy.probs, rewards.r, rewards.gamma)[1]

    j_v = numeric_jacobian(value, kernel.probs, h)
    j_q = numeric_jacobian(qvalue, kernel.probs, h)
    return j_v @ lam.matrix @ j_v.T, j_q @ lam.matrix @ j_q.T
