"""Reference state-action chain, its stationary law, and the episodic embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .bellman import NoConvergence
from .core import (CMCError, EpisodicDataset, Policy, StateActionSpace, TransitionKernel,
                   ROW_TOL)
from .counting import CountStatistics, count_transitions


class Reducible(CMCError):
    pass


class Periodic(CMCError):
    pass


class NonPositiveResetKernel(CMCError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ReferenceChain:
    """Markov chain on pairs with ``K[(s,a), (t,b)] = M[s,a,t] * pi(b|t)``."""

    space: StateActionSpace
    kernel_sa: np.ndarray

    def __post_init__(self):
        resid = np.abs(self.kernel_sa.sum(axis=1) - 1.0).max()
        if resid > ROW_TOL:
            raise ValueError(f"reference chain rows off by {resid:.3g}")


def build_reference_chain(kernel: TransitionKernel, policy: Policy) -> ReferenceChain:
    S, A = kernel.space.S, kernel.space.A
    k = kernel.probs[..., None] * policy.probs[None, None, :, :]
    return ReferenceChain(kernel.space, k.reshape(S * A, S * A))


def _period(adj: np.ndarray) -> int:
    """Period of an irreducible chain from BFS levels (gcd of level defects)."""
    order, pred = breadth_first_order(adj, 0, directed=True, return_predecessors=True)
    level = np.zeros(adj.shape[0], dtype=np.int64)
    for v in order[1:]:
        level[v] = level[pred[v]] + 1
    rows, cols = np.nonzero(adj)
    g = 0
    for d in np.unique(np.abs(level[rows] + 1 - level[cols])):
        g = math.gcd(g, int(d))
    return g


def stationary_distribution(chain: ReferenceChain, tol: float = 1e-12,
                            max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law by power iteration from the uniform distribution.

    Raises :class:`Reducible` or :class:`Periodic` when the chain is not
    irreducible and aperiodic; stops once ``|pK - p|_inf <= tol``.
    """
    k = chain.kernel_sa
    adj = (k > 0).astype(np.int8)
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    if n_comp != 1:
        raise Reducible(f"reference chain has {n_comp} strongly connected components")
    period = _period(adj)
    if period != 1:
        raise Periodic(f"reference chain has period {period}")
    p = np.full(k.shape[0], 1.0 / k.shape[0])
    for _ in range(max_iter):
        p_next = p @ k
        p_next /= p_next.sum()
        if np.max(np.abs(p_next - p)) <= tol:
            return p_next
        p = p_next
    raise NoConvergence(max_iter)


def stationary_occupation(kernel: TransitionKernel, policy: Policy) -> np.ndarray:
    """Stationary pair distribution reshaped to ``(S, A)``."""
    p = stationary_distribution(build_reference_chain(kernel, policy))
    return p.reshape(kernel.space.S, kernel.space.A)


@dataclass(frozen=True, eq=False)
class EmbeddedChain:
    """Episodes concatenated into one chain with a dummy reset action.

    ``actions`` use index ``A`` (:attr:`dagger`) for the reset steps inserted
    between consecutive episodes; ``states`` has one more entry than
    ``actions``.
    """

    space: StateActionSpace
    states: np.ndarray
    actions: np.ndarray
    reset_kernel: np.ndarray

    @property
    def dagger(self) -> int:
        return self.space.A

    @property
    def n_prime(self) -> int:
        return len(self.actions)

    def counts(self) -> CountStatistics:
        """Transition counts restricted to real actions."""
        real = self.actions != self.dagger
        return CountStatistics(self.space, count_transitions(
            self.space, self.states[:-1][real], self.actions[real], self.states[1:][real]))

    def occupation(self) -> np.ndarray:
        """Empirical occupation of real pairs ``(s, a)`` over all ``n'`` steps."""
        return self.counts().n_sa / self.n_prime

    def extended_kernel(self, kernel: TransitionKernel) -> np.ndarray:
        """``(S, A+1, S)`` kernel whose reset action follows ``reset_kernel``."""
        return np.concatenate([kernel.probs, self.reset_kernel[:, None, :]], axis=1)


def embed_episodic(dataset: EpisodicDataset, reset_kernel=None) -> EmbeddedChain:
    S = dataset.space.S
    if reset_kernel is None:
        reset_kernel = np.full((S, S), 1.0 / S)
    reset_kernel = np.asarray(reset_kernel, dtype=float)
    if reset_kernel.shape != (S, S) or np.any(reset_kernel <= 0):
        raise NonPositiveResetKernel("reset kernel must be an S x S matrix with positive entries")
    if np.abs(reset_kernel.sum(axis=1) - 1).max() > ROW_TOL:
        raise NonPositiveResetKernel("reset kernel rows must sum to 1")
    K = dataset.K
    ep = dataset.episodes
    # Each episode contributes T+1 states; the reset step carries X_T^(k) to X_0^(k+1).
    states = np.concatenate([ep[:, :, 0], ep[:, -1:, 2]], axis=1).reshape(-1)
    actions = np.concatenate([ep[:, :, 1], np.full((K, 1), dataset.space.A)], axis=1)
    actions = actions.reshape(-1)[:-1]
    return EmbeddedChain(dataset.space, states, actions, reset_kernel)
