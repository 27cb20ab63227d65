"""Visit counts and count-based estimators of the kernel and behavior policy.

The array helpers (``*_arrays``) accept any number of leading batch axes, so the
same code path serves a single dataset and a stack of bootstrap replicates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (CMCError, EpisodicDataset, Policy, StateActionSpace,
                   TransitionKernel)


class EmptyDataset(CMCError):
    pass


@dataclass(frozen=True, eq=False)
class CountStatistics:
    space: StateActionSpace
    n_sat: np.ndarray

    def __post_init__(self):
        n_sat = np.array(self.n_sat, dtype=np.int64, copy=True)
        S, A = self.space.S, self.space.A
        if n_sat.shape != (S, A, S):
            raise ValueError(f"count shape {n_sat.shape} != {(S, A, S)}")
        n_sat.setflags(write=False)
        object.__setattr__(self, "n_sat", n_sat)

    @property
    def n_sa(self) -> np.ndarray:
        return self.n_sat.sum(axis=2)

    @property
    def n_s(self) -> np.ndarray:
        return self.n_sat.sum(axis=(1, 2))

    @property
    def n_total(self) -> int:
        return int(self.n_sat.sum())


def transition_index(space: StateActionSpace, s, a, t):
    return (np.asarray(s) * space.A + np.asarray(a)) * space.S + np.asarray(t)


def count_transitions(space: StateActionSpace, s, a, t) -> np.ndarray:
    """Tally transition triples into an ``(S, A, S)`` integer array."""
    flat = transition_index(space, s, a, t).ravel()
    n = space.S * space.A * space.S
    return np.bincount(flat, minlength=n).astype(np.int64).reshape(space.S, space.A, space.S)


def count(dataset: EpisodicDataset) -> CountStatistics:
    ep = dataset.episodes
    return CountStatistics(dataset.space,
                           count_transitions(dataset.space, ep[..., 0], ep[..., 1], ep[..., 2]))


def estimate_arrays(n_sat: np.ndarray):
    """Ratio estimators from counts of shape ``(..., S, A, S)``.

    Returns ``(kernel, kernel_defined, policy, policy_defined)``. Undefined
    kernel rows (``N_s^(a) = 0``) and policy rows (``N_s = 0``) are NaN.
    """
    n_sa = n_sat.sum(axis=-1)
    n_s = n_sa.sum(axis=-1)
    kernel_defined = n_sa > 0
    policy_defined = n_s > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        kernel = n_sat / n_sa[..., None]
        policy = n_sa / n_s[..., None]
    return kernel, kernel_defined, policy, policy_defined


def repair_arrays(kernel: np.ndarray, kernel_defined: np.ndarray,
                  policy: np.ndarray | None = None, policy_defined: np.ndarray | None = None):
    """Replace undefined kernel rows by self-loops and undefined policy rows by uniform."""
    S = kernel.shape[-1]
    eye = np.broadcast_to(np.eye(S)[:, None, :], kernel.shape)
    kernel = np.where(kernel_defined[..., None], kernel, eye)
    if policy is None:
        return kernel
    A = policy.shape[-1]
    policy = np.where(policy_defined[..., None], policy, 1.0 / A)
    return kernel, policy


@dataclass(frozen=True, eq=False)
class EstimatedModel:
    """Count-based estimates with definedness flags.

    ``kernel_hat[s, a]`` is NaN wherever ``kernel_defined[s, a]`` is false and
    likewise for ``policy_hat``; :func:`repair_for_simulation` turns both into
    proper stochastic objects.
    """

    counts: CountStatistics
    kernel_hat: np.ndarray
    kernel_defined: np.ndarray
    policy_hat: np.ndarray
    policy_defined: np.ndarray

    @property
    def space(self) -> StateActionSpace:
        return self.counts.space

    @property
    def fully_defined(self) -> bool:
        return bool(self.kernel_defined.all())


def estimate(counts: CountStatistics) -> EstimatedModel:
    kernel, kdef, policy, pdef = estimate_arrays(counts.n_sat)
    for arr in (kernel, kdef, policy, pdef):
        arr.setflags(write=False)
    return EstimatedModel(counts, kernel, kdef, policy, pdef)


def repair_for_simulation(model: EstimatedModel) -> tuple[TransitionKernel, Policy]:
    kernel, policy = repair_arrays(model.kernel_hat, model.kernel_defined,
                                   model.policy_hat, model.policy_defined)
    return TransitionKernel(model.space, kernel), Policy(model.space, policy)


def repaired_kernel(model: EstimatedModel) -> TransitionKernel:
    return repair_for_simulation(model)[0]


def occupation_estimate(counts: CountStatistics) -> np.ndarray:
    """Empirical state-action occupation ``N_s^(a) / n``."""
    n = counts.n_total
    if n == 0:
        raise EmptyDataset("occupation measure needs at least one transition")
    return counts.n_sa / n
