"""Domain types for finite controlled Markov chains.

States and actions are dense 0-based integer indices. A transition kernel is
stored as an ``(S, A, S)`` array ``probs[s, a, t]``; flattening it in C order
gives the stacked vector whose ``(s, a, t)`` entry sits at position
``(s * A + a) * S + t``.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROW_TOL = 1e-12


class CMCError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(CMCError, ValueError):
    pass


class RowSumError(ValidationError):
    def __init__(self, index, residual):
        self.index = tuple(int(i) for i in np.atleast_1d(index))
        self.residual = float(residual)
        super().__init__(f"row {self.index} sums to 1{self.residual:+.3g}")


class NegativeEntryError(ValidationError):
    def __init__(self, index, value):
        self.index = tuple(int(i) for i in index)
        self.value = float(value)
        super().__init__(f"entry {self.index} is negative ({self.value!r})")


@dataclass(frozen=True)
class StateActionSpace:
    S: int
    A: int

    def __post_init__(self):
        if int(self.S) < 1 or int(self.A) < 1:
            raise ValidationError(f"need S >= 1 and A >= 1, got S={self.S}, A={self.A}")

    @property
    def n_pairs(self) -> int:
        return self.S * self.A


def _check_stochastic(probs: np.ndarray, tol: float = ROW_TOL):
    if not np.all(np.isfinite(probs)):
        bad = np.argwhere(~np.isfinite(probs))[0]
        raise ValidationError(f"entry {tuple(int(i) for i in bad)} is not finite")
    neg = np.argwhere(probs < 0)
    if len(neg):
        idx = tuple(neg[0])
        raise NegativeEntryError(idx, probs[idx])
    residual = probs.sum(axis=-1) - 1.0
    bad = np.argwhere(np.abs(residual) > tol)
    if len(bad):
        idx = tuple(bad[0])
        raise RowSumError(idx, residual[idx])


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Transition probabilities ``probs[s, a, t] = P(X' = t | X = s, A = a)``."""

    space: StateActionSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        S, A = self.space.S, self.space.A
        if probs.shape != (S, A, S):
            raise ValidationError(f"kernel shape {probs.shape} != {(S, A, S)}")
        _check_stochastic(probs)
        object.__setattr__(self, "probs", probs)

    @property
    def block(self) -> np.ndarray:
        """The ``(S*A, S)`` stacked matrix with row ``s*A + a``."""
        return self.probs.reshape(self.space.n_pairs, self.space.S)

    def vec(self) -> np.ndarray:
        return self.probs.ravel()


def validate_kernel(probs) -> TransitionKernel:
    """Build a :class:`TransitionKernel` from a nested ``S x A x S`` array."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 3 or probs.shape[0] != probs.shape[2]:
        raise ValidationError(f"kernel must have shape (S, A, S), got {probs.shape}")
    return TransitionKernel(StateActionSpace(probs.shape[0], probs.shape[1]), probs)


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary randomized policy ``probs[s, a] = pi(a | s)``."""

    space: StateActionSpace
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.shape != (self.space.S, self.space.A):
            raise ValidationError(
                f"policy shape {probs.shape} != {(self.space.S, self.space.A)}"
            )
        _check_stochastic(probs)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, space: StateActionSpace) -> "Policy":
        return cls(space, np.full((space.S, space.A), 1.0 / space.A))

    @classmethod
    def constant(cls, space: StateActionSpace, action_probs: Sequence[float]) -> "Policy":
        """Same action distribution in every state."""
        row = np.asarray(action_probs, dtype=float)
        return cls(space, np.tile(row, (space.S, 1)))

    @classmethod
    def deterministic(cls, space: StateActionSpace, actions: Sequence[int]) -> "Policy":
        probs = np.zeros((space.S, space.A))
        probs[np.arange(space.S), np.asarray(actions, dtype=int)] = 1.0
        return cls(space, probs)

    def matrix(self) -> np.ndarray:
        """Block-diagonal ``(S, S*A)`` matrix whose row ``s`` holds ``pi(.|s)``."""
        S, A = self.space.S, self.space.A
        out = np.zeros((S, S * A))
        for s in range(S):
            out[s, s * A:(s + 1) * A] = self.probs[s]
        return out


@dataclass(frozen=True, eq=False)
class RewardTable:
    space: StateActionSpace
    r: np.ndarray
    gamma: float

    def __post_init__(self):
        r = _frozen(self.r)
        if r.shape != (self.space.S, self.space.A):
            raise ValidationError(f"reward shape {r.shape} != {(self.space.S, self.space.A)}")
        if not np.all(np.isfinite(r)):
            raise ValidationError("rewards must be finite")
        if not 0.0 < float(self.gamma) < 1.0:
            raise ValidationError(f"discount must satisfy 0 < gamma < 1, got {self.gamma!r}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    def expected(self, policy: Policy) -> np.ndarray:
        """Per-state reward ``g(s) = sum_a pi(a|s) r(s, a)``."""
        return (policy.probs * self.r).sum(axis=1)

    @property
    def r_max(self) -> float:
        return float(np.abs(self.r).max())


@dataclass(frozen=True, eq=False)
class EpisodicDataset:
    """``K`` episodes of ``T`` transitions, stored as ``(K, T, 3)`` integers.

    ``episodes[k, i] = (state, action, next_state)``.
    """

    space: StateActionSpace
    episodes: np.ndarray

    def __post_init__(self):
        ep = np.array(self.episodes, dtype=np.int64, copy=True)
        if ep.ndim != 3 or ep.shape[2] != 3 or ep.shape[0] < 1 or ep.shape[1] < 1:
            raise ValidationError(f"episodes must have shape (K>=1, T>=1, 3), got {ep.shape}")
        S, A = self.space.S, self.space.A
        states = ep[:, :, [0, 2]]
        if states.min() < 0 or states.max() >= S:
            raise ValidationError(f"state index outside [0, {S})")
        if ep[:, :, 1].min() < 0 or ep[:, :, 1].max() >= A:
            raise ValidationError(f"action index outside [0, {A})")
        broken = np.argwhere(ep[:, 1:, 0] != ep[:, :-1, 2])
        if len(broken):
            k, i = broken[0]
            raise ValidationError(f"episode {k} breaks chaining between steps {i} and {i + 1}")
        ep.setflags(write=False)
        object.__setattr__(self, "episodes", ep)

    @property
    def K(self) -> int:
        return self.episodes.shape[0]

    @property
    def T(self) -> int:
        return self.episodes.shape[1]

    @property
    def n(self) -> int:
        return self.K * self.T

    @property
    def start_states(self) -> np.ndarray:
        return self.episodes[:, 0, 0]

    @classmethod
    def from_paths(cls, space, states, actions) -> "EpisodicDataset":
        """Build from state paths ``(K, T+1)`` and actions ``(K, T)``."""
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        ep = np.stack([states[:, :-1], actions, states[:, 1:]], axis=-1)
        return cls(space, ep)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for episode in self.episodes:
                fh.write(json.dumps(episode.tolist()) + "\n")

    @classmethod
    def from_jsonl(cls, space: StateActionSpace, path) -> "EpisodicDataset":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        try:
            episodes = [json.loads(ln) for ln in lines]
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        lengths = {len(e) for e in episodes}
        if len(lengths) != 1:
            raise ValidationError(f"{path}: episodes have unequal lengths {sorted(lengths)}")
        return cls(space, np.asarray(episodes, dtype=np.int64))


# Stream purposes, the third component of a stream key.
DATA, MODEL_BASED, EPISODIC = 0, 1, 2


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus the rule that derives independent RNG streams.

    A stream is identified by a tuple of non-negative integers, conventionally
    ``(grid_index, rep_index, purpose, replicate_index)``. The tuple is hashed
    together with the master seed by :class:`numpy.random.SeedSequence`, so
    every stream depends only on its key, never on scheduling order.
    """

    master_seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValidationError("master_seed must be a 64-bit unsigned integer")

    def stream(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))


def _cumulative(probs: np.ndarray) -> np.ndarray:
    """Row-wise CDF tables for inverse-transform sampling.

    Entries from the last positive-probability column on are pushed above 1,
    so a uniform draw can never land on a zero-probability trailing column
    through round-off.
    """
    cum = np.cumsum(probs, axis=-1)
    positive = probs > 0
    last = probs.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    cols = np.arange(probs.shape[-1])
    cum = np.where(cols >= last[..., None], 2.0, cum)
    return cum


class Sampler:
    """Vectorized inverse-CDF simulator for a (kernel, policy) pair.

    Uniform draws are consumed in a fixed layout: for step ``i`` and chain
    ``c``, ``u[i, c, 0]`` picks the action and ``u[i, c, 1]`` the next state.
    """

    def __init__(self, kernel_probs: np.ndarray, policy_probs: np.ndarray):
        S, A, _ = kernel_probs.shape
        self.S, self.A = S, A
        self.cum_kernel = _cumulative(kernel_probs).reshape(S * A, S)
        self.cum_policy = _cumulative(policy_probs)

    def step(self, x: np.ndarray, u: np.ndarray):
        a = (u[:, 0, None] >= self.cum_policy[x]).sum(axis=1)
        y = (u[:, 1, None] >= self.cum_kernel[x * self.A + a]).sum(axis=1)
        return a, y

    def walk(self, x: int, u: np.ndarray):
        """Single chain from state ``x``; ``u`` has shape ``(steps, 2)``.

        Same selection rule as :meth:`step`, but a pure-Python loop over
        bisections, which is much faster than array calls for one chain.
        Returns the visited ``(state, action)`` row indices ``x * A + a`` and
        the next states as lists.
        """
        cum_pol = self.cum_policy.tolist()
        cum_ker = self.cum_kernel.tolist()
        A = self.A
        rows, nxt = [], []
        for u_a, u_t in u.tolist():
            row = x * A + bisect.bisect_right(cum_pol[x], u_a)
            x = bisect.bisect_right(cum_ker[row], u_t)
            rows.append(row)
            nxt.append(x)
        return rows, nxt

    def run(self, starts: np.ndarray, u: np.ndarray):
        """Simulate ``len(starts)`` chains for ``u.shape[0]`` steps.

        Returns ``states`` of shape ``(steps + 1, chains)`` and ``actions`` of
        shape ``(steps, chains)``.
        """
        steps, chains = u.shape[0], u.shape[1]
        if chains == 1:
            rows, nxt = self.walk(int(starts[0]), u[:, 0, :])
            states = np.empty((steps + 1, 1), dtype=np.int64)
            states[0, 0] = starts[0]
            states[1:, 0] = nxt
            return states, (np.asarray(rows, dtype=np.int64) % self.A)[:, None]
        states = np.empty((steps + 1, chains), dtype=np.int64)
        actions = np.empty((steps, chains), dtype=np.int64)
        states[0] = starts
        for i in range(steps):
            actions[i], states[i + 1] = self.step(states[i], u[i])
        return states, actions


def simulate_episodes(kernel: TransitionKernel, policy: Policy, start_states,
                      T: int, rng: np.random.Generator) -> EpisodicDataset:
    """Simulate one episode of length ``T`` from each start state.

    The generator is consumed as one ``(T, K, 2)`` uniform block.
    """
    starts = np.asarray(start_states, dtype=np.int64).reshape(-1)
    if T < 1:
        raise ValidationError("episode length T must be >= 1")
    if starts.min() < 0 or starts.max() >= kernel.space.S:
        raise ValidationError("start state out of range")
    u = rng.random((T, len(starts), 2))
    states, actions = Sampler(kernel.probs, policy.probs).run(starts, u)
    return EpisodicDataset.from_paths(kernel.space, states.T, actions.T)


def simulate_episode(kernel: TransitionKernel, policy: Policy, start_state: int,
                     T: int, rng: np.random.Generator) -> np.ndarray:
    """Simulate a single episode; returns a ``(T, 3)`` array of transitions."""
    return simulate_episodes(kernel, policy, [start_state], T, rng).episodes[0]


def concat_datasets(datasets: Iterable[EpisodicDataset]) -> EpisodicDataset:
    datasets = list(datasets)
    return EpisodicDataset(datasets[0].space, np.concatenate([d.episodes for d in datasets]))
