"""Model-based and episodic bootstrap replicates of the count estimator.

Replicate ``j`` draws all of its randomness from the stream keyed
``(*prefix, purpose, j)``. For the model-based scheme the stream is consumed as
a ``(T, K, 2)`` block of uniforms in time-major order; for the episodic scheme
as ``K`` integer draws. Because of this fixed layout the ensemble does not
depend on how replicates are batched or spread across worker processes.
"""

from __future__ import annotations

import enum
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import EPISODIC, MODEL_BASED, EpisodicDataset, Sampler, SeedSpec, StateActionSpace
from .counting import (CountStatistics, EstimatedModel, count, estimate, estimate_arrays,
                       repair_for_simulation, transition_index)

# Upper bound on uniforms held in memory at once during chunked simulation.
_CHUNK_FLOATS = 1 << 22


class Method(str, enum.Enum):
    MODEL_BASED = "model_based"
    EPISODIC = "episodic"


@dataclass(frozen=True)
class BootstrapConfig:
    B: int
    seeds: SeedSpec = field(default_factory=SeedSpec)
    method: Method = Method.MODEL_BASED
    workers: int = 1

    def __post_init__(self):
        if int(self.B) < 1:
            raise ValueError("B must be >= 1")
        object.__setattr__(self, "method", Method(self.method))


@dataclass(frozen=True, eq=False)
class BootstrapEnsemble:
    """``B`` replicate estimators stored as stacked arrays.

    ``n_sat`` has shape ``(B, S, A, S)``; ``kernels`` holds the ratio estimates
    (NaN on unvisited rows, see ``kernel_defined``).
    """

    space: StateActionSpace
    n_sat: np.ndarray
    method: Method
    config: BootstrapConfig
    K: int
    T: int
    kernels: np.ndarray = field(init=False)
    kernel_defined: np.ndarray = field(init=False)
    policies: np.ndarray = field(init=False)
    policy_defined: np.ndarray = field(init=False)

    def __post_init__(self):
        kernel, kdef, policy, pdef = estimate_arrays(self.n_sat)
        object.__setattr__(self, "kernels", kernel)
        object.__setattr__(self, "kernel_defined", kdef)
        object.__setattr__(self, "policies", policy)
        object.__setattr__(self, "policy_defined", pdef)

    @property
    def B(self) -> int:
        return self.n_sat.shape[0]

    def __len__(self) -> int:
        return self.B

    def __getitem__(self, j: int) -> EstimatedModel:
        return estimate(CountStatistics(self.space, self.n_sat[j]))

    @property
    def replicates(self) -> list[EstimatedModel]:
        return [self[j] for j in range(self.B)]

    def dump_jsonl(self, path) -> None:
        """Write one JSON object per replicate (counts only) for debugging."""
        with open(path, "w", encoding="utf-8") as fh:
            for j in range(self.B):
                fh.write(json.dumps({"replicate": j, "method": self.method.value,
                                     "n_sat": self.n_sat[j].tolist()}) + "\n")


def _simulate_scalar(sampler: Sampler, x: int, u: np.ndarray, counts: np.ndarray) -> int:
    """Add one chain's transitions to ``counts`` in place; returns the final state."""
    rows, nxt = sampler.walk(x, u)
    if not rows:
        return x
    flat = np.asarray(rows, dtype=np.int64) * sampler.S + np.asarray(nxt, dtype=np.int64)
    counts += np.bincount(flat, minlength=counts.size).reshape(counts.shape)
    return nxt[-1]


def simulate_counts(kernel: np.ndarray, policy: np.ndarray, starts, T: int, generators):
    """Simulate ``K`` episodes of length ``T`` per generator and return counts.

    ``starts`` holds the ``K`` episode start states shared by every replicate.
    Returns an int64 array of shape ``(len(generators), S, A, S)``.
    """
    S, A, _ = kernel.shape
    starts = np.asarray(starts, dtype=np.int64)
    K, B = len(starts), len(generators)
    sampler = Sampler(kernel, policy)
    counts = np.zeros((B, S, A, S), dtype=np.int64)
    chains = B * K
    chunk = max(1, min(T, _CHUNK_FLOATS // (2 * chains)))
    if chains == 1:
        # Long single chains are far faster one step at a time in pure Python.
        x = int(starts[0])
        chunk = min(T, 100_000)
        for t0 in range(0, T, chunk):
            c = min(chunk, T - t0)
            x = _simulate_scalar(sampler, x, generators[0].random((c, 1, 2))[:, 0, :], counts[0])
        return counts
    x = np.tile(starts, B)
    group = np.repeat(np.arange(B), K) * (S * A * S)
    flat_counts = counts.reshape(-1)
    for t0 in range(0, T, chunk):
        c = min(chunk, T - t0)
        u = np.concatenate([g.random((c, K, 2)) for g in generators], axis=1)
        idx = np.empty((c, chains), dtype=np.int64)
        for i in range(c):
            a, y = sampler.step(x, u[i])
            idx[i] = group + (x * A + a) * S + y
            x = y
        flat_counts += np.bincount(idx.ravel(), minlength=flat_counts.size)
    return counts


def model_based_replicate(source: EpisodicDataset, model: EstimatedModel,
                          rng: np.random.Generator) -> EstimatedModel:
    """One bootstrap replicate simulated from the repaired estimated model.

    Episode ``k`` starts at the observed start state of source episode ``k``.
    """
    kernel, policy = repair_for_simulation(model)
    counts = simulate_counts(kernel.probs, policy.probs, source.start_states, source.T, [rng])
    return estimate(CountStatistics(source.space, counts[0]))


def episode_counts(source: EpisodicDataset) -> np.ndarray:
    """Per-episode transition counts, shape ``(K, S*A*S)``."""
    space = source.space
    ep = source.episodes
    flat = transition_index(space, ep[..., 0], ep[..., 1], ep[..., 2])
    size = space.S * space.A * space.S
    offsets = np.arange(source.K)[:, None] * size
    return np.bincount((flat + offsets).ravel(), minlength=source.K * size).reshape(source.K, size)


def _episodic_counts(source: EpisodicDataset, generators) -> np.ndarray:
    K = source.K
    per_episode = episode_counts(source)
    weights = np.stack([np.bincount(g.integers(0, K, size=K), minlength=K) for g in generators])
    S, A = source.space.S, source.space.A
    return (weights @ per_episode).reshape(len(generators), S, A, S)


def episodic_replicate(source: EpisodicDataset, rng: np.random.Generator) -> EstimatedModel:
    """Resample ``K`` whole episodes with replacement and re-estimate."""
    counts = _episodic_counts(source, [rng])[0]
    return estimate(CountStatistics(source.space, counts))


def _replicate_counts(source, sim_kernel, sim_policy, method, seeds, prefix, indices):
    purpose = MODEL_BASED if method is Method.MODEL_BASED else EPISODIC
    gens = [seeds.stream(*prefix, purpose, j) for j in indices]
    if method is Method.MODEL_BASED:
        return simulate_counts(sim_kernel, sim_policy, source.start_states, source.T, gens)
    return _episodic_counts(source, gens)


def run_ensemble(source: EpisodicDataset, model: EstimatedModel | None,
                 config: BootstrapConfig, prefix: tuple = ()) -> BootstrapEnsemble:
    """Generate ``config.B`` replicates.

    ``prefix`` is prepended to every stream key; the harness passes
    ``(grid_index, rep_index)``. With ``config.workers > 1`` replicate blocks
    are spread over worker processes; the result is identical either way.
    """
    method = Method(config.method)
    sim_kernel = sim_policy = None
    if method is Method.MODEL_BASED:
        if model is None:
            model = estimate(count(source))
        k, p = repair_for_simulation(model)
        sim_kernel, sim_policy = k.probs, p.probs
    indices = np.arange(config.B)
    if config.workers <= 1 or config.B == 1:
        counts = _replicate_counts(source, sim_kernel, sim_policy, method, config.seeds,
                                   prefix, indices)
    else:
        blocks = np.array_split(indices, min(config.workers, config.B))
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            parts = pool.map(_replicate_counts, *zip(*[
                (source, sim_kernel, sim_policy, method, config.seeds, prefix, b)
                for b in blocks]))
            counts = np.concatenate(list(parts))
    return BootstrapEnsemble(source.space, counts, method, config, source.K, source.T)

