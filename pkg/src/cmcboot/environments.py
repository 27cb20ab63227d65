"""Built-in RiverSwim instance and the JSON MDP file format.

File format::

    {"S": int, "A": int, "kernel": [[[float]]], "rewards": [[float]], "gamma": float}

with ``kernel[s][a][t]`` and ``rewards[s][a]``, all indices 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (CMCError, RewardTable, StateActionSpace, TransitionKernel,
                   ValidationError)


class ParseError(CMCError):
    pass


@dataclass(frozen=True, eq=False)
class MdpInstance:
    kernel: TransitionKernel
    rewards: RewardTable
    name: str = "mdp"

    @property
    def space(self) -> StateActionSpace:
        return self.kernel.space

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "S": self.space.S,
            "A": self.space.A,
            "kernel": self.kernel.probs.tolist(),
            "rewards": self.rewards.r.tolist(),
            "gamma": self.rewards.gamma,
        }


LEFT, RIGHT = 0, 1


def riverswim(gamma: float = 0.95) -> MdpInstance:
    """Six-state RiverSwim; action 0 swims left, action 1 swims right."""
    S, A = 6, 2
    m = np.zeros((S, A, S))
    m[0, LEFT, 0] = 1.0
    for s in range(1, S):
        m[s, LEFT, s - 1] = 1.0
    m[0, RIGHT, 0], m[0, RIGHT, 1] = 0.7, 0.3
    for s in range(1, S - 1):
        m[s, RIGHT, s - 1], m[s, RIGHT, s], m[s, RIGHT, s + 1] = 0.1, 0.6, 0.3
    m[S - 1, RIGHT, S - 2], m[S - 1, RIGHT, S - 1] = 0.7, 0.3
    r = np.zeros((S, A))
    r[0, LEFT] = 1.0
    r[S - 1, RIGHT] = 10.0
    space = StateActionSpace(S, A)
    return MdpInstance(TransitionKernel(space, m), RewardTable(space, r, gamma), "riverswim")


BUILTIN = {"riverswim": riverswim}


def mdp_from_dict(data: dict, source: str = "<dict>") -> MdpInstance:
    try:
        S, A = int(data["S"]), int(data["A"])
        kernel = np.asarray(data["kernel"], dtype=float)
        rewards = np.asarray(data["rewards"], dtype=float)
        gamma = float(data["gamma"])
    except KeyError as exc:
        raise ParseError(f"{source}: missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{source}: {exc}") from exc
    try:
        space = StateActionSpace(S, A)
        return MdpInstance(TransitionKernel(space, kernel), RewardTable(space, rewards, gamma),
                           str(data.get("name", Path(source).stem)))
    except ValidationError as exc:
        exc.args = (f"{source}: {exc}",)
        raise


def load_mdp(path) -> MdpInstance:
    """Load a JSON MDP file, or a built-in instance by name (``"riverswim"``)."""
    if str(path) in BUILTIN:
        return BUILTIN[str(path)]()
    try:
        text = Path(path).read_text(encoding="utf-8")
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return mdp_from_dict(data, str(path))


def save_mdp(mdp: MdpInstance, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict(), indent=1) + "\n", encoding="utf-8")
