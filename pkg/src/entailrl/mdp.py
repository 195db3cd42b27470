"""Token-level generation as a deterministic contextual MDP.

States are the tokens generated so far, the context is the input document,
actions are vocabulary ids.  A state holding EOS (or of horizon length) is
absorbing; rollouts simply stop there instead of looping on it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator, Literal, Sequence

import numpy as np

Role = Literal["context", "prefix", "complete"]

MAX_ENUMERATED_LEAVES = 10**6


class ContractError(ValueError):
    """Raised when an operation is called outside its preconditions."""


@dataclass(frozen=True)
class Vocabulary:
    """Dense integer vocabulary with reserved ids.

    ``separator_id`` may be ``None`` for toy vocabularies used by the
    enumeration tests; the fact-world vocabulary always sets it.
    """

    size: int
    eos_id: int
    separator_id: int | None = None
    ctrl_entailed_id: int | None = None
    ctrl_not_entailed_id: int | None = None
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 1:
            raise ContractError("vocabulary must be non-empty")
        reserved = [self.eos_id, self.separator_id, self.ctrl_entailed_id, self.ctrl_not_entailed_id]
        reserved = [r for r in reserved if r is not None]
        if len(set(reserved)) != len(reserved):
            raise ContractError(f"reserved ids collide: {reserved}")
        for r in reserved:
            if not 0 <= r < self.size:
                raise ContractError(f"reserved id {r} outside 0..{self.size - 1}")
        if self.separator_id is not None and self.size < 4:
            raise ContractError("a fact vocabulary needs EOS, separator and two content tokens")
        if self.names is not None and len(self.names) != self.size:
            raise ContractError("names must have one entry per token")

    @property
    def tokens(self) -> range:
        return range(self.size)

    def __len__(self) -> int:
        return self.size

    def name(self, token_id: int) -> str:
        if self.names is None:
            return str(token_id)
        return self.names[token_id]

    def render(self, ids: Sequence[int]) -> str:
        return " ".join(self.name(i) for i in ids)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    role: Role = "prefix"

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[int]:
        return iter(self.ids)

    def __getitem__(self, idx):
        return self.ids[idx]


def check_complete(seq: TokenSeq | Sequence[int], eos_id: int, horizon: int) -> None:
    ids = tuple(seq)
    if not ids:
        raise ContractError("a complete sequence cannot be empty")
    if eos_id in ids[:-1]:
        raise ContractError("tokens after EOS")
    if ids[-1] != eos_id and len(ids) != horizon:
        raise ContractError(f"sequence of length {len(ids)} neither ends in EOS nor reaches T={horizon}")


@dataclass(frozen=True)
class MdpLimits:
    horizon: int = 32
    context_max: int = 32

    def __post_init__(self):
        if self.horizon < 1 or self.context_max < 1:
            raise ContractError("horizon and context_max must be positive")

    def check_context(self, context: Sequence[int]) -> None:
        if len(context) > self.context_max:
            raise ContractError(f"context of {len(context)} tokens exceeds context_max={self.context_max}")


@dataclass
class Episode:
    """One rollout.  ``values[t]`` is the value estimate of the state before ``actions[t]``."""

    context: tuple[int, ...]
    actions: list[int] = field(default_factory=list)
    logprobs: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def summary(self) -> tuple[int, ...]:
        return tuple(self.actions)

    def validate(self, eos_id: int, horizon: int) -> None:
        n = len(self.actions)
        if not (len(self.logprobs) == len(self.values) == len(self.rewards) == n):
            raise ContractError("episode arrays have unequal lengths")
        check_complete(self.actions, eos_id, horizon)
        if self.truncated != (eos_id not in self.actions and n == horizon):
            raise ContractError("truncated flag inconsistent with actions")
        if any(lp > 0 for lp in self.logprobs):
            raise ContractError("log-probabilities must be <= 0")


def step(prefix: TokenSeq, action: int, limits: MdpLimits, eos_id: int) -> tuple[TokenSeq, bool]:
    """Append ``action`` to a non-terminal prefix."""
    if prefix.role != "prefix":
        raise ContractError(f"cannot step from a {prefix.role} sequence")
    if eos_id in prefix.ids:
        raise ContractError("cannot step from an absorbing (EOS) state")
    if len(prefix) >= limits.horizon:
        raise ContractError("cannot step past the horizon")
    ids = prefix.ids + (int(action),)
    terminal = action == eos_id or len(ids) == limits.horizon
    return TokenSeq(ids, "complete" if terminal else "prefix"), terminal


def count_trajectories(n_tokens: int, horizon: int) -> int:
    """Number of complete trajectories: sum_{k<T} (V-1)^k  +  (V-1)^T."""
    m = n_tokens - 1
    return sum(m**k for k in range(horizon)) + m**horizon


def enumerate_trajectories(context: TokenSeq, limits: MdpLimits, vocab: Vocabulary) -> list[TokenSeq]:
    """Every complete trajectory reachable from the empty prefix, each once."""
    n = count_trajectories(vocab.size, limits.horizon)
    if n > MAX_ENUMERATED_LEAVES:
        raise ContractError(f"refusing to enumerate {n} trajectories (limit {MAX_ENUMERATED_LEAVES})")
    content = [t for t in vocab.tokens if t != vocab.eos_id]
    out = []
    for k in range(limits.horizon):
        for body in itertools.product(content, repeat=k):
            out.append(TokenSeq(body + (vocab.eos_id,), "complete"))
    for body in itertools.product(content, repeat=limits.horizon):
        out.append(TokenSeq(body, "complete"))
    return out


def trajectory_states(traj: Sequence[int]) -> Iterator[tuple[tuple[int, ...], int]]:
    """Yield (pre-action prefix, action) pairs along a trajectory."""
    traj = tuple(traj)
    for t, a in enumerate(traj):
        yield traj[:t], a


def discounted_returns(rewards: Sequence[float], gamma: float = 1.0) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out
