"""Entailment terminal reward, KL anchor reward, and their mixture.

``r_t = (1 - alpha) * r_nli_t + alpha * r_kl_t`` where ``r_nli`` pays the judge's
log P(entailed) on the last token only and ``r_kl`` is the per-token log ratio
``log pi_anchor(a|s) - log pi_current(a|s)``.
"""
from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .mdp import ContractError, Episode
from .policy import PolicyParams, episode_batch, log_softmax, policy_forward
from .synthtask import FactWorld

KL_MODES = ("per_token", "sequence_accumulated")


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.1
    kl_mode: str = "sequence_accumulated"
    oracle_beta: float = 4.0
    oracle_floor: float = 1e-6
    entail_threshold: float = 0.5
    exact_kl: bool = False

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ContractError("alpha must be in [0, 1]")
        if self.kl_mode not in KL_MODES:
            raise ContractError(f"kl_mode must be one of {KL_MODES}")
        if not self.oracle_beta > 0:
            raise ContractError("oracle_beta must be positive")
        if not 0 < self.oracle_floor < self.entail_threshold < 1:
            raise ContractError("need 0 < oracle_floor < entail_threshold < 1")


@dataclass(frozen=True)
class EntailmentJudgment:
    prob_entailed: float
    log_prob: float
    n_facts: int = 0
    n_unsupported: int = 0
    parse_ok: bool = True

    @classmethod
    def from_prob(cls, prob: float, floor: float = 0.0) -> "EntailmentJudgment":
        prob = min(1.0, max(float(prob), floor))
        return cls(prob, math.log(prob) if prob > 0 else -math.inf)


class Judge(Protocol):
    def __call__(self, document: Sequence[int], summary: Sequence[int]) -> EntailmentJudgment: ...


class OracleJudge:
    """Exact entailment on the fact grammar: P = exp(-beta * #unsupported facts)."""

    def __init__(self, world: FactWorld, cfg: RewardConfig | None = None):
        self.world = world
        self.cfg = cfg or RewardConfig()

    def __call__(self, document: Sequence[int], summary: Sequence[int]) -> EntailmentJudgment:
        return oracle_entailment(document, summary, self.cfg, self.world)


def oracle_entailment(
    document: Sequence[int], summary: Sequence[int], cfg: RewardConfig, world: FactWorld
) -> EntailmentJudgment:
    facts = world.parse(summary)
    if facts is None:
        return EntailmentJudgment(cfg.oracle_floor, math.log(cfg.oracle_floor), 0, 0, parse_ok=False)
    doc_facts = set(world.parse(world.strip_control(document)) or ())
    bad = sum(f not in doc_facts for f in facts)
    log_prob = -cfg.oracle_beta * bad
    return EntailmentJudgment(math.exp(log_prob), log_prob, len(facts), bad, True)


class SubprocessJudge:
    """Judge living in another process, one JSON record per line on stdin/stdout.

    Request: ``{"document": [ids], "summary": [ids]}``.
    Response: ``{"prob_entailed": p}``.
    """

    def __init__(self, command: Sequence[str], floor: float = 1e-6):
        self.floor = floor
        self._proc = subprocess.Popen(
            list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
        )

    def __call__(self, document: Sequence[int], summary: Sequence[int]) -> EntailmentJudgment:
        req = {"document": [int(t) for t in document], "summary": [int(t) for t in summary]}
        self._proc.stdin.write(json.dumps(req) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("remote judge closed its output stream")
        return EntailmentJudgment.from_prob(json.loads(line)["prob_entailed"], self.floor)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def nli_reward(episode: Episode, judgment: EntailmentJudgment) -> np.ndarray:
    if len(episode) == 0:
        raise ContractError("episode is empty")
    r = np.zeros(len(episode))
    r[-1] = judgment.log_prob
    return r


def accumulate_kl(per_token: np.ndarray, kl_mode: str) -> np.ndarray:
    if kl_mode == "per_token":
        return per_token
    if kl_mode != "sequence_accumulated":
        raise ContractError(f"unknown kl_mode {kl_mode!r}")
    out = np.zeros_like(per_token)
    if len(out):
        out[-1] = per_token.sum()
    return out


def kl_terms(
    anchor: PolicyParams, current: PolicyParams, batch, actions: np.ndarray, exact: bool = False
) -> np.ndarray:
    """Per-state KL reward for a flattened batch of states."""
    lp_anchor = log_softmax(policy_forward(anchor, batch)[0])
    lp_current = log_softmax(policy_forward(current, batch)[0])
    if exact:
        return -(np.exp(lp_current) * (lp_current - lp_anchor)).sum(axis=1)
    rows = np.arange(len(actions))
    return lp_anchor[rows, actions] - lp_current[rows, actions]


def kl_reward(
    episode: Episode,
    anchor: PolicyParams,
    current: PolicyParams,
    kl_mode: str = "per_token",
    exact: bool = False,
) -> np.ndarray:
    batch, actions = episode_batch(current.arch, [episode])
    return accumulate_kl(kl_terms(anchor, current, batch, actions, exact), kl_mode)


def mix_rewards(nli: np.ndarray, kl: np.ndarray, alpha: float) -> np.ndarray:
    return (1.0 - alpha) * nli + alpha * kl


def combined_reward(
    episode: Episode,
    judgment: EntailmentJudgment,
    anchor: PolicyParams,
    current: PolicyParams,
    cfg: RewardConfig,
) -> np.ndarray:
    """Mixed reward; also written into ``episode.rewards``."""
    r = mix_rewards(nli_reward(episode, judgment), kl_reward(episode, anchor, current, cfg.kl_mode, cfg.exact_kl), cfg.alpha)
    episode.rewards = r.tolist()
    return r


def entailment_rate(judgments: Sequence[EntailmentJudgment], cfg: RewardConfig | None = None) -> float:
    if not judgments:
        raise ValueError("entailment_rate of an empty list")
    thr = (cfg or RewardConfig()).entail_threshold
    return sum(j.prob_entailed > thr for j in judgments) / len(judgments)
