"""Supervised (MLE) pretraining of the anchor and on-policy actor-critic fine-tuning."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .mdp import ContractError, Episode, MdpLimits
from .policy import (
    Architecture,
    ContextFeatures,
    NonFiniteError,
    PolicyParams,
    StateBatch,
    ValueParams,
    _Params,
    clone_policy_as_value_init,
    episode_batch,
    episode_rng,
    featurize,
    log_softmax,
    policy_backward,
    policy_forward,
    rollout,
    value_backward,
    value_forward,
    weighted_score_grad,
)
from .rewards import RewardConfig, accumulate_kl, mix_rewards

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step",
    "mean_reward",
    "mean_nli_logprob",
    "mean_kl",
    "entailment_rate",
    "rouge1",
    "rouge2",
    "rougeL",
    "coverage",
    "density",
    "mean_length",
    "value_loss",
)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1.0
    gae_lambda: float = 0.95
    batch_size: int = 32
    temperature: float = 1.0
    lr_warmup_steps: int = 200
    policy_update_delay: int = 500
    policy_lr: float = 1e-3
    value_lr: float = 1e-3
    total_steps: int = 2000
    adv_norm_epsilon: float = 1e-8
    grad_clip: float | None = None
    eval_interval: int = 100
    eval_size: int = 200
    select_best: bool = False
    rollout_chunk: int = 32
    rollout_workers: int = 1
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ContractError("gamma and gae_lambda must lie in [0, 1]")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.policy_update_delay >= self.total_steps:
            raise ContractError("policy_update_delay must be smaller than total_steps")
        if not self.temperature > 0:
            raise ContractError("temperature must be > 0")


# Full-scale schedule for large-model runs; the desk-scale defaults above are 10x shorter
FULL_SCALE = dict(
    gamma=1.0,
    gae_lambda=0.95,
    batch_size=32,
    lr_warmup_steps=2000,
    policy_update_delay=5000,
    policy_lr=1e-5,
    value_lr=1e-5,
    total_steps=20000,
)


@dataclass(frozen=True)
class MLEConfig:
    lr: float = 3e-3
    batch_size: int = 32
    max_epochs: int = 60
    patience: int = 3
    min_delta: float = 1e-4
    seed: int = 0


# --------------------------------------------------------------------------- advantage estimation


@dataclass
class GaeResult:
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float = 1.0, lam: float = 0.95) -> GaeResult:
    """GAE with the value beyond the last step fixed at 0 (absorbing state)."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if r.shape != v.shape:
        raise ContractError(f"rewards {r.shape} and values {v.shape} differ in length")
    v_next = np.append(v[1:], 0.0)
    delta = r + gamma * v_next - v
    adv = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return GaeResult(adv, adv + v)


def episode_gae(ep: Episode, gamma: float = 1.0, lam: float = 0.95) -> GaeResult:
    return compute_gae(ep.rewards, ep.values, gamma, lam)


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    return (adv - adv.mean()) / (adv.std() + eps)


# --------------------------------------------------------------------------- losses


def policy_loss_grad(params: PolicyParams, batch: StateBatch, actions: np.ndarray, advantages: np.ndarray) -> PolicyParams:
    """Ascent direction: mean over tokens of ``A_t * grad log pi(a_t|s_t)``."""
    n = len(actions)
    _, g = weighted_score_grad(params, batch, actions, np.asarray(advantages, dtype=float) / n)
    return g


def value_loss_grad(
    vparams: ValueParams, batch: StateBatch, returns: np.ndarray, eps: float = 1e-8
) -> tuple[float, ValueParams]:
    """``mean((R - V)^2) / var(R)`` with R held fixed; var guarded below by ``eps``."""
    returns = np.asarray(returns, dtype=float)
    values, cache = value_forward(vparams, batch)
    scale = max(returns.var(), eps)
    err = values - returns
    loss = float(np.mean(err**2) / scale)
    return loss, value_backward(vparams, batch, cache, 2.0 * err / (len(err) * scale))


# --------------------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_params(cls, params: _Params) -> "AdamState":
        return cls(np.zeros(params.size), np.zeros(params.size))


def optimizer_step(
    params: _Params,
    grad: _Params,
    state: AdamState,
    lr: float,
    ascent: bool = False,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam update; returns (new params, new state).  Inputs are not mutated."""
    g = grad.ravel()
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * g
    v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    delta = lr * m_hat / (np.sqrt(v_hat) + eps)
    theta = params.ravel() + (delta if ascent else -delta)
    return params.unravel(theta), AdamState(m, v, t)


def clip_grad(grad: _Params, max_norm: float | None) -> _Params:
    if max_norm is None:
        return grad
    flat = grad.ravel()
    norm = float(np.sqrt(flat @ flat))
    if norm <= max_norm:
        return grad
    return grad.unravel(flat * (max_norm / norm))


def warmup_lr(base: float, steps_since_start: int, warmup: int) -> float:
    """Linear ramp from 0 reaching ``base`` after ``warmup`` updates."""
    if warmup <= 0:
        return base
    return base * min(1.0, (steps_since_start + 1) / warmup)


# --------------------------------------------------------------------------- supervised pretraining


@dataclass
class TeacherForcingData:
    batch: StateBatch
    actions: np.ndarray
    rows: list[np.ndarray]  # state rows per example


def teacher_forcing_data(arch: Architecture, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], eos_id: int) -> TeacherForcingData:
    """All (context, target prefix) states for reference + EOS targets."""
    feats = [ContextFeatures(c, arch.vocab_size) for c, _ in pairs]
    states, actions, rows = [], [], []
    for i, (_, target) in enumerate(pairs):
        seq = list(target) + [eos_id]
        start = len(actions)
        for t, a in enumerate(seq):
            states.append((i, seq[:t]))
            actions.append(a)
        rows.append(np.arange(start, len(actions)))
    return TeacherForcingData(featurize(arch, feats, states), np.asarray(actions, dtype=np.intp), rows)


def subset(batch: StateBatch, rows: np.ndarray) -> StateBatch:
    """Rows of a batch with its context bags compacted."""
    ctx = batch.ctx_index[rows]
    uniq, inverse = np.unique(ctx, return_inverse=True)
    return StateBatch(batch.win[rows], batch.ptr[rows], inverse.astype(np.intp), batch.bags[uniq])


def mean_cross_entropy(params: PolicyParams, data: TeacherForcingData, chunk: int = 8192) -> float:
    total = 0.0
    n = len(data.actions)
    for lo in range(0, n, chunk):
        rows = np.arange(lo, min(n, lo + chunk))
        b = subset(data.batch, rows)
        lp = log_softmax(policy_forward(params, b)[0])
        total -= lp[np.arange(len(rows)), data.actions[rows]].sum()
    return total / n


def mle_pretrain(
    examples: Sequence,
    arch: Architecture,
    eos_id: int,
    cfg: MLEConfig = MLEConfig(),
    val_examples: Sequence | None = None,
    init: PolicyParams | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Minimize per-token cross-entropy of reference (+EOS) given the policy context.

    Stops after ``max_epochs`` or when validation loss has not improved by
    ``min_delta`` for ``patience`` epochs; returns the best-validation params.
    """
    if not examples:
        raise ContractError("mle_pretrain needs a non-empty corpus")
    rng = np.random.default_rng(cfg.seed)
    params = init.copy() if init is not None else PolicyParams.init(arch, rng)
    data = teacher_forcing_data(arch, [(ex.policy_context(), ex.reference) for ex in examples], eos_id)
    val = teacher_forcing_data(arch, [(ex.policy_context(), ex.reference) for ex in val_examples], eos_id) if val_examples else None
    state = AdamState.for_params(params)
    best, best_loss, stale, history = params, math.inf, 0, []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(examples))
        train_loss = 0.0
        for lo in range(0, len(order), cfg.batch_size):
            rows = np.concatenate([data.rows[i] for i in order[lo : lo + cfg.batch_size]])
            b = subset(data.batch, rows)
            lp, g = weighted_score_grad(params, b, data.actions[rows], np.full(len(rows), 1.0 / len(rows)))
            ce = -float(lp.mean())
            if not math.isfinite(ce):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}, batch offset {lo}")
            train_loss += ce * len(rows)
            params, state = optimizer_step(params, g, state, cfg.lr, ascent=True)
        train_loss /= len(data.actions)
        val_loss = mean_cross_entropy(params, val) if val is not None else train_loss
        history.append({"epoch": epoch, "train_ce": train_loss, "val_ce": val_loss})
        log.info("mle epoch %d train_ce=%.4f val_ce=%.4f", epoch, train_loss, val_loss)
        if on_epoch:
            on_epoch(epoch, train_loss, val_loss)
        if val_loss < best_loss - cfg.min_delta:
            best, best_loss, stale = params, val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history


# --------------------------------------------------------------------------- RL fine-tuning


@dataclass
class RLState:
    params: PolicyParams
    vparams: ValueParams
    policy_opt: AdamState
    value_opt: AdamState
    step: int = 0


def _rollouts(params, contexts, cfg: TrainConfig, limits, eos_id, step: int, pool) -> list[Episode]:
    rngs = [episode_rng(cfg.seed, 1, step, i) for i in range(len(contexts))]
    chunks = [
        (contexts[lo : lo + cfg.rollout_chunk], rngs[lo : lo + cfg.rollout_chunk])
        for lo in range(0, len(contexts), cfg.rollout_chunk)
    ]
    work = lambda c: rollout(params, c[0], cfg.temperature, limits, eos_id, c[1])
    results = pool.map(work, chunks) if pool is not None else map(work, chunks)
    return [ep for part in results for ep in part]


@dataclass
class StepStats:
    mean_reward: float
    mean_nli_logprob: float
    mean_kl: float
    entailment_rate: float
    mean_length: float
    value_loss: float


def rl_step(
    st: RLState,
    anchor: PolicyParams,
    documents: Sequence[Sequence[int]],
    judge,
    reward_cfg: RewardConfig,
    cfg: TrainConfig,
    limits: MdpLimits,
    eos_id: int,
    pool=None,
) -> tuple[RLState, StepStats, list[Episode]]:
    step = st.step
    doc_rng = episode_rng(cfg.seed, 0, step)
    picks = doc_rng.integers(len(documents), size=cfg.batch_size)
    contexts = [tuple(documents[i]) for i in picks]
    episodes = _rollouts(st.params, contexts, cfg, limits, eos_id, step, pool)

    batch, actions = episode_batch(st.params.arch, episodes)
    rows = np.arange(len(actions))
    logits_cur, cache_cur = policy_forward(st.params, batch)
    lp_cur = log_softmax(logits_cur)
    lp_anchor = log_softmax(policy_forward(anchor, batch)[0])
    if reward_cfg.exact_kl:
        kl_tok = -(np.exp(lp_cur) * (lp_cur - lp_anchor)).sum(axis=1)
    else:
        kl_tok = lp_anchor[rows, actions] - lp_cur[rows, actions]
    values = value_forward(st.vparams, batch)[0]

    advs, rets, nli_lp, ent, rew, kl_sum = [], [], [], [], [], []
    offset = 0
    for ep in episodes:
        n = len(ep)
        sl = slice(offset, offset + n)
        offset += n
        j = judge(ep.context, ep.actions)
        nli = np.zeros(n)
        nli[-1] = j.log_prob
        r = mix_rewards(nli, accumulate_kl(kl_tok[sl], reward_cfg.kl_mode), reward_cfg.alpha)
        ep.rewards = r.tolist()
        ep.values = values[sl].tolist()
        g = compute_gae(r, values[sl], cfg.gamma, cfg.gae_lambda)
        advs.append(g.advantages)
        rets.append(g.returns)
        nli_lp.append(j.log_prob)
        ent.append(j.prob_entailed > reward_cfg.entail_threshold)
        rew.append(r.sum())
        kl_sum.append(-kl_tok[sl].sum())
    adv = np.concatenate(advs)
    ret = np.concatenate(rets)

    vloss, vgrad = value_loss_grad(st.vparams, batch, ret, cfg.adv_norm_epsilon)
    vgrad = clip_grad(vgrad, cfg.grad_clip)
    vgrad.check_finite(f"value gradient at step {step}")
    vlr = warmup_lr(cfg.value_lr, step, cfg.lr_warmup_steps)
    vparams, value_opt = optimizer_step(st.vparams, vgrad, st.value_opt, vlr)

    params, policy_opt = st.params, st.policy_opt
    if step >= cfg.policy_update_delay:
        a_norm = normalize_advantages(adv, cfg.adv_norm_epsilon)
        probs = np.exp(lp_cur)
        w = a_norm / len(a_norm)
        dlogits = -probs * w[:, None]
        dlogits[rows, actions] += w
        pgrad = clip_grad(policy_backward(st.params, batch, cache_cur, dlogits), cfg.grad_clip)
        pgrad.check_finite(f"policy gradient at step {step}")
        plr = warmup_lr(cfg.policy_lr, step - cfg.policy_update_delay, cfg.lr_warmup_steps)
        params, policy_opt = optimizer_step(st.params, pgrad, st.policy_opt, plr, ascent=True)

    for what, p in (("policy", params), ("value", vparams)):
        if not p.all_finite():
            raise NonFiniteError(f"{what} parameters became non-finite at step {step} (value_loss={vloss:.4g})")

    stats = StepStats(
        mean_reward=float(np.mean(rew)),
        mean_nli_logprob=float(np.mean(nli_lp)),
        mean_kl=float(np.mean(kl_sum)),
        entailment_rate=float(np.mean(ent)),
        mean_length=float(np.mean([len(ep.summary) - (ep.summary[-1] == eos_id) for ep in episodes])),
        value_loss=vloss,
    )
    return RLState(params, vparams, policy_opt, value_opt, step + 1), stats, episodes


def rl_finetune(
    anchor: PolicyParams,
    documents: Sequence[Sequence[int]],
    judge,
    reward_cfg: RewardConfig,
    cfg: TrainConfig,
    limits: MdpLimits,
    eos_id: int,
    evaluator: Callable[[PolicyParams], dict] | None = None,
    on_log: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, PolicyParams, ValueParams], None] | None = None,
    on_step: Callable[[int, StepStats], None] | None = None,
) -> tuple[PolicyParams, list[dict]]:
    """Fine-tune a copy of ``anchor`` against the mixed reward; returns (params, log rows).

    Only documents are consumed.  The value net is trained from step 0; the
    policy is frozen for ``policy_update_delay`` steps.  ``evaluator`` is called
    every ``eval_interval`` steps and its metrics join the log row.
    ``on_checkpoint`` receives (step, policy, value) every
    ``checkpoint_interval`` steps (if positive) and after the last step.
    ``on_step`` receives (step, batch statistics) after every update.
    """
    if not documents:
        raise ContractError("rl_finetune needs documents")
    st = RLState(
        anchor.copy(),
        clone_policy_as_value_init(anchor),
        AdamState.for_params(anchor),
        AdamState.for_params(clone_policy_as_value_init(anchor)),
    )
    history: list[dict] = []
    window: list[StepStats] = []
    best = (-math.inf, st.params)
    pool = ThreadPoolExecutor(cfg.rollout_workers) if cfg.rollout_workers > 1 else None
    try:
        for step in range(cfg.total_steps):
            st, stats, _ = rl_step(st, anchor, documents, judge, reward_cfg, cfg, limits, eos_id, pool)
            window.append(stats)
            if on_step:
                on_step(step + 1, stats)
            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
                row = {"step": step + 1}
                for name in ("mean_reward", "mean_nli_logprob", "mean_kl", "entailment_rate", "mean_length", "value_loss"):
                    row[name] = float(np.mean([getattr(s, name) for s in window]))
                window = []
                if evaluator is not None:
                    metrics = evaluator(st.params)
                    row.update({k: metrics[k] for k in LOG_COLUMNS if k in metrics and k != "step"})
                    if cfg.select_best and metrics["entailment_rate"] > best[0]:
                        best = (metrics["entailment_rate"], st.params)
                history.append({k: row.get(k, float("nan")) for k in LOG_COLUMNS})
                if on_log:
                    on_log(history[-1])
                log.info("rl step %d reward=%.3f ent=%.3f len=%.2f", step + 1, row["mean_reward"], row["entailment_rate"], row["mean_length"])
            if on_checkpoint and (
                step + 1 == cfg.total_steps or (cfg.checkpoint_interval > 0 and (step + 1) % cfg.checkpoint_interval == 0)
            ):
                on_checkpoint(step + 1, st.params, st.vparams)
    finally:
        if pool is not None:
            pool.shutdown()
    return (best[1] if cfg.select_best and evaluator is not None else st.params), history
