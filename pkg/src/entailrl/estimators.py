"""scikit-learn style wrappers: ``fit`` on token-id sequences, ``predict`` summaries.

``X`` is a list of documents and ``y`` a list of reference summaries, each a
sequence of non-negative token ids.  The supervised estimator needs ``y``; the
RL estimator ignores it.
"""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .mdp import MdpLimits
from .metrics import rouge_n, strip_eos
from .policy import Architecture, DecodeConfig, PolicyParams, decode
from .rewards import RewardConfig, entailment_rate
from .synthtask import Example
from .trainer import MLEConfig, TrainConfig, mle_pretrain, rl_finetune


def check_sequences(X, name: str = "X", vocab_size: int | None = None, allow_empty: bool = True) -> list[tuple[int, ...]]:
    """Validate a non-empty collection of integer token sequences."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError(f"{name} must be a list of token-id sequences, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError(f"{name} is empty")
    out = []
    for i, seq in enumerate(X):
        if isinstance(seq, (str, bytes)) or not hasattr(seq, "__iter__"):
            raise TypeError(f"{name}[{i}] is not a sequence of token ids")
        ids = tuple(seq)
        for t in ids:
            if not isinstance(t, numbers.Integral) or isinstance(t, bool):
                raise TypeError(f"{name}[{i}] holds a non-integer token {t!r}")
            if t < 0 or (vocab_size is not None and t >= vocab_size):
                raise ValueError(f"{name}[{i}] holds token {t} outside the vocabulary")
        if not ids and not allow_empty:
            raise ValueError(f"{name}[{i}] is empty")
        out.append(tuple(int(t) for t in ids))
    return out


def check_pairs(X, y, vocab_size: int | None = None):
    X = check_sequences(X, "X", vocab_size, allow_empty=False)
    y = check_sequences(y, "y", vocab_size)
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
    return X, y


def _infer_vocab(eos_id: int, *collections) -> int:
    top = max((max(s) for c in collections for s in c if s), default=0)
    return max(top, eos_id) + 1


class SupervisedSummarizer(BaseEstimator):
    """MLE-trained windowed policy; the SL anchor as an estimator."""

    def __init__(
        self,
        hidden_size=64,
        embed_dim=16,
        window=4,
        bag_of_context=True,
        copy_pointer=True,
        learning_rate=3e-3,
        batch_size=32,
        max_epochs=60,
        patience=3,
        decode="beam",
        temperature=1.0,
        beam_width=4,
        brevity_penalty=0.6,
        horizon=32,
        context_max=32,
        eos_id=0,
        vocab_size=None,
        random_state=0,
    ):
        self.hidden_size = hidden_size
        self.embed_dim = embed_dim
        self.window = window
        self.bag_of_context = bag_of_context
        self.copy_pointer = copy_pointer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.decode = decode
        self.temperature = temperature
        self.beam_width = beam_width
        self.brevity_penalty = brevity_penalty
        self.horizon = horizon
        self.context_max = context_max
        self.eos_id = eos_id
        self.vocab_size = vocab_size
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_pairs(X, y, self.vocab_size)
        val = None
        if X_val is not None:
            Xv, yv = check_pairs(X_val, y_val, self.vocab_size)
            val = [Example(d, r, False) for d, r in zip(Xv, yv)]
        self.vocab_size_ = self.vocab_size or _infer_vocab(self.eos_id, X, y, *(val and ([e.document for e in val], [e.reference for e in val]) or ()))
        arch = Architecture(self.vocab_size_, self.embed_dim, self.window, self.hidden_size, self.bag_of_context, self.copy_pointer)
        cfg = MLEConfig(self.learning_rate, self.batch_size, self.max_epochs, self.patience, seed=int(self.random_state))
        examples = [Example(d, r, False) for d, r in zip(X, y)]
        self.params_, self.history_ = mle_pretrain(examples, arch, self.eos_id, cfg, val)
        return self

    def _decode_config(self) -> DecodeConfig:
        return DecodeConfig(self.decode, self.temperature, self.beam_width, self.brevity_penalty, int(self.random_state))

    def predict(self, X) -> list[tuple[int, ...]]:
        check_is_fitted(self, "params_")
        X = check_sequences(X, "X", self.vocab_size_, allow_empty=False)
        limits = MdpLimits(self.horizon, self.context_max)
        return decode(self.params_, X, self._decode_config(), limits, self.eos_id)

    def score(self, X, y) -> float:
        """Mean ROUGE-1 F1 of predictions against ``y``."""
        X, y = check_pairs(X, y, getattr(self, "vocab_size_", self.vocab_size))
        preds = self.predict(X)
        return float(np.mean([rouge_n(strip_eos(r, self.eos_id), strip_eos(p, self.eos_id)) for r, p in zip(y, preds)]))


class EntailmentRLSummarizer(BaseEstimator):
    """Reference-free fine-tuning of an anchor against ``judge`` plus the KL anchor reward.

    ``anchor`` is a fitted :class:`SupervisedSummarizer` or raw
    :class:`PolicyParams`; ``judge(document, summary)`` returns an
    :class:`EntailmentJudgment`.
    """

    def __init__(
        self,
        anchor=None,
        judge=None,
        alpha=0.1,
        temperature=1.0,
        kl_mode="sequence_accumulated",
        gamma=1.0,
        gae_lambda=0.95,
        batch_size=32,
        total_steps=2000,
        policy_update_delay=500,
        lr_warmup_steps=200,
        policy_lr=1e-3,
        value_lr=1e-3,
        horizon=32,
        context_max=32,
        eos_id=0,
        random_state=0,
    ):
        self.anchor = anchor
        self.judge = judge
        self.alpha = alpha
        self.temperature = temperature
        self.kl_mode = kl_mode
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.policy_update_delay = policy_update_delay
        self.lr_warmup_steps = lr_warmup_steps
        self.policy_lr = policy_lr
        self.value_lr = value_lr
        self.horizon = horizon
        self.context_max = context_max
        self.eos_id = eos_id
        self.random_state = random_state

    def _anchor_params(self) -> PolicyParams:
        if isinstance(self.anchor, PolicyParams):
            return self.anchor
        if isinstance(self.anchor, SupervisedSummarizer):
            check_is_fitted(self.anchor, "params_")
            return self.anchor.params_
        raise TypeError("anchor must be a fitted SupervisedSummarizer or PolicyParams")

    def fit(self, X, y=None):
        """``y`` is accepted for API symmetry and never read."""
        if self.judge is None:
            raise ValueError("a judge is required")
        anchor = self._anchor_params()
        self.vocab_size_ = anchor.arch.vocab_size
        X = check_sequences(X, "X", self.vocab_size_, allow_empty=False)
        reward = RewardConfig(alpha=self.alpha, kl_mode=self.kl_mode)
        cfg = TrainConfig(
            gamma=self.gamma,
            gae_lambda=self.gae_lambda,
            batch_size=self.batch_size,
            temperature=self.temperature,
            lr_warmup_steps=self.lr_warmup_steps,
            policy_update_delay=self.policy_update_delay,
            policy_lr=self.policy_lr,
            value_lr=self.value_lr,
            total_steps=self.total_steps,
            eval_interval=max(1, self.total_steps // 20),
            seed=int(self.random_state),
        )
        limits = MdpLimits(self.horizon, self.context_max)
        self.params_, self.history_ = rl_finetune(anchor, X, self.judge, reward, cfg, limits, self.eos_id)
        return self

    def predict(self, X) -> list[tuple[int, ...]]:
        check_is_fitted(self, "params_")
        X = check_sequences(X, "X", self.vocab_size_, allow_empty=False)
        cfg = DecodeConfig("sample", self.temperature, seed=int(self.random_state))
        return decode(self.params_, X, cfg, MdpLimits(self.horizon, self.context_max), self.eos_id)

    def score(self, X, y=None) -> float:
        """Entailment rate of the predicted summaries under ``judge``."""
        X = check_sequences(X, "X", getattr(self, "vocab_size_", None), allow_empty=False)
        preds = self.predict(X)
        return entailment_rate([self.judge(d, s) for d, s in zip(X, preds)])
