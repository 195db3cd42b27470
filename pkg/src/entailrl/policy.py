"""Windowed feed-forward autoregressive policy and its value twin.

Features of a state are the embeddings of the last ``window`` tokens of
``context ++ [BOUNDARY] ++ prefix`` (left-padded with PAD), optionally the
mean embedding of the context (bag of context), and optionally the embedding
of the copy pointer: the context token that followed the most recent
occurrence of the state's last two tokens (falling back to the last token).
One tanh hidden layer feeds either a softmax head (policy) or a scalar head
(value).  All gradients are written out by hand.

BOUNDARY and PAD are embedding rows ``V`` and ``V + 1``; they are never actions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import ContractError, Episode, MdpLimits, TokenSeq

CHECKPOINT_VERSION = 1
INIT_SCALE = 0.08


class NonFiniteError(FloatingPointError):
    """Parameters or gradients stopped being finite."""


@dataclass(frozen=True)
class Architecture:
    vocab_size: int
    embed_dim: int = 16
    window: int = 4
    hidden_size: int = 64
    bag_of_context: bool = True
    copy_pointer: bool = True

    def __post_init__(self):
        if self.window < 1 or self.hidden_size < 1 or self.embed_dim < 1:
            raise ContractError("window, hidden_size and embed_dim must be >= 1")

    @property
    def boundary_row(self) -> int:
        return self.vocab_size

    @property
    def pad_row(self) -> int:
        return self.vocab_size + 1

    @property
    def n_rows(self) -> int:
        return self.vocab_size + 2

    @property
    def n_features(self) -> int:
        return (self.window + int(self.bag_of_context) + int(self.copy_pointer)) * self.embed_dim


class _Params:
    names: tuple[str, ...] = ()

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in self.names}

    def copy(self):
        return replace(self, **{n: a.copy() for n, a in self.arrays().items()})

    def zeros_like(self):
        return replace(self, **{n: np.zeros_like(a) for n, a in self.arrays().items()})

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def unravel(self, flat: np.ndarray):
        out, i = {}, 0
        for n, a in self.arrays().items():
            out[n] = np.asarray(flat[i : i + a.size], dtype=float).reshape(a.shape).copy()
            i += a.size
        return replace(self, **out)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays().values())

    def check_finite(self, what: str = "parameters") -> None:
        for n, a in self.arrays().items():
            if not np.isfinite(a).all():
                raise NonFiniteError(f"non-finite {what} in '{n}'")


@dataclass(eq=False)
class PolicyParams(_Params):
    arch: Architecture
    emb: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    names = ("emb", "W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator | int | None = 0) -> "PolicyParams":
        rng = np.random.default_rng(rng)
        u = lambda *shape: rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        return cls(
            arch,
            emb=u(arch.n_rows, arch.embed_dim),
            W1=u(arch.n_features, arch.hidden_size),
            b1=np.zeros(arch.hidden_size),
            W2=u(arch.hidden_size, arch.vocab_size),
            b2=np.zeros(arch.vocab_size),
        )

    @classmethod
    def zeros(cls, arch: Architecture) -> "PolicyParams":
        return cls(
            arch,
            np.zeros((arch.n_rows, arch.embed_dim)),
            np.zeros((arch.n_features, arch.hidden_size)),
            np.zeros(arch.hidden_size),
            np.zeros((arch.hidden_size, arch.vocab_size)),
            np.zeros(arch.vocab_size),
        )


@dataclass(eq=False)
class ValueParams(_Params):
    arch: Architecture
    emb: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    names = ("emb", "W1", "b1", "w_out", "b_out")

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator | int | None = 0) -> "ValueParams":
        return clone_policy_as_value_init(PolicyParams.init(arch, rng))


def clone_policy_as_value_init(params: PolicyParams) -> ValueParams:
    """Copy the feature stack; the scalar head starts at zero."""
    h = params.arch.hidden_size
    return ValueParams(params.arch, params.emb.copy(), params.W1.copy(), params.b1.copy(), np.zeros(h), np.zeros(1))


# --------------------------------------------------------------------------- features


class ContextFeatures:
    """Per-context lookups: token bag and copy-pointer tables."""

    __slots__ = ("ids", "bag", "bigram_next", "unigram_next")

    def __init__(self, ids: Sequence[int], vocab_size: int):
        self.ids = tuple(int(i) for i in ids)
        bag = np.zeros(vocab_size)
        if self.ids:
            np.add.at(bag, list(self.ids), 1.0)
            bag /= len(self.ids)
        self.bag = bag
        # later occurrences overwrite earlier ones: "most recent" wins
        self.bigram_next: dict[tuple[int, int], int] = {}
        self.unigram_next: dict[int, int] = {}
        for j in range(1, len(self.ids)):
            self.unigram_next[self.ids[j - 1]] = self.ids[j]
            if j >= 2:
                self.bigram_next[(self.ids[j - 2], self.ids[j - 1])] = self.ids[j]

    def pointer(self, last2: int, last1: int, pad_row: int) -> int:
        nxt = self.bigram_next.get((last2, last1))
        if nxt is None:
            nxt = self.unigram_next.get(last1, pad_row)
        return nxt


@dataclass
class StateBatch:
    """Flattened states: window rows, pointer rows, and an index into ``bags``."""

    win: np.ndarray  # (N, w) int
    ptr: np.ndarray  # (N,) int
    ctx_index: np.ndarray  # (N,) int
    bags: np.ndarray  # (n_ctx, V)

    def __len__(self) -> int:
        return len(self.ctx_index)


def state_rows(ctx: ContextFeatures, prefix: Sequence[int], arch: Architecture) -> tuple[list[int], int]:
    """Window rows and pointer row for one (context, prefix) state."""
    seq = list(ctx.ids) + [arch.boundary_row] + list(prefix)
    win = seq[-arch.window :]
    win = [arch.pad_row] * (arch.window - len(win)) + win
    last2 = seq[-2] if len(seq) >= 2 else arch.pad_row
    return win, ctx.pointer(last2, seq[-1], arch.pad_row)


def featurize(
    arch: Architecture,
    contexts: Sequence[ContextFeatures],
    states: Sequence[tuple[int, Sequence[int]]],
    bags: np.ndarray | None = None,
) -> StateBatch:
    """Build a batch from (context index, prefix) pairs; ``bags`` may be pre-stacked."""
    win = np.empty((len(states), arch.window), dtype=np.intp)
    ptr = np.empty(len(states), dtype=np.intp)
    cidx = np.empty(len(states), dtype=np.intp)
    for i, (c, prefix) in enumerate(states):
        w, p = state_rows(contexts[c], prefix, arch)
        win[i], ptr[i], cidx[i] = w, p, c
    if bags is None:
        bags = np.stack([c.bag for c in contexts]) if contexts else np.zeros((0, arch.vocab_size))
    return StateBatch(win, ptr, cidx, bags)


def _features(p: _Params, batch: StateBatch) -> np.ndarray:
    arch = p.arch
    parts = [p.emb[batch.win].reshape(len(batch), -1)]
    if arch.bag_of_context:
        ctx_emb = batch.bags @ p.emb[: arch.vocab_size]
        parts.append(ctx_emb[batch.ctx_index])
    if arch.copy_pointer:
        parts.append(p.emb[batch.ptr])
    return np.concatenate(parts, axis=1)


def _hidden(p: _Params, batch: StateBatch) -> tuple[np.ndarray, np.ndarray]:
    x = _features(p, batch)
    return x, np.tanh(x @ p.W1 + p.b1)


def _backprop_features(p: _Params, batch: StateBatch, x: np.ndarray, z: np.ndarray, dz: np.ndarray, grad: _Params):
    arch, d = p.arch, p.arch.embed_dim
    dpre = dz * (1.0 - z * z)
    grad.W1 += x.T @ dpre
    grad.b1 += dpre.sum(axis=0)
    dx = dpre @ p.W1.T
    nw = arch.window * d
    np.add.at(grad.emb, batch.win.ravel(), dx[:, :nw].reshape(-1, d))
    col = nw
    if arch.bag_of_context:
        dctx = np.zeros((batch.bags.shape[0], d))
        np.add.at(dctx, batch.ctx_index, dx[:, col : col + d])
        grad.emb[: arch.vocab_size] += batch.bags.T @ dctx
        col += d
    if arch.copy_pointer:
        np.add.at(grad.emb, batch.ptr, dx[:, col : col + d])


def policy_forward(p: PolicyParams, batch: StateBatch):
    x, z = _hidden(p, batch)
    return z @ p.W2 + p.b2, (x, z)


def policy_backward(p: PolicyParams, batch: StateBatch, cache, dlogits: np.ndarray) -> PolicyParams:
    """Gradient of ``sum(dlogits * logits)`` w.r.t. every parameter."""
    x, z = cache
    g = p.zeros_like()
    g.W2 += z.T @ dlogits
    g.b2 += dlogits.sum(axis=0)
    _backprop_features(p, batch, x, z, dlogits @ p.W2.T, g)
    return g


def value_forward(v: ValueParams, batch: StateBatch):
    x, z = _hidden(v, batch)
    return z @ v.w_out + v.b_out[0], (x, z)


def value_backward(v: ValueParams, batch: StateBatch, cache, dvalues: np.ndarray) -> ValueParams:
    """Gradient of ``sum(dvalues * values)``."""
    x, z = cache
    g = v.zeros_like()
    g.w_out += z.T @ dvalues
    g.b_out += dvalues.sum()
    _backprop_features(v, batch, x, z, np.outer(dvalues, v.w_out), g)
    return g


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=float) / temperature))


def policy_logprobs(p: PolicyParams, batch: StateBatch, actions: np.ndarray) -> np.ndarray:
    logits, _ = policy_forward(p, batch)
    return log_softmax(logits)[np.arange(len(batch)), actions]


def weighted_score_grad(p: PolicyParams, batch: StateBatch, actions: np.ndarray, weights: np.ndarray):
    """Return (log pi(a|s) per row, gradient of sum_i w_i log pi(a_i|s_i))."""
    logits, cache = policy_forward(p, batch)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(len(batch))
    dlogits = -probs * weights[:, None]
    dlogits[rows, actions] += weights
    return logp[rows, actions], policy_backward(p, batch, cache, dlogits)


# --------------------------------------------------------------------------- single-state API


def _single(arch: Architecture, context: Sequence[int], prefix: Sequence[int]) -> StateBatch:
    return featurize(arch, [ContextFeatures(tuple(context), arch.vocab_size)], [(0, tuple(prefix))])


def logits(params: PolicyParams, context: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    params.check_finite()
    out, _ = policy_forward(params, _single(params.arch, context, prefix))
    return out[0]


def logprob_and_grad(params: PolicyParams, context: Sequence[int], prefix: Sequence[int], action: int):
    batch = _single(params.arch, context, prefix)
    lp, g = weighted_score_grad(params, batch, np.array([action]), np.ones(1))
    return float(lp[0]), g


def value_and_grad(vparams: ValueParams, context: Sequence[int], prefix: Sequence[int]):
    batch = _single(vparams.arch, context, prefix)
    vals, cache = value_forward(vparams, batch)
    return float(vals[0]), value_backward(vparams, batch, cache, np.ones(1))


# --------------------------------------------------------------------------- decoding


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "sample"
    temperature: float = 1.0
    beam_width: int = 4
    brevity_penalty: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("sample", "beam"):
            raise ContractError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ContractError("temperature must be > 0 for sampling")
        if self.mode == "beam" and self.beam_width < 1:
            raise ContractError("beam_width must be >= 1")


def episode_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one rollout, keyed by (seed, *stream)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def _draw(probs: np.ndarray, u: float) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(probs) - 1))


def rollout(
    params: PolicyParams,
    contexts: Sequence[Sequence[int]],
    temperature: float,
    limits: MdpLimits,
    eos_id: int,
    rngs: Sequence[np.random.Generator],
) -> list[Episode]:
    """Sample one episode per context, all advancing in lock-step.

    ``logprobs`` hold the untempered log pi of each taken action; values and
    rewards are left at zero.
    """
    arch = params.arch
    for c in contexts:
        limits.check_context(c)
    feats = [ContextFeatures(c, arch.vocab_size) for c in contexts]
    episodes = [Episode(context=f.ids) for f in feats]
    alive = list(range(len(contexts)))
    bags = np.stack([f.bag for f in feats])
    while alive:
        states = [(i, episodes[i].actions) for i in alive]
        batch = featurize(arch, feats, states, bags)
        lg, _ = policy_forward(params, batch)
        logp = log_softmax(lg)
        tempered = np.exp(log_softmax(lg / temperature))
        still = []
        for row, i in enumerate(alive):
            a = _draw(tempered[row], rngs[i].random())
            ep = episodes[i]
            ep.actions.append(a)
            ep.logprobs.append(float(logp[row, a]))
            if a == eos_id or len(ep.actions) == limits.horizon:
                ep.truncated = a != eos_id
            else:
                still.append(i)
        alive = still
    for ep in episodes:
        ep.values = [0.0] * len(ep.actions)
        ep.rewards = [0.0] * len(ep.actions)
    return episodes


def episode_batch(arch: Architecture, episodes: Sequence[Episode]) -> tuple[StateBatch, np.ndarray]:
    """Flatten all pre-action states of ``episodes`` (in order) plus their actions."""
    feats = [ContextFeatures(ep.context, arch.vocab_size) for ep in episodes]
    states, actions = [], []
    for i, ep in enumerate(episodes):
        for t, a in enumerate(ep.actions):
            states.append((i, ep.actions[:t]))
            actions.append(a)
    return featurize(arch, feats, states), np.asarray(actions, dtype=np.intp)


def sample_episode(
    params: PolicyParams,
    vparams: ValueParams | None,
    context: Sequence[int],
    cfg: DecodeConfig,
    limits: MdpLimits,
    eos_id: int,
) -> Episode:
    if cfg.mode != "sample":
        raise ContractError("sample_episode needs mode='sample'")
    (ep,) = rollout(params, [tuple(context)], cfg.temperature, limits, eos_id, [episode_rng(cfg.seed)])
    if vparams is not None:
        batch, _ = episode_batch(vparams.arch, [ep])
        ep.values = value_forward(vparams, batch)[0].tolist()
    return ep


def length_normalized(logprob: float, length: int, brevity_penalty: float) -> float:
    return logprob / (length**brevity_penalty)


def beam_decode(
    params: PolicyParams,
    context: Sequence[int],
    cfg: DecodeConfig,
    limits: MdpLimits,
    eos_id: int,
) -> TokenSeq:
    """Length-normalized beam search.

    Each step keeps the ``beam_width`` best candidates by raw log-probability;
    candidates ending in EOS (or at the horizon) leave the beam as finished.
    The answer maximizes ``logprob / len ** brevity_penalty``; ties go to the
    lexicographically smaller id sequence.  Width 1 is greedy decoding.
    """
    if cfg.mode != "beam":
        raise ContractError("beam_decode needs mode='beam'")
    arch = params.arch
    limits.check_context(context)
    feats = [ContextFeatures(tuple(context), arch.vocab_size)]
    norm = lambda lp, n: length_normalized(lp, n, cfg.brevity_penalty)
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, tuple[int, ...]]] = []
    for _ in range(limits.horizon):
        batch = featurize(arch, feats, [(0, ids) for ids, _ in alive])
        logp = log_softmax(policy_forward(params, batch)[0])
        cands = []
        for (ids, lp), row in zip(alive, logp):
            for a in range(arch.vocab_size):
                cands.append((lp + row[a], ids + (a,)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        alive = []
        for lp, ids in cands[: cfg.beam_width]:
            if ids[-1] == eos_id or len(ids) == limits.horizon:
                finished.append((norm(lp, len(ids)), ids))
            else:
                alive.append((ids, lp))
        if not alive:
            break
        if len(finished) >= cfg.beam_width:
            best = max(s for s, _ in finished)
            if all(best > norm(lp, limits.horizon) for _, lp in alive):
                break
    best_score, best_ids = min(finished, key=lambda f: (-f[0], f[1]))
    return TokenSeq(best_ids, "complete")


def greedy_decode(params: PolicyParams, context: Sequence[int], limits: MdpLimits, eos_id: int) -> TokenSeq:
    cfg = DecodeConfig(mode="beam", beam_width=1, brevity_penalty=0.0)
    return beam_decode(params, context, cfg, limits, eos_id)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, params: _Params, meta: dict | None = None) -> None:
    """Write an ``.npz`` with a JSON header carrying version, kind, architecture, shapes."""
    header = {
        "format": "entailrl-checkpoint",
        "version": CHECKPOINT_VERSION,
        "kind": type(params).__name__,
        "arch": params.arch.__dict__,
        "shapes": {n: list(a.shape) for n, a in params.arrays().items()},
        "meta": meta or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **params.arrays())


def load_checkpoint(path: str | Path) -> tuple[_Params, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != "entailrl-checkpoint":
            raise ValueError(f"{path}: not a checkpoint file")
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
        kind = {"PolicyParams": PolicyParams, "ValueParams": ValueParams}[header["kind"]]
        arch = Architecture(**header["arch"])
        arrays = {n: data[n].astype(float) for n in kind.names}
    for n, shape in header["shapes"].items():
        if list(arrays[n].shape) != shape:
            raise ValueError(f"{path}: array {n} has shape {arrays[n].shape}, header says {shape}")
    return kind(arch, **arrays), header["meta"]


def decode(
    params: PolicyParams,
    contexts: Sequence[Sequence[int]],
    cfg: DecodeConfig,
    limits: MdpLimits,
    eos_id: int,
    chunk: int = 64,
) -> list[tuple[int, ...]]:
    """One summary per context.  Sampling uses stream ``(cfg.seed, index)`` per context."""
    if cfg.mode == "beam":
        return [beam_decode(params, c, cfg, limits, eos_id).ids for c in contexts]
    out: list[tuple[int, ...]] = []
    for lo in range(0, len(contexts), chunk):
        part = [tuple(c) for c in contexts[lo : lo + chunk]]
        rngs = [episode_rng(cfg.seed, lo + i) for i in range(len(part))]
        out.extend(ep.summary for ep in rollout(params, part, cfg.temperature, limits, eos_id, rngs))
    return out
