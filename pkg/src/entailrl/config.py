"""Experiment configuration: INI sections mapped onto frozen dataclasses.

Every section corresponds to one dataclass and every key to one of its
fields; anything else is rejected so typos fail loudly.  ``schema.ini`` next to
this module lists each key with its default and is kept in sync by a test.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .mdp import ContractError, MdpLimits
from .policy import Architecture, DecodeConfig
from .rewards import RewardConfig
from .synthtask import CorpusConfig
from .trainer import MLEConfig, TrainConfig

SCHEMA_PATH = Path(__file__).with_name("schema.ini")


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration."""


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int = 64
    embed_dim: int = 16
    window: int = 4
    bag_of_context: bool = True
    copy_pointer: bool = True

    def architecture(self, vocab_size: int) -> Architecture:
        return Architecture(vocab_size, self.embed_dim, self.window, self.hidden_size, self.bag_of_context, self.copy_pointer)


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    n_examples: int = 0  # 0 = whole split

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ContractError(f"eval split must be train, val or test, not {self.split!r}")
        if self.n_examples < 0:
            raise ContractError("n_examples must be >= 0")


@dataclass(frozen=True)
class SweepSpec:
    alphas: tuple[float, ...] = (0.1, 0.2, 0.4, 0.8)
    temperatures: tuple[float, ...] = (0.3, 1.0)
    hidden_sizes: tuple[int, ...] = (64,)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("alphas", "temperatures", "hidden_sizes", "seeds"):
            if not getattr(self, name):
                raise ContractError(f"sweep axis {name} is empty")

    def cells(self) -> list[tuple[int, int, float, float]]:
        """(hidden_size, seed, alpha, temperature), grouped so anchors are reused."""
        return [
            (h, s, a, t)
            for h in self.hidden_sizes
            for s in self.seeds
            for a in self.alphas
            for t in self.temperatures
        ]


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    limits: MdpLimits = field(default_factory=MdpLimits)
    model: ModelConfig = field(default_factory=ModelConfig)
    mle: MLEConfig = field(default_factory=MLEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of everything that can change results (worker counts cannot)."""
        d = self.to_dict()
        del d["train"]["rollout_workers"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """One seed drives corpus, initialization, rollouts and decoding."""
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            mle=replace(self.mle, seed=seed),
            train=replace(self.train, seed=seed),
            decode=replace(self.decode, seed=seed),
        )

    def override(self, section: str, **values) -> "ExperimentConfig":
        try:
            return replace(self, **{section: replace(getattr(self, section), **values)})
        except (TypeError, ContractError) as e:
            raise ConfigError(f"[{section}] {e}") from e


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _section_type(name: str) -> type:
    return typing.get_type_hints(ExperimentConfig)[name]


def _coerce(raw: str, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    raw = raw.strip()
    if origin is tuple:
        return tuple(_coerce(x, args[0], where) for x in raw.split(",") if x.strip())
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(raw, inner, where)
    try:
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {hint.__name__}") from None
    raise ConfigError(f"{where}: unsupported type {hint}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        hints = typing.get_type_hints(_section_type(section))
        values = {}
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(raw, hints[key], f"{source} [{section}] {key}")
        cfg = cfg.override(section, **values)
    _cross_check(cfg)
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text, str(path))


def _cross_check(cfg: ExperimentConfig) -> None:
    doc_len = 4 * cfg.corpus.facts_per_doc  # facts, separators and an optional control token
    if doc_len > cfg.limits.context_max:
        raise ConfigError(f"[limits] context_max={cfg.limits.context_max} is shorter than a {doc_len}-token document")
    ref_len = 4 * cfg.corpus.facts_per_ref
    if ref_len > cfg.limits.horizon:
        raise ConfigError(f"[limits] horizon={cfg.limits.horizon} cannot hold a {ref_len}-token reference")


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(map(str, value))
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def render_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to ``cfg``."""
    out = []
    for section in SECTIONS:
        out.append(f"[{section}]")
        for f in fields(_section_type(section)):
            out.append(f"{f.name} = {_fmt(getattr(getattr(cfg, section), f.name))}")
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------- presets


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    overrides: dict
    data: str = "all"  # all | filtered | ctrl
    rl: bool = False


_BEAM = {"decode": {"mode": "beam", "beam_width": 4, "brevity_penalty": 0.6}}

PRESETS = {
    "SL": ExperimentPreset("SL", _BEAM),
    "Filtered": ExperimentPreset("Filtered", _BEAM, data="filtered"),
    "CTRL": ExperimentPreset("CTRL", _BEAM, data="ctrl"),
    "RLEF_L": ExperimentPreset(
        "RLEF_L",
        {"reward": {"alpha": 0.1}, "train": {"temperature": 1.0}, "decode": {"mode": "sample", "temperature": 1.0}},
        rl=True,
    ),
    "RLEF_H": ExperimentPreset(
        "RLEF_H",
        {"reward": {"alpha": 0.2}, "train": {"temperature": 0.3}, "decode": {"mode": "sample", "temperature": 0.3}},
        rl=True,
    ),
}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def apply_preset(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    for section, values in get_preset(name).overrides.items():
        cfg = cfg.override(section, **values)
    return cfg
