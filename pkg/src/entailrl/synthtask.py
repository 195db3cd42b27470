"""Synthetic grounded-summarization corpus built from fact triples.

A document is ``K`` distinct (entity, attribute, value) facts joined by the
separator token; a reference is ``M`` of those facts, each independently
hallucinated with probability ``p_halluc`` by swapping its value.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .mdp import ContractError, Vocabulary

CORPUS_VERSION = 1
MANIFEST_VERSION = 1

Fact = tuple[int, int, int]


@dataclass(frozen=True)
class FactWorld:
    """Vocabulary layout: EOS, SEP, two control tokens, then entity/attribute/value ranges."""

    n_entities: int = 20
    n_attributes: int = 10
    n_values: int = 30

    EOS = 0
    SEP = 1
    CTRL_ENTAILED = 2
    CTRL_NOT_ENTAILED = 3
    FIRST_CONTENT = 4

    @property
    def entity_range(self) -> range:
        return range(self.FIRST_CONTENT, self.FIRST_CONTENT + self.n_entities)

    @property
    def attribute_range(self) -> range:
        start = self.entity_range.stop
        return range(start, start + self.n_attributes)

    @property
    def value_range(self) -> range:
        start = self.attribute_range.stop
        return range(start, start + self.n_values)

    @property
    def vocab(self) -> Vocabulary:
        names = ["<eos>", "<sep>", "<entailed>", "<not-entailed>"]
        names += [f"E{i}" for i in range(self.n_entities)]
        names += [f"A{i}" for i in range(self.n_attributes)]
        names += [f"v{i}" for i in range(self.n_values)]
        return Vocabulary(
            size=self.value_range.stop,
            eos_id=self.EOS,
            separator_id=self.SEP,
            ctrl_entailed_id=self.CTRL_ENTAILED,
            ctrl_not_entailed_id=self.CTRL_NOT_ENTAILED,
            names=tuple(names),
        )

    def render(self, facts: Iterable[Fact]) -> tuple[int, ...]:
        out: list[int] = []
        for i, f in enumerate(facts):
            if i:
                out.append(self.SEP)
            out.extend(f)
        return tuple(out)

    def parse(self, ids: Sequence[int]) -> list[Fact] | None:
        """Facts of a token stream, or ``None`` if it is malformed.

        A trailing EOS is ignored; the empty stream is zero facts.
        """
        ids = list(ids)
        if ids and ids[-1] == self.EOS:
            ids = ids[:-1]
        if not ids:
            return []
        facts: list[Fact] = []
        chunk: list[int] = []
        for t in ids + [self.SEP]:
            if t != self.SEP:
                chunk.append(t)
                continue
            if (
                len(chunk) != 3
                or chunk[0] not in self.entity_range
                or chunk[1] not in self.attribute_range
                or chunk[2] not in self.value_range
            ):
                return None
            facts.append((chunk[0], chunk[1], chunk[2]))
            chunk = []
        return facts

    def strip_control(self, ids: Sequence[int]) -> tuple[int, ...]:
        ids = tuple(ids)
        while ids and ids[0] in (self.CTRL_ENTAILED, self.CTRL_NOT_ENTAILED):
            ids = ids[1:]
        return ids

    def manifest(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "vocab_size": self.vocab.size,
            "eos_id": self.EOS,
            "separator_id": self.SEP,
            "ctrl_entailed_id": self.CTRL_ENTAILED,
            "ctrl_not_entailed_id": self.CTRL_NOT_ENTAILED,
            "entity_range": [self.entity_range.start, self.entity_range.stop],
            "attribute_range": [self.attribute_range.start, self.attribute_range.stop],
            "value_range": [self.value_range.start, self.value_range.stop],
        }


@dataclass(frozen=True)
class CorpusConfig:
    n_entities: int = 20
    n_attributes: int = 10
    n_values: int = 30
    facts_per_doc: int = 6
    facts_per_ref: int = 2
    p_halluc: float = 0.3
    n_train: int = 8000
    n_val: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_halluc <= 1:
            raise ContractError("p_halluc must be in [0, 1]")
        if self.facts_per_ref > self.facts_per_doc:
            raise ContractError("facts_per_ref must not exceed facts_per_doc")
        if min(self.n_entities, self.n_attributes) < 1 or self.n_values < 2:
            raise ContractError("need at least one entity and attribute and two values")
        if self.facts_per_doc > self.n_entities * self.n_attributes:
            raise ContractError(
                f"facts_per_doc={self.facts_per_doc} exceeds the {self.n_entities * self.n_attributes}"
                " distinct (entity, attribute) pairs"
            )

    @property
    def world(self) -> FactWorld:
        return FactWorld(self.n_entities, self.n_attributes, self.n_values)


@dataclass(frozen=True)
class Example:
    document: tuple[int, ...]
    reference: tuple[int, ...]
    ref_entailed: bool
    control_prefix: int | None = None

    def policy_context(self) -> tuple[int, ...]:
        if self.control_prefix is None:
            return self.document
        return (self.control_prefix,) + self.document

    def without_reference(self) -> "Example":
        return replace(self, reference=(), ref_entailed=False)


@dataclass
class Corpus:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    config: CorpusConfig = field(default_factory=CorpusConfig)

    @property
    def world(self) -> FactWorld:
        return self.config.world

    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _sample_document(rng: np.random.Generator, cfg: CorpusConfig, world: FactWorld) -> list[Fact]:
    # (entity, attribute) pairs are distinct, so every pair has one value in a document
    pairs = rng.choice(cfg.n_entities * cfg.n_attributes, size=cfg.facts_per_doc, replace=False)
    facts = []
    for p in pairs:
        e, a = divmod(int(p), cfg.n_attributes)
        v = int(rng.integers(cfg.n_values))
        facts.append((world.entity_range[e], world.attribute_range[a], world.value_range[v]))
    return facts


def _sample_reference(
    rng: np.random.Generator, doc: list[Fact], cfg: CorpusConfig, world: FactWorld
) -> tuple[list[Fact], int]:
    idx = rng.choice(len(doc), size=cfg.facts_per_ref, replace=False)
    ref, n_bad = [], 0
    for i in sorted(int(j) for j in idx):
        e, a, v = doc[i]
        if rng.random() < cfg.p_halluc:
            supported = {fv for fe, fa, fv in doc if (fe, fa) == (e, a)}
            choices = [x for x in world.value_range if x not in supported]
            v = choices[int(rng.integers(len(choices)))]
            n_bad += 1
        ref.append((e, a, v))
    return ref, n_bad


def generate_split(n: int, cfg: CorpusConfig, rng: np.random.Generator) -> list[Example]:
    world = cfg.world
    out = []
    for _ in range(n):
        doc = _sample_document(rng, cfg, world)
        ref, n_bad = _sample_reference(rng, doc, cfg, world)
        out.append(Example(world.render(doc), world.render(ref), n_bad == 0))
    return out


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Train/val/test splits, each drawn from its own child stream of ``cfg.seed``."""
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    sizes = (cfg.n_train, cfg.n_val, cfg.n_test)
    splits = [generate_split(n, cfg, np.random.default_rng(s)) for n, s in zip(sizes, streams)]
    return Corpus(*splits, config=cfg)


# --------------------------------------------------------------------------- data transforms

Judge = Callable[[Sequence[int], Sequence[int]], "object"]


def filter_entailed(examples: Sequence[Example], judge: Judge, threshold: float = 0.5) -> list[Example]:
    """Keep the examples whose reference the judge deems entailed (order preserved)."""
    return [ex for ex in examples if judge(ex.document, ex.reference).prob_entailed > threshold]


def ctrl_annotate(
    examples: Sequence[Example], judge: Judge, world: FactWorld, threshold: float = 0.5
) -> list[Example]:
    out = []
    for ex in examples:
        entailed = judge(ex.document, ex.reference).prob_entailed > threshold
        tag = world.CTRL_ENTAILED if entailed else world.CTRL_NOT_ENTAILED
        out.append(replace(ex, control_prefix=tag))
    return out


# --------------------------------------------------------------------------- files


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def write_split(path: str | Path, examples: Sequence[Example], header: str = "") -> None:
    """One example per line: ``doc ids <TAB> ref ids <TAB> ref_entailed``."""
    lines = [f"# entailrl-corpus v{CORPUS_VERSION}{(' ' + header) if header else ''}"]
    for ex in examples:
        lines.append("\t".join([" ".join(map(str, ex.document)), " ".join(map(str, ex.reference)), str(int(ex.ref_entailed))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path: str | Path) -> list[Example]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.startswith("#"):
            if lineno == 1 and line.split()[1:3] != ["entailrl-corpus", f"v{CORPUS_VERSION}"]:
                raise ValueError(f"{path}: unsupported corpus version line {line!r}")
            continue
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
        doc, ref, flag = fields
        out.append(Example(tuple(map(int, doc.split())), tuple(map(int, ref.split())), flag == "1"))
    return out


def write_corpus(out_dir: str | Path, corpus: Corpus) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = asdict(corpus.config)
    h = config_hash(cfg)
    for name, split in corpus.splits().items():
        write_split(out_dir / f"{name}.tsv", split, header=f"config_hash={h}")
    manifest = corpus.world.manifest()
    manifest["corpus_config"] = cfg
    manifest["config_hash"] = h
    manifest["splits"] = {name: len(split) for name, split in corpus.splits().items()}
    (out_dir / "vocab.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_corpus(out_dir: str | Path) -> Corpus:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "vocab.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{out_dir}: unsupported manifest version {manifest.get('version')}")
    cfg = CorpusConfig(**manifest["corpus_config"])
    if cfg.world.manifest()["vocab_size"] != manifest["vocab_size"]:
        raise ValueError(f"{out_dir}: manifest ranges disagree with corpus config")
    splits = {name: read_split(out_dir / f"{name}.tsv") for name in ("train", "val", "test")}
    return Corpus(splits["train"], splits["val"], splits["test"], config=cfg)
