"""Experiment pipelines shared by the CLI, the sweep driver and the acceptance suite."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, get_preset
from .metrics import MetricsReport, evaluate, write_scores_csv
from .policy import PolicyParams, ValueParams, load_checkpoint, save_checkpoint
from .rewards import OracleJudge
from .synthtask import Corpus, Example, ctrl_annotate, filter_entailed, generate_corpus, read_corpus
from .trainer import LOG_COLUMNS, mle_pretrain, rl_finetune

log = logging.getLogger(__name__)

REPORT_COLUMNS = tuple(f for f in MetricsReport.__dataclass_fields__) + ("ref_mean_length",)
SWEEP_AXES = ("hidden_size", "seed", "alpha", "temperature")


def load_corpus(cfg: ExperimentConfig, data_dir: str | Path | None = None) -> tuple[ExperimentConfig, Corpus]:
    """Read a written corpus (its config replaces ``cfg.corpus``) or generate one."""
    if data_dir is None:
        return cfg, generate_corpus(cfg.corpus)
    corpus = read_corpus(data_dir)
    return replace(cfg, corpus=corpus.config), corpus


def judge_for(cfg: ExperimentConfig) -> OracleJudge:
    return OracleJudge(cfg.corpus.world, cfg.reward)


# --------------------------------------------------------------------------- supervised baselines


def pretrain_examples(examples: Sequence[Example], preset: str, cfg: ExperimentConfig) -> list[Example]:
    """Training data for SL, Filtered or CTRL."""
    judge = judge_for(cfg)
    kind = get_preset(preset).data
    if kind == "filtered":
        return filter_entailed(examples, judge, cfg.reward.entail_threshold)
    if kind == "ctrl":
        return ctrl_annotate(examples, judge, cfg.corpus.world, cfg.reward.entail_threshold)
    return list(examples)


@dataclass
class PretrainResult:
    params: PolicyParams
    history: list[dict]
    n_examples: int
    n_available: int


def pretrain(cfg: ExperimentConfig, corpus: Corpus, preset: str = "SL") -> PretrainResult:
    if get_preset(preset).rl:
        raise ConfigError(f"preset {preset} is an RL preset; pretrain takes SL, Filtered or CTRL")
    train = pretrain_examples(corpus.train, preset, cfg)
    val = pretrain_examples(corpus.val, preset, cfg)
    log.info("%s: training on %d of %d examples", preset, len(train), len(corpus.train))
    arch = cfg.model.architecture(corpus.world.vocab.size)
    params, history = mle_pretrain(train, arch, corpus.world.EOS, cfg.mle, val)
    return PretrainResult(params, history, len(train), len(corpus.train))


# --------------------------------------------------------------------------- evaluation


def eval_examples(cfg: ExperimentConfig, corpus: Corpus, preset: str | None, split: str | None = None) -> list[Example]:
    """Evaluation split; CTRL policies always see the entailed control token."""
    examples = corpus.splits()[split or cfg.eval.split]
    if cfg.eval.n_examples:
        examples = examples[: cfg.eval.n_examples]
    if preset is not None and get_preset(preset).data == "ctrl":
        examples = [replace(ex, control_prefix=corpus.world.CTRL_ENTAILED) for ex in examples]
    return examples


def evaluate_policy(
    cfg: ExperimentConfig, corpus: Corpus, params: PolicyParams, preset: str | None = None, split: str | None = None
):
    """(report dict with ``ref_mean_length``, per-example rows, summaries)."""
    examples = eval_examples(cfg, corpus, preset, split)
    report, rows, summaries = evaluate(
        params, examples, judge_for(cfg), cfg.decode, cfg.limits, corpus.world.EOS, cfg.reward.entail_threshold, return_rows=True
    )
    out = report.as_dict()
    out["ref_mean_length"] = float(np.mean([len(ex.reference) for ex in examples]))
    return out, rows, summaries


# --------------------------------------------------------------------------- RL


@dataclass
class RLResult:
    params: PolicyParams
    vparams: ValueParams | None
    history: list[dict]


def rl_train(
    cfg: ExperimentConfig,
    corpus: Corpus,
    anchor: PolicyParams,
    on_log: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, PolicyParams, ValueParams], None] | None = None,
    monitor: bool = True,
    on_step: Callable | None = None,
) -> RLResult:
    """Fine-tune on training documents only; validation metrics join the log when ``monitor``."""
    documents = [ex.document for ex in corpus.train]
    evaluator = None
    if monitor:
        val = corpus.val[: cfg.train.eval_size]
        evaluator = lambda p: evaluate(
            p, val, judge_for(cfg), cfg.decode, cfg.limits, corpus.world.EOS, cfg.reward.entail_threshold
        ).as_dict()
    final: dict = {}

    def checkpoint(step, p, v):
        final["value"] = v
        if on_checkpoint:
            on_checkpoint(step, p, v)

    params, history = rl_finetune(
        anchor,
        documents,
        judge_for(cfg),
        cfg.reward,
        cfg.train,
        cfg.limits,
        corpus.world.EOS,
        evaluator=evaluator,
        on_log=on_log,
        on_checkpoint=checkpoint,
        on_step=on_step,
    )
    return RLResult(params, final.get("value"), history)


# --------------------------------------------------------------------------- files


def header_line(cfg: ExperimentConfig, **extra) -> str:
    items = [f"config_hash={cfg.hash()}"] + [f"{k}={v}" for k, v in extra.items()]
    return "# " + " ".join(items)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_rows(path: str | Path, columns: Sequence[str], rows: Sequence[dict], header: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def read_rows(path: str | Path) -> list[dict]:
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_summaries(path: str | Path, examples: Sequence[Example], summaries: Sequence[Sequence[int]], header: str) -> None:
    lines = [header]
    for ex, s in zip(examples, summaries):
        lines.append(" ".join(map(str, ex.policy_context())) + "\t" + " ".join(map(str, s)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_eval_outputs(out: Path, cfg: ExperimentConfig, corpus: Corpus, params: PolicyParams, preset: str | None, **header_extra):
    report, rows, summaries = evaluate_policy(cfg, corpus, params, preset)
    header = header_line(cfg, preset=preset, **header_extra)
    write_rows(out / "report.csv", REPORT_COLUMNS, [report], header)
    write_scores_csv(out / "scores.csv", rows, header[2:])
    write_summaries(out / "summaries.tsv", eval_examples(cfg, corpus, preset), summaries, header)
    return report


# --------------------------------------------------------------------------- sweep


def _anchor_path(root: Path, hidden: int, seed: int) -> Path:
    return root / "anchors" / f"h{hidden}_s{seed}.npz"


def _sweep_anchor(job: tuple) -> str:
    cfg, hidden, seed, root = job
    path = _anchor_path(Path(root), hidden, seed)
    cfg = cfg.with_seed(seed).override("model", hidden_size=hidden)
    res = pretrain(cfg, generate_corpus(cfg.corpus), "SL")
    save_checkpoint(path, res.params, {"config_hash": cfg.hash(), "preset": "SL", "n_examples": res.n_examples})
    return str(path)


def cell_config(base: ExperimentConfig, hidden: int, seed: int, alpha: float, temperature: float) -> ExperimentConfig:
    cfg = base.with_seed(seed).override("model", hidden_size=hidden)
    cfg = cfg.override("reward", alpha=alpha).override("train", temperature=temperature)
    return cfg.override("decode", mode="sample", temperature=temperature)


def cell_name(hidden: int, seed: int, alpha: float, temperature: float) -> str:
    return f"h{hidden}_s{seed}_a{alpha:g}_t{temperature:g}"


def run_cell(job: tuple) -> dict:
    """Train and evaluate one sweep cell; failures become a status string, not an exception."""
    base, (hidden, seed, alpha, temperature), root = job
    row = dict(hidden_size=hidden, seed=seed, alpha=alpha, temperature=temperature)
    try:
        cfg = cell_config(base, hidden, seed, alpha, temperature)
        corpus = generate_corpus(cfg.corpus)
        anchor, _ = load_checkpoint(_anchor_path(Path(root), hidden, seed))
        cell_dir = Path(root) / "cells" / cell_name(hidden, seed, alpha, temperature)
        cell_dir.mkdir(parents=True, exist_ok=True)
        res = rl_train(cfg, corpus, anchor)
        write_rows(cell_dir / "train_log.csv", LOG_COLUMNS, res.history, header_line(cfg))
        report, _, _ = evaluate_policy(cfg, corpus, res.params)
        row.update(report)
        row["status"] = "ok"
    except Exception as e:  # one bad cell must not sink the sweep
        log.exception("sweep cell %s failed", row)
        row["status"] = f"error: {type(e).__name__}: {e}".replace("\n", " ")
    return row


def _pool_map(fn, jobs: list, n_jobs: int) -> list:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(min(n_jobs, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


SWEEP_COLUMNS = SWEEP_AXES + REPORT_COLUMNS + ("status",)
SCATTER_COLUMNS = ("hidden_size", "alpha", "temperature", "n_seeds", "entailment_rate", "rouge1", "mean_length", "coverage", "density")


def scatter_rows(rows: Sequence[dict]) -> list[dict]:
    """Seed-averaged points, one per (hidden_size, alpha, temperature)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("status") == "ok":
            groups.setdefault((r["hidden_size"], r["alpha"], r["temperature"]), []).append(r)
    out = []
    for (h, a, t), rs in sorted(groups.items()):
        point = dict(hidden_size=h, alpha=a, temperature=t, n_seeds=len(rs))
        for m in SCATTER_COLUMNS[4:]:
            point[m] = float(np.mean([float(r[m]) for r in rs]))
        out.append(point)
    return out


GNUPLOT_SCRIPT = """\
# Entailment trade-off curves from scatter.dat.  Run: gnuplot tradeoff.gp
set terminal pngcairo size 1500,450
set output 'tradeoff.png'
set datafile separator ','
set datafile columnheaders
set multiplot layout 1,3
set xlabel 'entailment rate'
set key bottom left
do for [col in "rouge1 mean_length coverage"] {
  set ylabel col
  plot for [t in "%(temps)s"] 'scatter.dat' using (column('temperature') == t+0 ? column('entailment_rate') : 1/0):(column(col)) \\
       with linespoints title 'T='.t
}
unset multiplot
"""


def run_sweep(base: ExperimentConfig, out: Path, n_jobs: int = 1) -> list[dict]:
    """All cells of ``base.sweep``; writes sweep.csv, scatter.dat and tradeoff.gp under ``out``."""
    grid = base.sweep
    out.mkdir(parents=True, exist_ok=True)
    (out / "anchors").mkdir(exist_ok=True)
    anchor_jobs = [(base, h, s, str(out)) for h in grid.hidden_sizes for s in grid.seeds]
    _pool_map(_sweep_anchor, anchor_jobs, n_jobs)
    rows = _pool_map(run_cell, [(base, cell, str(out)) for cell in grid.cells()], n_jobs)
    header = header_line(base)
    write_rows(out / "sweep.csv", SWEEP_COLUMNS, rows, header)
    write_rows(out / "scatter.dat", SCATTER_COLUMNS, scatter_rows(rows), header)
    temps = " ".join(f"{t:g}" for t in grid.temperatures)
    (out / "tradeoff.gp").write_text(GNUPLOT_SCRIPT % {"temps": temps})
    return rows
