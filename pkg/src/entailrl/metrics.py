"""Reference-based and reference-free summary metrics at token-id level."""
from __future__ import annotations

import csv
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np


def strip_eos(ids: Sequence[int], eos_id: int) -> tuple[int, ...]:
    ids = tuple(ids)
    if eos_id in ids:
        ids = ids[: ids.index(eos_id)]
    return ids


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def _ngrams(ids: Sequence[int], n: int) -> Counter:
    return Counter(tuple(ids[i : i + n]) for i in range(len(ids) - n + 1))


def rouge_n(reference: Sequence[int], candidate: Sequence[int], n: int = 1) -> float:
    """Clipped n-gram overlap F1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ref, cand = _ngrams(reference, n), _ngrams(candidate, n)
    overlap = sum((ref & cand).values())
    return _f1(overlap, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(reference: Sequence[int], candidate: Sequence[int]) -> float:
    return _f1(lcs_length(reference, candidate), len(candidate), len(reference))


def coverage(document: Sequence[int], summary: Sequence[int]) -> float:
    if not summary:
        return 0.0
    doc = set(document)
    return sum(t in doc for t in summary) / len(summary)


def matching_blocks(document: Sequence[int], summary: Sequence[int]) -> list[tuple[int, int, int]]:
    """Greedy maximal matches as (summary_start, doc_start, length).

    Longest match first, then recurse on the left and right remainders.  Ties
    go to the earliest summary position, then the earliest document position.
    """
    blocks: list[tuple[int, int, int]] = []
    stack = [(0, len(summary), 0, len(document))]
    while stack:
        s_lo, s_hi, d_lo, d_hi = stack.pop()
        best = (0, 0, 0)
        # dynamic program over suffix-match lengths restricted to the window
        prev = [0] * (d_hi - d_lo + 1)
        for i in range(s_lo, s_hi):
            cur = [0] * (d_hi - d_lo + 1)
            for j in range(d_lo, d_hi):
                if summary[i] == document[j]:
                    k = prev[j - d_lo] + 1
                    cur[j - d_lo + 1] = k
                    start_s, start_d = i - k + 1, j - k + 1
                    if k > best[2] or (k == best[2] and (start_s, start_d) < (best[0], best[1])):
                        best = (start_s, start_d, k)
            prev = cur
        s, d, k = best
        if k == 0:
            continue
        blocks.append(best)
        stack.append((s_lo, s, d_lo, d))
        stack.append((s + k, s_hi, d + k, d_hi))
    return sorted(blocks)


def density(document: Sequence[int], summary: Sequence[int]) -> float:
    """Mean squared extractive-fragment length per summary token."""
    if not summary:
        return 0.0
    return sum(k * k for _, _, k in matching_blocks(document, summary)) / len(summary)


@dataclass(frozen=True)
class ExampleScores:
    index: int
    entailed: int
    prob_entailed: float
    rouge1: float
    rouge2: float
    rougeL: float
    coverage: float
    density: float
    length: int


@dataclass(frozen=True)
class MetricsReport:
    entailment_rate: float
    rouge1: float
    rouge2: float
    rougeL: float
    coverage: float
    density: float
    mean_length: float
    n_examples: int

    def as_dict(self) -> dict:
        return asdict(self)


def score_example(
    index: int,
    document: Sequence[int],
    reference: Sequence[int],
    summary: Sequence[int],
    judgment,
    eos_id: int,
    threshold: float = 0.5,
) -> ExampleScores:
    ref = strip_eos(reference, eos_id)
    cand = strip_eos(summary, eos_id)
    return ExampleScores(
        index=index,
        entailed=int(judgment.prob_entailed > threshold),
        prob_entailed=judgment.prob_entailed,
        rouge1=rouge_n(ref, cand, 1),
        rouge2=rouge_n(ref, cand, 2),
        rougeL=rouge_l(ref, cand),
        coverage=coverage(document, cand),
        density=density(document, cand),
        length=len(cand),
    )


def aggregate(rows: Sequence[ExampleScores]) -> MetricsReport:
    if not rows:
        raise ValueError("cannot aggregate an empty set of scores")
    mean = lambda name: float(np.mean([getattr(r, name) for r in rows]))
    return MetricsReport(
        entailment_rate=mean("entailed"),
        rouge1=mean("rouge1"),
        rouge2=mean("rouge2"),
        rougeL=mean("rougeL"),
        coverage=mean("coverage"),
        density=mean("density"),
        mean_length=mean("length"),
        n_examples=len(rows),
    )


def write_scores_csv(path: str | Path, rows: Sequence[ExampleScores], header_comment: str = "") -> None:
    names = [f.name for f in fields(ExampleScores)]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(getattr(r, n)) for n in names])


def read_scores_csv(path: str | Path) -> list[ExampleScores]:
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append(
            ExampleScores(
                index=int(rec["index"]),
                entailed=int(rec["entailed"]),
                prob_entailed=float(rec["prob_entailed"]),
                rouge1=float(rec["rouge1"]),
                rouge2=float(rec["rouge2"]),
                rougeL=float(rec["rougeL"]),
                coverage=float(rec["coverage"]),
                density=float(rec["density"]),
                length=int(rec["length"]),
            )
        )
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def evaluate(params, examples, judge, decode_cfg, limits, eos_id: int, threshold: float = 0.5, return_rows: bool = False):
    """Decode every example's policy context and aggregate all metrics."""
    from .policy import decode

    if not examples:
        raise ValueError("evaluate needs a non-empty dataset")
    summaries = decode(params, [ex.policy_context() for ex in examples], decode_cfg, limits, eos_id)
    rows = [
        score_example(i, ex.document, ex.reference, s, judge(ex.document, s), eos_id, threshold)
        for i, (ex, s) in enumerate(zip(examples, summaries))
    ]
    report = aggregate(rows)
    return (report, rows, summaries) if return_rows else report
