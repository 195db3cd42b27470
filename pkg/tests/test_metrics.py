import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entailrl.mdp import MdpLimits
from entailrl.metrics import (
    aggregate,
    coverage,
    density,
    evaluate,
    lcs_length,
    matching_blocks,
    read_scores_csv,
    rouge_l,
    rouge_n,
    strip_eos,
    write_scores_csv,
)
from entailrl.policy import DecodeConfig, PolicyParams
from entailrl.rewards import OracleJudge

a, b, c, d, e, x = range(1, 7)
seqs = st.lists(st.integers(1, 5), max_size=10)


def brute_lcs(s, t):
    """Longest common subsequence by trying every subsequence of the shorter side."""
    if len(s) > len(t):
        s, t = t, s
    for k in range(len(s), 0, -1):
        for idx in itertools.combinations(range(len(s)), k):
            sub = [s[i] for i in idx]
            it = iter(t)
            if all(tok in it for tok in sub):
                return k
    return 0


class TestRouge:
    def test_identical(self):
        assert rouge_n([a, b, c], [a, b, c], 1) == rouge_n([a, b, c], [a, b, c], 2) == rouge_l([a, b, c], [a, b, c]) == 1.0

    def test_disjoint(self):
        assert rouge_n([a, b], [c, d], 1) == 0.0 and rouge_l([a, b], [c, d]) == 0.0

    def test_hand_case(self):
        assert rouge_n([a, b, c], [a, c], 1) == pytest.approx(0.8)
        assert lcs_length([a, b, c], [a, c]) == 2 and rouge_l([a, b, c], [a, c]) == pytest.approx(0.8)

    def test_clipping(self):
        # candidate repeats a once; only one occurrence can match
        assert rouge_n([a, b], [a, a], 1) == pytest.approx(0.5)

    def test_no_bigrams(self):
        assert rouge_n([a], [a], 2) == 0.0

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            rouge_n([a], [a], 0)

    def test_lcs_brute_force_all_pairs_up_to_six(self):
        pool = [s for n in range(7) for s in itertools.product((0, 1, 2), repeat=n)]
        subseqs = {
            s: {tuple(s[i] for i in idx) for k in range(len(s) + 1) for idx in itertools.combinations(range(len(s)), k)}
            for s in pool
        }
        # every ordered pair over a 3-token alphabet with lengths <= 6 (1093^2 pairs)
        for s in pool:
            for t in pool:
                assert lcs_length(s, t) == max(map(len, subseqs[s] & subseqs[t])), (s, t)

    @settings(max_examples=100)
    @given(seqs, seqs)
    def test_lcs_brute_force_up_to_eight(self, s, t):
        s, t = s[:8], t[:8]
        assert lcs_length(s, t) == brute_lcs(s, t)

    @given(seqs, seqs)
    def test_bounded(self, s, t):
        for v in (rouge_n(s, t, 1), rouge_n(s, t, 2), rouge_l(s, t)):
            assert 0.0 <= v <= 1.0


class TestExtractiveness:
    def test_coverage_subset(self):
        assert coverage([a, b, c, d], [b, a]) == 1.0

    def test_coverage_count(self):
        assert coverage([a, b, c, d], [a, b, x]) == pytest.approx(2 / 3)

    def test_coverage_disjoint_and_empty(self):
        assert coverage([a, b], [x, x]) == 0.0 and coverage([a], []) == 0.0

    def test_density_hand_case(self):
        assert matching_blocks([a, b, c, d, e], [a, b, d, e]) == [(0, 0, 2), (2, 3, 2)]
        assert density([a, b, c, d, e], [a, b, d, e]) == 2.0

    @pytest.mark.parametrize("length", [1, 3, 5])
    def test_density_copied_span(self, length):
        doc = [a, b, c, d, e, x]
        assert density(doc, doc[1 : 1 + length]) == length

    def test_density_disjoint_and_empty(self):
        assert density([a, b], [x]) == 0.0 and density([a, b], []) == 0.0

    def test_matching_block_tie_break(self):
        # [a] occurs twice in the document; the earliest document position wins
        assert matching_blocks([a, x, a], [a]) == [(0, 0, 1)]

    @given(seqs, seqs)
    def test_density_bounded_by_length(self, doc, summ):
        assert density(doc, summ) <= len(summ)

    @given(seqs, seqs)
    def test_full_block_cover_means_full_coverage(self, doc, summ):
        blocks = matching_blocks(doc, summ)
        covered = sum(k for _, _, k in blocks)
        if summ and covered == len(summ):
            assert coverage(doc, summ) == 1.0

    @given(seqs, seqs)
    def test_blocks_are_matches(self, doc, summ):
        last_s = last_d = 0
        for i, j, k in matching_blocks(doc, summ):
            assert summ[i : i + k] == doc[j : j + k] and i >= last_s and j >= last_d
            last_s, last_d = i + k, j + k

    def test_strip_eos(self):
        assert strip_eos([a, b, 0, c], 0) == (a, b)


@pytest.fixture
def examples(small_corpus):
    return small_corpus.test[:25]


def _eval_with(monkeypatch, examples, summaries, world):
    import entailrl.policy as policy_mod

    monkeypatch.setattr(policy_mod, "decode", lambda params, contexts, *args, **kw: [summaries[tuple(ctx)] for ctx in contexts])
    return evaluate(None, examples, OracleJudge(world), DecodeConfig(), MdpLimits(), world.EOS, return_rows=True)


class TestEvaluate:
    def test_reference_copy_scores_one(self, monkeypatch, examples, world):
        report, rows, _ = _eval_with(monkeypatch, examples, {ex.document: ex.reference + (0,) for ex in examples}, world)
        assert report.rouge1 == report.rouge2 == report.rougeL == 1.0

    def test_first_facts_copy_is_faithful(self, monkeypatch, examples, world):
        summaries = {ex.document: ex.document[:7] + (0,) for ex in examples}
        report, _, _ = _eval_with(monkeypatch, examples, summaries, world)
        assert report.coverage == 1.0 and report.entailment_rate == 1.0 and report.mean_length == 7.0

    def test_report_matches_dumped_scores(self, monkeypatch, examples, world, tmp_path):
        summaries = {ex.document: ex.document[4:11] + (0,) for ex in examples}
        report, rows, _ = _eval_with(monkeypatch, examples, summaries, world)
        write_scores_csv(tmp_path / "s.csv", rows, "config_hash=x")
        back = read_scores_csv(tmp_path / "s.csv")
        assert back == rows
        recomputed = aggregate(back)
        assert recomputed == report
        assert report.entailment_rate == np.mean([r.entailed for r in back])

    def test_empty_dataset_rejected(self, world):
        with pytest.raises(ValueError):
            evaluate(None, [], OracleJudge(world), DecodeConfig(), MdpLimits(), 0)

    def test_reproducible(self, small_corpus, world):
        from entailrl.policy import Architecture

        params = PolicyParams.init(Architecture(64, 4, 4, 8), 1)
        run = lambda: evaluate(params, small_corpus.test[:20], OracleJudge(world), DecodeConfig(seed=3), MdpLimits(), 0)
        assert run() == run()
