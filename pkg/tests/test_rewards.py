import math
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entailrl.mdp import ContractError, Episode
from entailrl.policy import Architecture, episode_batch, log_softmax, policy_forward
from entailrl.rewards import (
    EntailmentJudgment,
    RewardConfig,
    SubprocessJudge,
    accumulate_kl,
    combined_reward,
    entailment_rate,
    kl_reward,
    kl_terms,
    mix_rewards,
    nli_reward,
    oracle_entailment,
)
from entailrl.synthtask import FactWorld

from conftest import random_policy, random_state

W = FactWorld()
E0, E1 = W.entity_range[0], W.entity_range[1]
A0, A1 = W.attribute_range[0], W.attribute_range[1]
V0, V1, V2 = W.value_range[0], W.value_range[1], W.value_range[2]
DOC = W.render([(E0, A0, V0), (E1, A1, V1)])
CFG = RewardConfig()


def judge(summary, doc=DOC, cfg=CFG):
    return oracle_entailment(doc, summary, cfg, W)


def episode(n, context=(1, 2, 3)):
    return Episode(context, [4] * (n - 1) + [0], [-0.5] * n, [0.0] * n, [0.0] * n)


class TestOracle:
    def test_all_supported(self):
        j = judge(W.render([(E1, A1, V1), (E0, A0, V0)]) + (W.EOS,))
        assert (j.prob_entailed, j.log_prob, j.n_facts, j.n_unsupported, j.parse_ok) == (1.0, 0.0, 2, 0, True)

    def test_one_unsupported(self):
        j = judge(W.render([(E0, A0, V0), (E1, A1, V2)]))
        assert j.log_prob == -4.0 and abs(j.prob_entailed - 0.018316) < 1e-6 and j.n_unsupported == 1

    def test_unparseable_gets_floor(self):
        j = judge((E0, A0, W.SEP, V0))
        assert j.prob_entailed == 1e-6 and abs(j.log_prob - (-13.8155)) < 1e-4 and not j.parse_ok

    def test_empty_summary_vacuously_entailed(self):
        j = judge((W.EOS,))
        assert j.prob_entailed == 1.0 and j.n_facts == 0 and j.parse_ok

    def test_control_token_in_document_ignored(self):
        assert judge(W.render([(E0, A0, V0)]), doc=(W.CTRL_ENTAILED,) + DOC).prob_entailed == 1.0

    def test_judgment_invariants(self):
        for s in [W.render([(E0, A0, v)]) for v in W.value_range] + [(W.EOS,), (E0,)]:
            j = judge(s)
            assert abs(j.log_prob - math.log(j.prob_entailed)) < 1e-12
            assert j.n_unsupported <= j.n_facts

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.sampled_from(W.entity_range), st.sampled_from(W.attribute_range), st.sampled_from(W.value_range)), max_size=4))
    def test_adding_unsupported_fact_lowers_probability(self, facts):
        before = judge(W.render(facts)).prob_entailed
        bad = (E0, A0, V2)  # the document says (E0, A0, V0)
        after = judge(W.render(facts + [bad])).prob_entailed
        assert after < before

    def test_config_validation(self):
        with pytest.raises(ContractError):
            RewardConfig(alpha=1.5)
        with pytest.raises(ContractError):
            RewardConfig(oracle_floor=0.6)
        with pytest.raises(ContractError):
            RewardConfig(kl_mode="sometimes")


class TestNliReward:
    def test_terminal_placement(self):
        np.testing.assert_array_equal(nli_reward(episode(5), EntailmentJudgment(math.exp(-4), -4.0)), [0, 0, 0, 0, -4])

    def test_entailed_is_all_zero(self):
        assert not nli_reward(episode(4), EntailmentJudgment(1.0, 0.0)).any()

    def test_eos_only_episode(self):
        np.testing.assert_array_equal(nli_reward(episode(1), judge((W.EOS,))), [0.0])

    def test_empty_episode_rejected(self):
        with pytest.raises(ContractError):
            nli_reward(Episode((1,)), EntailmentJudgment(1.0, 0.0))

    @given(st.integers(1, 30), st.floats(-20, 0))
    def test_terminal_only_payment(self, n, lp):
        r = nli_reward(episode(n), EntailmentJudgment(math.exp(lp), lp))
        assert np.abs(r).sum() == pytest.approx(abs(lp), abs=0) and not r[:-1].any()


class TestKlReward:
    arch = Architecture(7, 3, 2, 5)

    def test_identical_policies_give_zero(self):
        p = random_policy(self.arch, 0)
        for mode in ("per_token", "sequence_accumulated"):
            assert not kl_reward(episode(4), p, p, mode).any()

    @pytest.mark.parametrize("seed", range(5))
    def test_modes_share_episode_sum(self, seed):
        a, c = random_policy(self.arch, seed), random_policy(self.arch, seed + 100)
        per = kl_reward(episode(5), a, c, "per_token")
        seq = kl_reward(episode(5), a, c, "sequence_accumulated")
        assert abs(per.sum() - seq.sum()) < 1e-12 and not seq[:-1].any()

    def test_matches_log_ratio(self):
        a, c = random_policy(self.arch, 1), random_policy(self.arch, 2)
        ep = episode(4)
        batch, actions = episode_batch(self.arch, [ep])
        rows = np.arange(len(actions))
        expect = log_softmax(policy_forward(a, batch)[0])[rows, actions] - log_softmax(policy_forward(c, batch)[0])[rows, actions]
        np.testing.assert_allclose(kl_reward(ep, a, c, "per_token"), expect, atol=0)

    @pytest.mark.parametrize("seed", range(10))
    def test_expected_kl_reward_is_negative_kl(self, seed):
        anchor, cur = random_policy(self.arch, seed), random_policy(self.arch, seed + 50)
        ctx, prefix = random_state(np.random.default_rng(seed), 7)
        eps = [Episode(ctx, list(prefix) + [a]) for a in range(7)]
        batch, actions = episode_batch(self.arch, eps)
        last = np.cumsum([len(e) for e in eps]) - 1
        r = kl_terms(anchor, cur, batch, actions)[last]
        lp_cur = log_softmax(policy_forward(cur, batch)[0])[last[0]]
        lp_anc = log_softmax(policy_forward(anchor, batch)[0])[last[0]]
        p = np.exp(lp_cur)
        kl = float(np.sum(p * (lp_cur - lp_anc)))
        expectation = float(np.sum(p * r))
        assert abs(expectation + kl) < 1e-9 and expectation <= 0
        exact = kl_terms(anchor, cur, batch, actions, exact=True)[last[0]]
        assert abs(exact + kl) < 1e-9

    def test_zero_iff_distributions_coincide(self):
        p = random_policy(self.arch, 3)
        q = p.copy()
        q.b2 += 0.7  # shifting every logit leaves the distribution unchanged
        ep = episode(3)
        batch, actions = episode_batch(self.arch, [ep])
        assert np.abs(kl_terms(p, q, batch, actions, exact=True)).max() < 1e-12
        q.b2[2] += 0.5
        assert np.all(kl_terms(p, q, batch, actions, exact=True) < 0)


class TestCombined:
    arch = Architecture(7, 3, 2, 5)

    def test_alpha_zero_is_nli(self):
        a, c = random_policy(self.arch, 0), random_policy(self.arch, 1)
        ep = episode(4)
        j = EntailmentJudgment(math.exp(-4), -4.0)
        r = combined_reward(ep, j, a, c, RewardConfig(alpha=0.0))
        np.testing.assert_array_equal(r, nli_reward(ep, j))
        assert ep.rewards == r.tolist()

    def test_alpha_one_at_anchor_is_zero(self):
        p = random_policy(self.arch, 0)
        r = combined_reward(episode(4), EntailmentJudgment(math.exp(-8), -8.0), p, p, RewardConfig(alpha=1.0))
        assert not r.any()

    def test_hand_example(self):
        r = mix_rewards(np.array([0.0, -2.0]), accumulate_kl(np.array([-0.1, 0.3]), "per_token"), 0.2)
        np.testing.assert_allclose(r, [-0.02, -1.54], atol=1e-12)

    def test_affine_in_alpha(self):
        a, c = random_policy(self.arch, 0), random_policy(self.arch, 1)
        j = EntailmentJudgment(math.exp(-4), -4.0)
        r = {al: combined_reward(episode(4), j, a, c, RewardConfig(alpha=al, kl_mode="per_token")) for al in (0.0, 0.5, 1.0)}
        np.testing.assert_allclose(r[0.5], (r[0.0] + r[1.0]) / 2, atol=1e-12)


class TestEntailmentRate:
    def test_count(self):
        js = [EntailmentJudgment.from_prob(p) for p in (1.0, 0.018, 0.6)]
        assert entailment_rate(js) == pytest.approx(2 / 3)

    def test_all_entailed(self):
        assert entailment_rate([EntailmentJudgment(1.0, 0.0)] * 3) == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            entailment_rate([])

    @given(st.lists(st.floats(1e-6, 1), min_size=1, max_size=20), st.floats(0.01, 0.98), st.floats(0.0, 0.01))
    def test_threshold_monotone(self, probs, t, dt):
        js = [EntailmentJudgment.from_prob(p) for p in probs]
        lo = RewardConfig(oracle_floor=1e-7, entail_threshold=t)
        hi = RewardConfig(oracle_floor=1e-7, entail_threshold=t + dt)
        assert entailment_rate(js, hi) <= entailment_rate(js, lo)


class TestSubprocessJudge:
    def test_matches_in_process_oracle(self):
        summaries = [W.render([(E0, A0, V0)]), W.render([(E0, A0, V2)]), (E0,), (W.EOS,)]
        with SubprocessJudge([sys.executable, "-m", "entailrl.judge_server"]) as remote:
            for s in summaries:
                assert remote(DOC, s).prob_entailed == pytest.approx(judge(s).prob_entailed, rel=1e-12)

    def test_floor_applied(self):
        with SubprocessJudge([sys.executable, "-m", "entailrl.judge_server"], floor=1e-3) as remote:
            assert remote(DOC, (E0,)).prob_entailed == 1e-3

    def test_dead_server_reported(self):
        code = "import sys; sys.stdin.readline()"
        with SubprocessJudge([sys.executable, "-c", code]) as remote:
            with pytest.raises(RuntimeError):
                remote(DOC, (W.EOS,))
