import json
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import max_rel_err, mp_dpo_grad, mp_dpo_loss

from ter_tsf.dpo import (
    DpoConfig,
    PreferencePair,
    batch_loss,
    build_pairs,
    dpo_grad,
    dpo_loss,
    dpo_step,
    export_pairs,
    load_pairs,
    policy_margin,
    preference_score,
    train_dpo,
)
from ter_tsf.errors import ConfigError, DataError
from ter_tsf.generator import CandidateText, ToyLM
from ter_tsf.reward import Ranking, ScoredCandidate

LN2 = math.log(2)


def sc(body, r, i):
    return ScoredCandidate(CandidateText(body, "t", i), 0.0, 0.0, r)


def random_lm(seed, v=5):
    rng = np.random.default_rng(seed)
    return ToyLM(tuple("abcdefgh"[:v]), rng.normal(size=(v, v)), rng.normal(size=v))


PAIRS = [
    PreferencePair("p", "a b c a", "d d e", 0.9, 0.1, "s0"),
    PreferencePair("p", "c c b", "e a d d b", 0.5, -0.2, "s1"),
    PreferencePair("p", "b", "e", 0.3, 0.2, "s2"),
]


class TestPreferenceScore:
    def test_equal_rewards(self):
        assert preference_score(1.3, 1.3, 0.1) == pytest.approx(-LN2, abs=1e-12)

    def test_hand_value(self):
        # log sigmoid(0.1) = -log(1 + e^-0.1)
        assert preference_score(1.0, 0.0, 0.1) == pytest.approx(-math.log(1 + math.exp(-0.1)), abs=1e-12)
        assert preference_score(1.0, 0.0, 0.1) == pytest.approx(-0.644397, abs=1e-6)

    def test_limit_and_stability(self):
        assert -1e-12 < preference_score(1e6, 0, 0.1) <= 0.0
        assert preference_score(0, 1e6, 0.1) == pytest.approx(-1e5)

    def test_beta_positive(self):
        with pytest.raises(ConfigError):
            preference_score(1, 0, 0)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.01, 5), st.floats(-1e3, 1e3))
    def test_properties(self, a, b, beta, c):
        s1, s2 = preference_score(a, b, beta), preference_score(b, a, beta)
        assert math.exp(s1) + math.exp(s2) == pytest.approx(1.0, abs=1e-12)
        assert preference_score(a + c, b + c, beta) == pytest.approx(s1, abs=1e-9)


class TestLoss:
    def test_policy_equals_reference(self):
        m = random_lm(0)
        for p in PAIRS:
            assert dpo_loss(m, m, p, 0.1) == pytest.approx(LN2, abs=1e-12)

    def test_hand_built_two_token(self):
        # one-token sequences; policy start logits (0.7, -0.4), reference (0.2, 0.1)
        pol = ToyLM(("x", "y"), np.zeros((2, 2)), [0.7, -0.4])
        ref = ToyLM(("x", "y"), np.zeros((2, 2)), [0.2, 0.1])

        def logp(a, b, first):
            return (a if first else b) - math.log(math.exp(a) + math.exp(b))

        margin = (logp(0.7, -0.4, True) - logp(0.2, 0.1, True)) - (logp(0.7, -0.4, False) - logp(0.2, 0.1, False))
        expected = -math.log(1 / (1 + math.exp(-0.1 * margin)))
        pair = PreferencePair("", "x", "y", 1.0, 0.0)
        assert dpo_loss(pol, ref, pair, 0.1) == pytest.approx(expected, abs=1e-12)

    def test_large_margin_limit(self):
        big = np.zeros((2, 2))
        pol = ToyLM(("x", "y"), big, [400.0, -400.0])
        ref = ToyLM.uniform(("x", "y"))
        assert dpo_loss(pol, ref, PreferencePair("", "x", "y", 1, 0), 1.0) < 1e-12

    def test_oov(self):
        with pytest.raises(DataError):
            dpo_loss(random_lm(0), random_lm(0), PreferencePair("", "a", "zz", 1, 0), 0.1)


def fd_grad(policy, reference, pairs, beta, h=1e-6):
    big = policy.bigram_logits.copy()
    start = policy.start_logits.copy()
    gb = np.zeros_like(big)
    gs = np.zeros_like(start)
    for arr, g in ((big, gb), (start, gs)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = batch_loss(policy.with_logits(big, start), reference, pairs, beta)
            arr[idx] = old - h
            lm = batch_loss(policy.with_logits(big, start), reference, pairs, beta)
            arr[idx] = old
            g[idx] = (lp - lm) / (2 * h)
    return gb, gs


class TestGradient:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        pol, ref = random_lm(seed), random_lm(seed + 10)
        gb, gs = dpo_grad(pol, ref, PAIRS, 0.7)
        nb, ns = fd_grad(pol, ref, PAIRS, 0.7)
        assert max(max_rel_err(gb, nb), max_rel_err(gs, ns)) < 1e-6

    def test_high_precision_oracle(self):
        pol, ref = random_lm(20), random_lm(21)
        vocab = list(pol.vocabulary)
        as_mp = lambda m: ([[mp.mpf(float(v)) for v in r] for r in m.bigram_logits],
                           [mp.mpf(float(v)) for v in m.start_logits])
        assert float(mp_dpo_loss(vocab, as_mp(pol), as_mp(ref), PAIRS, 0.3)) == pytest.approx(
            batch_loss(pol, ref, PAIRS, 0.3), abs=1e-13)
        shared = PAIRS + [PreferencePair("p", "a b", "a c", 1.0, 0.0)]
        for a, n in zip(dpo_grad(pol, ref, shared, 0.3), mp_dpo_grad(pol, ref, shared, 0.3)):
            assert max_rel_err(a, n) < 1e-9

    def test_step_increases_margin(self):
        pol = random_lm(3)
        before = policy_margin(pol, PAIRS[0])
        after = policy_margin(dpo_step(pol, pol, PAIRS[:1], DpoConfig(0.1, 0.5)), PAIRS[0])
        assert after > before

    def test_zero_lr_unchanged(self):
        pol = random_lm(4)
        out = dpo_step(pol, pol, PAIRS, DpoConfig(0.1, 0.0))
        np.testing.assert_array_equal(out.bigram_logits, pol.bigram_logits)
        np.testing.assert_array_equal(out.start_logits, pol.start_logits)

    def test_reference_untouched(self):
        pol, ref = random_lm(5), random_lm(6)
        snap = ref.bigram_logits.copy()
        dpo_step(pol, ref, PAIRS, DpoConfig(0.1, 1.0))
        np.testing.assert_array_equal(ref.bigram_logits, snap)

    def test_empty_batch(self):
        with pytest.raises(DataError):
            dpo_step(random_lm(0), random_lm(0), [], DpoConfig())

    def test_small_step_monotone(self):
        pol = random_lm(7)
        ref = pol
        cfg = DpoConfig(0.1, 0.05, 1)
        margins = [np.mean([policy_margin(pol, p) for p in PAIRS])]
        for _ in range(200):
            pol = dpo_step(pol, ref, PAIRS, cfg)
            margins.append(np.mean([policy_margin(pol, p) for p in PAIRS]))
        steps_up = sum(b >= a for a, b in zip(margins, margins[1:]))
        assert steps_up >= 0.95 * 200
        assert margins[-1] > margins[0]

    def test_train_dpo_uses_start_snapshot(self):
        pol = random_lm(8)
        out = train_dpo(pol, PAIRS, DpoConfig(0.1, 0.5, 3))
        manual = pol
        for _ in range(3):
            manual = dpo_step(manual, pol, PAIRS, DpoConfig(0.1, 0.5))
        np.testing.assert_array_equal(out.bigram_logits, manual.bigram_logits)


class TestPairs:
    def test_build_with_skips(self):
        ranked = []
        for i in range(10):
            if i in (3, 7):
                ranked.append((f"s{i}", "p", None))
            else:
                ranked.append((f"s{i}", "p", Ranking(sc(f"good {i}", 0.4, 0), sc(f"bad {i}", -0.2, 1))))
        pairs, skipped = build_pairs(ranked, round=2)
        assert len(pairs) == 8 and skipped == 2
        assert (pairs[0].reward_chosen, pairs[0].reward_rejected) == (0.4, -0.2)
        assert all(p.round == 2 for p in pairs)

    def test_identical_bodies_never_emitted(self):
        pairs, skipped = build_pairs([("s", "p", Ranking(sc("same", 1.0, 0), sc("same", 0.0, 1)))], 1)
        assert pairs == [] and skipped == 1

    def test_invariants(self):
        with pytest.raises(DataError):
            PreferencePair("p", "a", "b", 0.0, 1.0)
        with pytest.raises(DataError):
            PreferencePair("p", "a", "a", 1.0, 0.0)

    def test_export_round_trip(self, tmp_path):
        pairs = [PreferencePair(f"line one\nline two {i}", f"c{i}", f"r{i}", 0.5 + i, -0.25, f"s{i}", 3) for i in range(8)]
        path = tmp_path / "pairs.jsonl"
        assert export_pairs(pairs, path) == 8
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 8
        assert "\\n" in lines[0]
        assert list(json.loads(lines[0])) == ["prompt", "chosen", "rejected", "reward_chosen",
                                              "reward_rejected", "sample_id", "round"]
        assert load_pairs(path) == pairs

    def test_export_empty(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        assert export_pairs([], path) == 0
        assert path.read_bytes() == b""

    def test_export_io_error(self, tmp_path):
        with pytest.raises(OSError):
            export_pairs([], tmp_path / "missing" / "x.jsonl")
