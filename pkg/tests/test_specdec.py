from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specedge.specdec import (
    ContractError,
    DecodeConfig,
    LinkTiming,
    Phase,
    SyntheticLM,
    VerificationMode,
    _run_parallel_traced,
    acceptance_probability,
    ceil_rounds,
    run_conventional,
    run_parallel,
    sample_token,
    target_only_decode,
    verify_batch,
)

# spec-style hand example: 0.1 s per draft token, 6.4e-5 s per uploaded
# token and 0.01 s per verified position
HAND_CFG = DecodeConfig(gamma=4, max_tokens=8, bits_per_token=64, draft_flops_per_token=1e8,
                        verify_flops_per_token=1e8)
HAND_TIMING = LinkTiming(device_flops=1e9, server_flops_effective=1e10, uplink_rate=1e6)


class ShiftedDraft:
    """Draft whose argmax is always one id past the target's, so greedy checks reject everything."""

    def __init__(self, target: SyntheticLM):
        self.target = target
        self.vocab_size = target.vocab_size

    def distribution(self, prefix):
        return np.roll(self.target.distribution(prefix), 1)


def _pair(seed, smoothing, vocab=64):
    target = SyntheticLM(seed, vocab)
    return target.as_draft(smoothing), target


class TestSyntheticLM:
    @given(st.integers(0, 2**31), st.lists(st.integers(0, 63), max_size=12), st.floats(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_distribution_is_valid(self, seed, prefix, smoothing):
        p = SyntheticLM(seed, 64, smoothing).distribution(prefix)
        assert p.shape == (64,)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_pure_function_of_inputs(self):
        a = SyntheticLM(7).distribution([1, 2, 3])
        b = SyntheticLM(7).distribution([1, 2, 3])
        assert np.array_equal(a, b)
        assert not np.array_equal(a, SyntheticLM(8).distribution([1, 2, 3]))

    def test_zero_smoothing_draft_equals_target(self):
        target = SyntheticLM(3)
        draft = target.as_draft(0.0)
        for prefix in ([], [5], [5, 9, 1, 1, 2]):
            assert np.array_equal(draft.distribution(prefix), target.distribution(prefix))

    @pytest.mark.parametrize("kw", [{"vocab_size": 1}, {"smoothing": -0.1}, {"smoothing": 1.5}, {"context": 0}])
    def test_rejects_bad_parameters(self, kw):
        with pytest.raises(ContractError):
            SyntheticLM(0, **kw)


class TestConfigContracts:
    @pytest.mark.parametrize("kw", [{"gamma": 0}, {"max_tokens": 0}, {"bits_per_token": 0.0},
                                    {"draft_flops_per_token": -1.0}, {"verify_fixed_flops": -1.0}])
    def test_decode_config(self, kw):
        with pytest.raises(ContractError):
            DecodeConfig(**kw)

    @pytest.mark.parametrize("kw", [{"uplink_rate": 0.0}, {"device_flops": -1.0}, {"server_queue_delay": -0.1}])
    def test_link_timing(self, kw):
        base = dict(device_flops=1e9, server_flops_effective=1e10, uplink_rate=1e6)
        base.update(kw)
        with pytest.raises(ContractError):
            LinkTiming(**base)

    def test_mode_accepts_strings(self):
        assert DecodeConfig(verification_mode="stochastic").verification_mode is VerificationMode.STOCHASTIC


class TestAcceptanceProbability:
    def test_examples(self):
        assert acceptance_probability(0.5, 0.3) == 1.0
        assert acceptance_probability(0.2, 0.4) == 0.5
        assert acceptance_probability(0.0, 0.4) == 0.0

    def test_zero_draft_probability_accepts(self):
        assert acceptance_probability(0.0, 0.0) == 1.0

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_range_and_unit_branch(self, p, q):
        a = acceptance_probability(p, q)
        assert 0.0 <= a <= 1.0
        assert (a == 1.0) == (p >= q or q == 0.0 or p / q == 1.0)

    @pytest.mark.parametrize("p,q", [(-0.1, 0.5), (0.5, 1.1), (float("nan"), 0.5)])
    def test_out_of_range(self, p, q):
        with pytest.raises(ContractError):
            acceptance_probability(p, q)


class TestVerifyBatch:
    @staticmethod
    def _one_hot(i, n=5):
        v = np.full(n, 0.01)
        v[i] = 1.0
        return v / v.sum()

    def test_full_acceptance_returns_bonus(self):
        ps = [self._one_hot(i) for i in (1, 2, 3, 4)]
        assert verify_batch(ps, [1, 2, 3], ps[:3], "greedy") == (3, 4)

    def test_first_token_rejected(self):
        ps = [self._one_hot(i) for i in (1, 2, 3, 4)]
        assert verify_batch(ps, [0, 2, 3], ps[:3], "greedy") == (0, 1)

    def test_without_bonus_distribution(self):
        ps = [self._one_hot(i) for i in (1, 2)]
        assert verify_batch(ps, [1, 2], ps, "greedy") == (2, None)

    def test_length_mismatch(self):
        ps = [self._one_hot(1)] * 3
        with pytest.raises(ContractError):
            verify_batch(ps, [1], ps[:1], "greedy")
        with pytest.raises(ContractError):
            verify_batch(ps[:2], [1, 1], ps[:1], "greedy")

    def test_stochastic_needs_rng(self):
        ps = [self._one_hot(1)] * 2
        with pytest.raises(ContractError):
            verify_batch(ps, [1], ps[:1], "stochastic")

    def test_stochastic_matches_bernoulli_replay(self):
        # hand-built 3-token batch: acceptance probabilities 1, 0.5 and 0.25
        p = [np.array([0.6, 0.3, 0.1]), np.array([0.2, 0.4, 0.4]), np.array([0.1, 0.1, 0.8]),
             np.array([0.3, 0.3, 0.4])]
        q = [np.array([0.5, 0.25, 0.25]), np.array([0.1, 0.8, 0.1]), np.array([0.4, 0.2, 0.4])]
        tokens = [0, 1, 0]
        alphas = [1.0, 0.5, 0.25]
        counts = np.zeros(4, dtype=int)
        for seed in range(300):
            got = verify_batch(p, tokens, q, "stochastic", np.random.default_rng(seed))
            replay = np.random.default_rng(seed)
            n_acc = 3
            for i, a in enumerate(alphas):
                if not replay.random() < a:
                    n_acc = i
                    break
            cdf = np.cumsum(p[n_acc])
            rep = int(np.searchsorted(cdf, replay.random() * cdf[-1], side="right"))
            assert got == (n_acc, rep)
            counts[n_acc] += 1
        # acceptance depth: P(0)=0, P(1)=.5, P(2)=.375, P(3)=.125
        assert counts[0] == 0
        assert abs(counts[1] / 300 - 0.5) < 0.1
        assert abs(counts[3] / 300 - 0.125) < 0.06

    def test_sample_token_uses_one_draw(self):
        rng = np.random.default_rng(5)
        sample_token(np.array([0.2, 0.8]), rng)
        ref = np.random.default_rng(5)
        ref.random()
        assert rng.random() == ref.random()


class TestConventional:
    def test_hand_trace(self):
        draft, target = _pair(0, 0.0)
        tokens, bd = run_conventional(draft, target, HAND_CFG, HAND_TIMING)
        # two rounds of 4 drafts (0.4 s) + 4 uploads (2.56e-4 s) + 5 verified positions (0.05 s)
        assert bd.total_s == pytest.approx(0.900512, rel=1e-12)
        assert bd.rounds == 2
        assert bd.tokens_per_round == [5, 3]
        assert len(tokens) == 8
        assert bd.mobile_compute_s == pytest.approx(0.8)
        assert bd.server_compute_s == pytest.approx(0.1)

    @pytest.mark.parametrize("gamma", [1, 3, 8])
    def test_identical_models_emit_gamma_plus_one(self, gamma):
        draft, target = _pair(11, 0.0)
        cfg = DecodeConfig(gamma=gamma, max_tokens=37)
        _, bd = run_conventional(draft, target, cfg, HAND_TIMING)
        assert bd.rounds == ceil_rounds(37, gamma)
        assert all(n == gamma + 1 for n in bd.tokens_per_round[:-1])
        assert bd.tokens_discarded == 0

    def test_adversarial_draft_emits_one_token_per_round(self):
        target = SyntheticLM(4)
        cfg = DecodeConfig(gamma=3, max_tokens=10)
        _, bd = run_conventional(ShiftedDraft(target), target, cfg, HAND_TIMING)
        assert bd.tokens_per_round == [1] * 10
        assert bd.tokens_discarded == 3 * 10

    @given(st.integers(0, 10_000), st.integers(1, 8), st.sampled_from([0.0, 0.1, 0.3]), st.integers(1, 40))
    @settings(max_examples=40, deadline=None)
    def test_breakdown_closure(self, seed, gamma, smoothing, max_tokens):
        draft, target = _pair(seed, smoothing)
        timing = LinkTiming(1e9, 1e10, 1e6, server_queue_delay=0.03)
        _, bd = run_conventional(draft, target, DecodeConfig(gamma=gamma, max_tokens=max_tokens), timing)
        parts = bd.mobile_compute_s + bd.uplink_s + bd.server_compute_s + bd.queue_s
        assert math.isclose(parts, bd.total_s, rel_tol=1e-9)
        assert bd.total_s >= max(bd.mobile_compute_s, bd.server_compute_s)
        assert max(bd.tokens_per_round) <= gamma + 1

    def test_eos_stops_early(self):
        draft, target = _pair(2, 0.0)
        ref, _ = target_only_decode(target, DecodeConfig(max_tokens=20), HAND_TIMING)
        eos = ref[5]
        cut = ref.index(eos) + 1
        tokens, _ = run_conventional(draft, target, DecodeConfig(gamma=3, max_tokens=20, eos_token=eos), HAND_TIMING)
        assert tokens == ref[:cut]

    def test_faster_uplink_never_slower(self):
        draft, target = _pair(9, 0.1)
        cfg = DecodeConfig(gamma=4, max_tokens=40, bits_per_token=4096)
        totals = [run_conventional(draft, target, cfg, LinkTiming(1e9, 1e10, r))[1].total_s
                  for r in (1e5, 1e6, 1e7, 1e8)]
        assert all(b <= a for a, b in zip(totals, totals[1:]))


class TestParallel:
    def test_hand_trace(self):
        draft, target = _pair(0, 0.0)
        tokens, bd, phases = _run_parallel_traced(draft, target, HAND_CFG, HAND_TIMING)
        # first batch: drafted by 0.4, uploaded by 0.400256, first token checked against the prefill;
        # the rest verified by 0.440256 while the device drafts tokens 5-8 until 0.800256,
        # uploaded by 0.800512 and verified (4 positions) by 0.840512
        assert bd.total_s == pytest.approx(0.840512, rel=1e-12)
        assert len(tokens) == 8
        assert phases[:2] == [Phase.PRE_VERIFY, Phase.POST_VERIFY]

    def test_phase_log_starts_in_pre_verify_and_alternates(self):
        draft, target = _pair(3, 0.3)
        _, _, phases = _run_parallel_traced(draft, target, DecodeConfig(gamma=4, max_tokens=60), HAND_TIMING)
        assert phases[0] is Phase.PRE_VERIFY
        assert all(a is not b for a, b in zip(phases, phases[1:]))

    def test_less_idle_than_conventional_with_identical_models(self):
        for seed in range(20):
            draft, target = _pair(seed, 0.0)
            cfg = DecodeConfig(gamma=1 + seed % 8, max_tokens=24 + seed)
            timing = LinkTiming(1e9, 1e10, 1e5 * (1 + seed))
            _, conv = run_conventional(draft, target, cfg, timing)
            _, par = run_parallel(draft, target, cfg, timing)
            assert par.device_idle_s + par.server_idle_s < conv.device_idle_s + conv.server_idle_s

    def test_infinite_uplink_limit(self):
        draft, target = _pair(1, 0.0)
        cfg = DecodeConfig(gamma=4, max_tokens=200, bits_per_token=64, draft_flops_per_token=1e8,
                           verify_flops_per_token=1e8)
        timing = LinkTiming(1e9, 1e10, 1e15, server_queue_delay=0.02)
        _, bd = run_parallel(draft, target, cfg, timing)
        bound = max(bd.mobile_compute_s, bd.server_compute_s) + timing.server_queue_delay
        assert bd.total_s == pytest.approx(bound, rel=0.01)

    def test_breakdown_non_negative(self):
        draft, target = _pair(8, 0.3)
        _, bd = run_parallel(draft, target, DecodeConfig(gamma=5, max_tokens=50), LinkTiming(1e9, 1e10, 1e6, 0.01))
        for name in ("mobile_compute_s", "uplink_s", "server_compute_s", "device_idle_s", "server_idle_s"):
            assert getattr(bd, name) >= 0
        assert bd.total_s >= max(bd.mobile_compute_s, bd.server_compute_s)
        assert 0.0 <= bd.idle_fraction <= 1.0

    def test_stochastic_mode_is_deterministic_per_seed(self):
        draft, target = _pair(5, 0.2)
        cfg = DecodeConfig(gamma=3, max_tokens=40, verification_mode="stochastic")
        a = run_parallel(draft, target, cfg, HAND_TIMING, rng=4)
        b = run_parallel(draft, target, cfg, HAND_TIMING, rng=4)
        assert a[0] == b[0]
        assert a[1] == b[1]


class TestEquivalence:
    @given(st.integers(0, 2**20), st.integers(1, 8), st.sampled_from([0.0, 0.1, 0.3]), st.integers(1, 50),
           st.floats(1e4, 1e8))
    @settings(max_examples=60, deadline=None)
    def test_greedy_sequences_match_target_only(self, seed, gamma, smoothing, max_tokens, rate):
        draft, target = _pair(seed, smoothing)
        cfg = DecodeConfig(gamma=gamma, max_tokens=max_tokens, bits_per_token=512)
        timing = LinkTiming(1e9, 1e10, rate)
        ref, _ = target_only_decode(target, cfg, timing)
        conv, _ = run_conventional(draft, target, cfg, timing)
        par, _ = run_parallel(draft, target, cfg, timing)
        assert conv == ref
        assert par == ref

    def test_target_only_single_token(self):
        target = SyntheticLM(2)
        tokens, bd = target_only_decode(target, DecodeConfig(max_tokens=1), HAND_TIMING)
        assert tokens == [int(np.argmax(target.distribution([])))]
        assert bd.rounds == 1

    def test_prompt_is_respected(self):
        draft, target = _pair(6, 0.1)
        cfg = DecodeConfig(gamma=3, max_tokens=12, prompt=(4, 4, 2))
        ref, _ = target_only_decode(target, cfg, HAND_TIMING)
        assert run_parallel(draft, target, cfg, HAND_TIMING)[0] == ref
        assert ref != target_only_decode(target, DecodeConfig(max_tokens=12), HAND_TIMING)[0]
