from __future__ import annotations

import dataclasses
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracle import random_state
from specedge.baselines import random_assoc
from specedge.mecmodel import InfeasibleAllocation
from specedge.tma import (
    _Evaluator,
    dump_swap_trace,
    evaluate_association,
    tma,
    tma_phase1,
    tma_phase2,
    tma_with_trace,
)


def one_hot(servers, E):
    X = np.zeros((len(servers), E))
    X[np.arange(len(servers)), servers] = 1.0
    return X


def swap_neighbours(X):
    servers = X.argmax(axis=1)
    for m, m2 in itertools.combinations(range(len(servers)), 2):
        if servers[m] != servers[m2]:
            cand = servers.copy()
            cand[m], cand[m2] = servers[m2], servers[m]
            yield one_hot(cand, X.shape[1])


def instance(seed, M, E):
    rng = np.random.default_rng(seed)
    s = random_state(rng, M, E, time_unit_s=1e-3, cm_bandwidth_unit=1e4, cp_flops_unit=1e21)
    return s, rng.uniform(0.01, 1, (M, E)), rng.uniform(0.01, 1, (M, E))


def starved_pair():
    """Device 0 carries the heavy task but hears server 0 (slow) best; device 1 is the reverse."""
    rng = np.random.default_rng(0)
    s = random_state(rng, 2, 2)
    s = dataclasses.replace(
        s, H=np.array([[2e-6, 1e-6], [1e-6, 2e-6]]), srv_flops=np.array([2e11, 4e12]),
        queue_slots=np.zeros(2, dtype=int), task_f_es=np.array([6.4e11, 3.2e10]),
        task_f_md=np.array([1e9, 1e9]), local_flops=np.array([1e11, 1e11]),
    )
    return s, np.full((2, 2), 0.5), np.ones((2, 2))


class TestPhase1:
    def test_examples(self):
        assert np.array_equal(tma_phase1(np.array([[2.0, 1.0], [1.0, 2.0]])), np.eye(2))
        assert np.array_equal(tma_phase1(np.ones((3, 4)))[:, 0], np.ones(3))

    def test_row_argmax_oracle(self):
        H = np.random.default_rng(1).exponential(size=(6, 3))
        X = tma_phase1(H)
        for i in range(6):
            best = max(range(3), key=lambda j: (H[i, j], -j))
            assert X[i, best] == 1.0 and X[i].sum() == 1.0

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            tma_phase1(np.array([[np.nan, 1.0]]))


class TestPhase2:
    def test_starved_server_triggers_one_swap(self):
        s, Y, Z = starved_pair()
        values = {k: evaluate_association(one_hot(k, 2), Y, Z, s, 0.0, 0.0) for k in itertools.product(range(2), repeat=2)}
        best = min(values, key=values.get)
        assert best == (1, 0)
        X, swaps = tma_with_trace(Y, Z, s, lam=0.0, w=0.0)
        assert np.array_equal(X.argmax(axis=1), best)
        assert len(swaps) == 1
        assert swaps[0].pair == ((0, 0), (1, 1))
        assert swaps[0].objective_after < swaps[0].objective_before

    def test_fixed_point_has_no_swaps(self):
        s, Y, Z = starved_pair()
        X, swaps = tma_phase2(one_hot([1, 0], 2), Y, Z, s, 0.0, 0.0)
        assert swaps == []
        assert np.array_equal(X, one_hot([1, 0], 2))

    def test_single_server(self):
        s, Y, Z = instance(2, 5, 1)
        X, swaps = tma_with_trace(Y, Z, s)
        assert np.all(X == 1.0) and swaps == []

    def test_identical_devices_and_servers(self):
        rng = np.random.default_rng(3)
        s = random_state(rng, 4, 2)
        s = dataclasses.replace(
            s, H=np.tile([[1e-6, 1e-6]], (4, 1)), srv_flops=np.full(2, 1e12), queue_slots=np.zeros(2, dtype=int),
            tx_power_w=np.full(4, 0.1), local_flops=np.full(4, 1e11), battery=np.full(4, 0.5),
            task_d=np.full(4, 4e5), task_f_md=np.full(4, 2.7e10), task_f_es=np.full(4, 3.2e11),
        )
        X, swaps = tma_with_trace(np.full((4, 2), 0.3), np.full((4, 2), 0.3), s)
        assert swaps == []
        assert np.array_equal(X, tma_phase1(s.H))

    def test_infeasible_input(self):
        s, Y, Z = instance(4, 3, 2)
        with pytest.raises(InfeasibleAllocation):
            tma_phase2(np.ones((3, 2)), Y, Z, s)
        with pytest.raises(InfeasibleAllocation):
            tma_phase2(np.ones((2, 2)), Y, Z, s)

    def test_unknown_strategy(self):
        s, Y, Z = instance(5, 3, 2)
        with pytest.raises(ValueError):
            tma(Y, Z, s, strategy="random")

    @given(st.integers(0, 10_000), st.integers(2, 8), st.integers(2, 4), st.sampled_from(["first", "best"]),
           st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_stable_and_monotone(self, seed, M, E, strategy, wc):
        s, Y, Z = instance(seed, M, E)
        X, swaps = tma_with_trace(Y, Z, s, strategy=strategy, work_conserving=wc)
        assert np.all(X.sum(axis=1) == 1.0)
        final = evaluate_association(X, Y, Z, s, work_conserving=wc)
        for cand in swap_neighbours(X):
            assert evaluate_association(cand, Y, Z, s, work_conserving=wc) >= final * (1 - 1e-12)
        trace = [r.objective_before for r in swaps] + ([swaps[-1].objective_after] if swaps else [])
        assert all(b < a for a, b in zip(trace, trace[1:]))
        phase1 = evaluate_association(tma_phase1(s.H), Y, Z, s, work_conserving=wc)
        assert final <= phase1
        # swaps only exchange servers, so every server keeps its load count
        assert np.array_equal(X.sum(axis=0), tma_phase1(s.H).sum(axis=0))

    def test_beats_random_association(self):
        wins = 0
        for seed in range(100):
            s, Y, Z = instance(seed, 6, 3)
            X = tma(Y, Z, s)
            Xr = random_assoc(s, np.random.default_rng(seed))
            wins += evaluate_association(X, Y, Z, s) <= evaluate_association(Xr, Y, Z, s)
        assert wins >= 95

    def test_first_improvement_scan_order(self):
        s, Y, Z = instance(11, 6, 3)
        _, swaps = tma_with_trace(Y, Z, s)
        for a, b in zip(swaps, swaps[1:]):
            if a.iteration == b.iteration:
                assert (a.pair[0][0], a.pair[1][0]) < (b.pair[0][0], b.pair[1][0])

    def test_cached_evaluator_matches_reference(self):
        for seed in range(30):
            s, Y, Z = instance(seed, 5, 3)
            rng = np.random.default_rng(seed)
            for wc in (False, True):
                ev = _Evaluator(Y, Z, s, None, None, wc)
                for _ in range(4):
                    X = random_assoc(s, rng)
                    ref = evaluate_association(X, Y, Z, s, work_conserving=wc)
                    assert ev(X) == pytest.approx(ref, rel=1e-13)

    def test_trace_dump(self, tmp_path):
        s, Y, Z = starved_pair()
        _, swaps = tma_with_trace(Y, Z, s, lam=0.0, w=0.0)
        path = tmp_path / "swaps.jsonl"
        dump_swap_trace(swaps, path)
        recs = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(recs) == 1
        assert recs[0]["pair"] == [[0, 0], [1, 1]]

    def test_deterministic(self):
        s, Y, Z = instance(12, 7, 3)
        a = tma_with_trace(Y, Z, s)
        b = tma_with_trace(Y, Z, s)
        assert np.array_equal(a[0], b[0])
        assert a[1] == b[1]
