import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctbnids import ctmc
from ctbnids.ctbn import (Cim, CtbnModel, JointTrajectory, amalgamate, ctbn_loglik, ctbn_mle,
                          ctbn_suff_stats, exact_em, forward_sample, observe)
from ctbnids.ctmc import EMConfig, IntensityMatrix
from ctbnids.exceptions import InputError, JointSizeError, NotConvergedWarning
from ctbnids.modelio import dumps_model, loads_model

from helpers import chained_pair, cyclic_triple, independent_pair, two_state


class TestModel:
    def test_cim_instantiation_count_checked(self):
        with pytest.raises(InputError):
            Cim("B", ("A",), (2,), two_state(1, 1))

    def test_unknown_parent(self):
        with pytest.raises(InputError):
            CtbnModel({"B": 2}, {"B": Cim("B", ("A",), (2,), np.stack([two_state(1, 1)] * 2))})

    def test_cycles_allowed(self):
        m = cyclic_triple()
        assert ("X", "Y") in m.edges and ("Y", "X") in m.edges


class TestAmalgamation:
    def test_independent_pair_by_hand(self):
        a, b = 0.7, 2.0
        Q = amalgamate(independent_pair(a, b)).rates
        # joint code = 2 * A + B
        want = np.array([[0, b, a, 0], [b, 0, 0, a], [a, 0, 0, b], [0, a, b, 0]], dtype=float)
        np.fill_diagonal(want, -want.sum(axis=1))
        assert np.array_equal(Q, want)
        assert Q[0, 3] == 0.0 and Q[1, 2] == 0.0

    def test_single_variable(self):
        m = CtbnModel({"X": 3}, {"X": Cim("X", (), (), IntensityMatrix.random(3, seed=1).rates)})
        assert np.array_equal(amalgamate(m).rates, m.cims["X"].matrices[0])

    def test_entries_are_zero_or_cim_entries(self):
        m = cyclic_triple()
        Q = amalgamate(m).rates
        states = m.joint_states()
        for i in range(len(states)):
            for j in range(len(states)):
                if i == j:
                    continue
                diff = np.flatnonzero(states[i] != states[j])
                if len(diff) != 1:
                    assert Q[i, j] == 0.0
                    continue
                v = m.names[diff[0]]
                u = m.parent_indices(states[[i]])[0, diff[0]]
                assert Q[i, j] == m.cims[v].matrices[u][states[i, diff[0]], states[j, diff[0]]]

    def test_cap(self):
        with pytest.raises(JointSizeError):
            amalgamate(cyclic_triple(), cap=8)


class TestSampling:
    def test_no_shared_timestamps(self):
        tr = forward_sample(cyclic_triple(), 200.0, seed=2)
        assert np.all(np.diff(tr.times) > 0)

    def test_conditional_rates(self):
        m = chained_pair()
        tr = forward_sample(m, 1e5, seed=3)
        css = ctbn_suff_stats(m, tr)
        for name in m.names:
            cim = m.cims[name]
            for u in range(cim.n_instantiations):
                for x in range(2):
                    T, n = css.T[name][u, x], css.M[name][u, x, 1 - x]
                    q = cim.matrices[u][x, 1 - x]
                    # Poisson count given exposure T
                    assert abs(n - q * T) < 3 * math.sqrt(q * T)

    def test_single_variable_matches_ctmc_dwells(self):
        Q = IntensityMatrix([[-2.0, 2.0], [0.5, -0.5]])
        m = CtbnModel({"X": 2}, {"X": Cim("X", (), (), Q.rates)}, {"X": [1.0, 0.0]})
        a = forward_sample(m, 20000.0, seed=5)
        b = ctmc.sample_trajectory(Q, [1.0, 0.0], 20000.0, seed=6)
        sa, sb = ctbn_suff_stats(m, a).variable("X"), ctmc.suff_stats_complete([b], 2)
        ma, mb = sa.T[0] / sa.M[0, 1], sb.T[0] / sb.M[0, 1]
        se = 0.5 * math.sqrt(1 / sa.M[0, 1] + 1 / sb.M[0, 1])
        assert abs(ma - mb) < 3 * se


class TestStatistics:
    def test_parentless_equals_marginal_ctmc(self):
        m = chained_pair()
        tr = forward_sample(m, 300.0, seed=7)
        states, times = tr.variable_path("A")
        ss = ctmc.suff_stats_complete([ctmc.Trajectory(states, times, tr.horizon)], 2)
        css = ctbn_suff_stats(m, tr)
        assert np.allclose(css.T["A"][0], ss.T) and np.array_equal(css.M["A"][0], ss.M)

    def test_hand_trace(self):
        m = chained_pair()
        tr = JointTrajectory(("A", "B"), (0, 0), np.array([1.0, 2.5]), np.array([0, 1]),
                             np.array([1, 1]), 4.0)
        css = ctbn_suff_stats(m, tr)
        # A: 0 for [0,1), 1 for [1,4]; B: 0 for [0,2.5) (A=0 on [0,1), A=1 on [1,2.5)), 1 after
        assert np.allclose(css.T["A"][0], [1.0, 3.0])
        assert css.M["A"][0, 0, 1] == 1
        assert np.allclose(css.T["B"][0], [1.0, 0.0])
        assert np.allclose(css.T["B"][1], [1.5, 1.5])
        assert css.M["B"][1, 0, 1] == 1 and css.M["B"][0].sum() == 0

    def test_conservation(self):
        m = cyclic_triple()
        css = ctbn_suff_stats(m, forward_sample(m, 50.0, seed=8))
        for name in m.names:
            assert css.T[name].sum() == pytest.approx(50.0)


class TestLearning:
    def test_quotient(self):
        m = independent_pair(1.0, 1.0)
        css = ctbn_suff_stats(m, forward_sample(m, 1.0, seed=0))
        css.T["A"][0] = [2.0, 1.0]
        css.M["A"][0] = [[0, 4], [1, 0]]
        cims = ctbn_mle(css, m, pseudo=0.0)
        assert cims["A"].matrices[0][0, 1] == pytest.approx(2.0)

    def test_recovery(self):
        m = chained_pair()
        tr = forward_sample(m, 1e5, seed=9)
        cims = ctbn_mle(ctbn_suff_stats(m, tr), m)
        for name in m.names:
            assert np.allclose(cims[name].matrices, m.cims[name].matrices, rtol=0.05)

    def test_unvisited_instantiation_is_regularised_default(self):
        m = chained_pair()
        tr = JointTrajectory(("A", "B"), (0, 0), np.array([]), np.array([], int), np.array([], int), 5.0)
        cims = ctbn_mle(ctbn_suff_stats(m, tr), m)
        # never saw A = 1: pseudo-count rates p / p = 1
        assert np.allclose(cims["B"].matrices[1], two_state(1.0, 1.0))

    def test_toggle_rate_is_tied(self):
        m = cyclic_triple()
        cims = ctbn_mle(ctbn_suff_stats(m, forward_sample(m, 500.0, seed=10)), m)
        E = cims["E"].matrices
        assert E[1][0, 1] == E[1][1, 0]


class TestLoglik:
    def test_parentless_equals_ctmc(self):
        Q = IntensityMatrix.random(3, seed=2)
        m = CtbnModel({"X": 3}, {"X": Cim("X", (), (), Q.rates)})
        tr = forward_sample(m, 40.0, seed=3)
        css = ctbn_suff_stats(m, tr)
        assert ctbn_loglik(m, css) == pytest.approx(ctmc.loglik_complete(Q, css.variable("X")))

    def test_zero_stats(self):
        m = cyclic_triple()
        css = ctbn_suff_stats(m, JointTrajectory(tuple(m.names), (0, 0, 0), np.array([]),
                                                 np.array([], int), np.array([], int), 0.0))
        assert ctbn_loglik(m, css) == 0.0

    @given(st.integers(0, 10_000))
    def test_amalgamation_equivalence(self, seed):
        m = chained_pair()
        tr = forward_sample(m, 20.0, seed=seed)
        Q = amalgamate(m)
        flat = ctmc.suff_stats_complete([tr.to_ctmc(m)], Q.n)
        assert ctbn_loglik(m, ctbn_suff_stats(m, tr)) == pytest.approx(
            ctmc.loglik_complete(Q, flat), abs=1e-8)


class TestExactEM:
    def test_fully_observed_one_step(self):
        truth = chained_pair()
        tr = forward_sample(truth, 400.0, seed=11)
        ev = observe(truth, tr, ["A", "B"])
        init = truth.with_cims({"B": Cim("B", ("A",), (2,), np.stack([two_state(1, 1)] * 2))})
        res = exact_em(init, ev, EMConfig(max_iter=5))
        want = ctbn_mle(ctbn_suff_stats(truth, tr), truth)
        assert res.converged and res.n_iter == 2
        for name in truth.names:
            assert np.allclose(res.model.cims[name].matrices, want[name].matrices, rtol=1e-8)

    def test_monotone(self):
        truth = chained_pair()
        tr = forward_sample(truth, 100.0, seed=12)
        ev = observe(truth, tr, ["B"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            res = exact_em(independent_pair(1.0, 1.0).with_cims(
                {"B": Cim("B", ("A",), (2,), np.stack([two_state(1, 2), two_state(2, 1)]))}),
                ev, EMConfig(max_iter=20, tol=0))
        assert np.all(np.diff(res.log_likelihoods) >= -1e-9)

    @pytest.mark.slow
    def test_hidden_parent_recovery(self):
        truth = chained_pair()
        tr = forward_sample(truth, 20000.0, seed=13)
        ev = observe(truth, tr, ["B"])
        init = truth.with_cims({
            "A": Cim("A", (), (), two_state(0.3, 0.6)),
            "B": Cim("B", ("A",), (2,), np.stack([two_state(0.5, 0.5), two_state(2.0, 2.0)]))})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            res = exact_em(init, ev, EMConfig(max_iter=200, tol=1e-8))
        for name in truth.names:
            got, want = res.model.cims[name].matrices, truth.cims[name].matrices
            off = want != 0
            assert np.all(np.abs(got[off] / want[off] - 1) < 0.10), name


class TestModelFiles:
    def test_round_trip_bytes(self):
        m = cyclic_triple()
        text = dumps_model(m, {"kind": "generic"}, header=["test"])
        m2, meta = loads_model(text)
        assert m2 == m and meta == {"kind": "generic"}
        assert dumps_model(m2, meta, header=["test"]) == text

    def test_missing_cim(self):
        with pytest.raises(InputError):
            loads_model("[variables]\nX = 2\n")
