import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm

from ctbnids import hids
from ctbnids.exceptions import InputError, NotConvergedWarning
from ctbnids.hids import (HidsEMConfig, ProcessTrace, StideDatabase, SyscallModel,
                          build_spike_generator, build_syscall_model, hids_em, hids_estep,
                          process_loglik, quiet_forward, spike_forward, stide_baseline)
from ctbnids.synth import gen_syscalls

import oracles

VOCAB = ("a", "b", "c")


def model_m1(rates=(3.0, 5.0, 2.0)):
    return SyscallModel(VOCAB, np.zeros((1, 1)), np.array(rates, float)[:, None])


def model_m2(seed=0, lo=20.0, hi=200.0):
    rng = np.random.default_rng(seed)
    q = rng.uniform(5.0, 50.0, (2, 2))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return SyscallModel(VOCAB, q, rng.uniform(lo, hi, (3, 2)))


def trace(ticks, calls, res=0.01, pid="p"):
    return ProcessTrace(pid, np.array(ticks, float), calls, res)


class TestSpikeGenerator:
    def test_m1_k1_layout(self):
        m = model_m1()
        Q = build_spike_generator(m, ("b",)).matrix
        lam = 10.0
        assert np.allclose(Q, [[-lam, 5.0], [0.0, -lam]])

    def test_m2_k2_blocks(self):
        m = model_m2()
        Q = build_spike_generator(m, ("c", "a")).matrix
        assert Q.shape == (6, 6)
        for b in range(3):
            assert np.allclose(Q[2 * b:2 * b + 2, 2 * b:2 * b + 2], m.q_hat)
        assert np.allclose(Q[0:2, 2:4], np.diag(m.rates[2]))
        assert np.allclose(Q[2:4, 4:6], np.diag(m.rates[0]))
        assert not Q[0:2, 4:6].any() and not Q[2:, :2].any() and not Q[4:6, 2:4].any()

    @given(st.integers(0, 500), st.lists(st.integers(0, 2), min_size=0, max_size=4))
    def test_row_sums(self, seed, seq):
        m = model_m2(seed)
        Q = build_spike_generator(m, tuple(seq)).matrix
        rows = Q.sum(axis=1).reshape(len(seq) + 1, 2)
        for pos in range(len(seq) + 1):
            for h in range(2):
                want = -m.rates[:, h].sum() + (m.rates[seq[pos], h] if pos < len(seq) else 0.0)
                assert rows[pos, h] == pytest.approx(want, rel=1e-12)
        assert np.all(rows <= 1e-12)

    def test_unknown_call_goes_to_other(self):
        m = SyscallModel(("x", hids.OTHER), np.zeros((1, 1)), [[1.0], [2.0]])
        assert m.encode(["x", "zzz"]) == (0, 1)
        with pytest.raises(InputError):
            model_m1().encode(["zzz"])


class TestSpikeForward:
    @pytest.mark.parametrize("k", range(1, 7))
    def test_poisson_closed_form(self, k):
        rates = (3.0, 5.0, 2.0)
        m = model_m1(rates)
        seq = tuple(np.random.default_rng(k).integers(0, 3, k).tolist())
        got = spike_forward([1.0], build_spike_generator(m, seq), 0.01)[0]
        want = oracles.poisson_spike_mass([rates[s] for s in seq], sum(rates), 0.01)
        assert abs(got - want) < 1e-10
        assert got == pytest.approx(want, rel=1e-9)

    def test_impossible_call(self):
        m = SyscallModel(VOCAB, [[-1.0, 1.0], [1.0, -1.0]], [[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]])
        out = spike_forward([0.5, 0.5], build_spike_generator(m, ("a", "b")), 0.01)
        assert np.array_equal(out, [0.0, 0.0])

    def test_rejection_oracle(self):
        m = model_m2(seed=3)
        alpha = np.array([0.3, 0.7])
        seq = (0, 2)
        got = spike_forward(alpha, build_spike_generator(m, seq), 0.01)
        est, se = oracles.rejection_spike(m.q_h, m.rates, alpha, seq, 0.01, 200_000, seed=1)
        assert np.all(np.abs(got - est) < 3 * se)

    def test_long_batch_sparse_route(self):
        m = model_m2(seed=4, lo=2000.0, hi=8000.0)
        seq = tuple(np.random.default_rng(0).integers(0, 3, hids.DENSE_SPIKE_LIMIT + 5).tolist())
        gen = build_spike_generator(m, seq)
        sparse = spike_forward([0.5, 0.5], gen, 0.01)
        dense = np.maximum(np.array([0.5, 0.5]) @ expm(gen.matrix * 0.01)[:2, -2:], 0.0)
        assert np.allclose(sparse, dense, rtol=1e-6, atol=1e-300)


class TestQuiet:
    def test_zero_duration(self):
        m = model_m2()
        assert np.allclose(quiet_forward([0.2, 0.8], m, 0.0), [0.2, 0.8])

    def test_m1_scalar(self):
        m = model_m1()
        assert quiet_forward([1.0], m, 0.3)[0] == pytest.approx(math.exp(-10.0 * 0.3))

    @given(st.integers(0, 100), st.floats(0.0, 2.0))
    def test_substochastic(self, seed, dur):
        a = np.random.default_rng(seed).dirichlet([1, 1])
        assert quiet_forward(a, model_m2(seed), dur).sum() <= a.sum() + 1e-12


class TestProcessLikelihood:
    def test_m1_product_of_closed_forms(self):
        rates = (3.0, 5.0, 2.0)
        m = model_m1(rates)
        tr = trace([0.0, 0.05, 0.3], (("a", "b"), ("c",), ("a", "a", "b")))
        want = 0.0
        for batch in tr.calls:
            want += math.log(oracles.poisson_spike_mass([rates[VOCAB.index(c)] for c in batch],
                                                        10.0, 0.01))
        want += -10.0 * tr.gaps().sum()
        assert process_loglik(m, tr) == pytest.approx(want, abs=1e-10)

    def test_empty_tick_is_quiet(self):
        m = model_m2()
        tr = trace([1.0], ((),))
        want = math.log(quiet_forward([0.5, 0.5], m, 0.01).sum())
        assert process_loglik(m, tr) == pytest.approx(want, abs=1e-12)

    def test_split_gap_invariance(self):
        m = model_m2(seed=5)
        a = trace([0.0, 0.5], (("a",), ("b", "c")))
        b = trace([0.0, 0.2, 0.5], (("a",), (), ("b", "c")))
        assert process_loglik(m, a) == pytest.approx(process_loglik(m, b), abs=1e-10)

    def test_grid_oracle_likelihood(self):
        m = model_m2(seed=6)
        tr = trace([0.0, 0.04], (("a", "c"), ("b",)))
        *_, ll = oracles.grid_syscall_ess(m.q_h, m.rates, [((0, 2), 0.01), ((), 0.03), ((1,), 0.01)],
                                          dt=1e-5)
        assert process_loglik(m, tr) == pytest.approx(ll, abs=1e-3)

    def test_per_event(self):
        m = model_m2()
        tr = trace([0.0, 0.3], (("a", "b"), ("c",)))
        assert process_loglik(m, tr, per_event=True) == pytest.approx(process_loglik(m, tr) / 3)


class TestEstep:
    def test_m1_exact_counts(self):
        m = model_m1()
        tr = trace([0.0, 0.05, 0.3], (("a", "b"), ("c",), ("a", "a", "b")))
        st_ = hids_estep(m, [tr])
        assert st_.T[0] == pytest.approx(tr.horizon, rel=1e-10)
        assert np.allclose(st_.calls[:, 0], [3, 2, 1])

    def test_grid_oracle(self):
        m = model_m2(seed=7)
        tr = trace([0.0, 0.04], (("a", "c"), ("b",)))
        st_ = hids_estep(m, [tr])
        T, M, C, _ = oracles.grid_syscall_ess(
            m.q_h, m.rates, [((0, 2), 0.01), ((), 0.03), ((1,), 0.01)], dt=2.5e-6)
        assert np.max(np.abs(st_.T - T)) < 1e-3
        assert np.max(np.abs(st_.M - M)) < 1e-3
        assert np.max(np.abs(st_.calls - C)) < 1e-3

    def test_additive(self):
        m = model_m2(seed=8)
        a = trace([0.0, 0.2], (("a",), ("b", "b")), pid="a")
        b = trace([5.0], (("c", "a"),), pid="b")
        sa, sb, sab = hids_estep(m, [a]), hids_estep(m, [b]), hids_estep(m, [a, b])
        for f in ("T", "M", "calls"):
            assert np.allclose(getattr(sa, f) + getattr(sb, f), getattr(sab, f), rtol=1e-10)
        assert sab.log_likelihood == pytest.approx(sa.log_likelihood + sb.log_likelihood)

    def test_conservation(self):
        m = model_m2(seed=9, lo=2.0, hi=20.0)
        procs = gen_syscalls(m, 3, 4.0, seed=1)
        st_ = hids_estep(m, procs)
        assert st_.T.sum() == pytest.approx(sum(p.horizon for p in procs), rel=1e-9)
        assert st_.calls.sum() == pytest.approx(sum(p.n_calls for p in procs), rel=1e-9)


class TestEM:
    def test_m1_one_iteration(self):
        m = model_m1()
        procs = gen_syscalls(model_m1((10.0, 4.0, 1.0)), 5, 3.0, seed=2)
        res = hids_em(m, procs, HidsEMConfig(max_iter=5, pseudo=1e-3))
        assert res.converged and res.n_iter == 2
        counts = np.array([sum(p.sequence().count(c) for p in procs) for c in VOCAB])
        T = sum(p.horizon for p in procs)
        assert np.allclose(res.model.rates[:, 0], (counts + 1e-3) / (T + 1e-3), rtol=1e-9)

    def test_objective_monotone(self):
        truth = model_m2(seed=10, lo=2.0, hi=30.0)
        procs = gen_syscalls(truth, 4, 3.0, seed=3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            res = hids_em(model_m2(seed=11, lo=2.0, hi=30.0), procs, HidsEMConfig(max_iter=15, tol=0))
        assert np.all(np.diff(res.objectives) >= -1e-9)

    @pytest.mark.slow
    def test_recovery(self):
        truth = SyscallModel(("a", "b", "c", "d"), [[-1.0, 1.0], [1.5, -1.5]],
                             [[20.0, 3.0], [6.0, 15.0], [3.0, 10.0], [10.0, 4.0]])
        procs = gen_syscalls(truth, 40, 10.0, seed=4)
        assert sum(len(p.ticks) for p in procs) >= 10_000
        init = SyscallModel(truth.vocabulary, [[-0.5, 0.5], [0.5, -0.5]],
                            [[10.0, 5.0], [5.0, 10.0], [5.0, 5.0], [5.0, 5.0]])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            fit = hids_em(init, procs, HidsEMConfig(max_iter=200, tol=1e-8)).model
        best = min(([0, 1], [1, 0]), key=lambda p: np.abs(fit.rates[:, p] - truth.rates).sum())
        assert np.all(np.abs(fit.rates[:, best] / truth.rates - 1) < 0.15)
        q_fit = fit.q_h[np.ix_(best, best)]
        assert abs(q_fit[0, 1] / 1.0 - 1) < 0.15 and abs(q_fit[1, 0] / 1.5 - 1) < 0.15


class TestStide:
    def _train(self):
        return [trace(np.arange(10) * 0.1, tuple((c,) for c in "abcabcabca"), pid="t")]

    def test_verbatim_scores_zero(self):
        tr = self._train()
        assert stide_baseline(tr, tr[0], k=3, h=5) == 0

    def test_hand_count(self):
        test = trace(np.arange(10) * 0.1, tuple((c,) for c in "abcaXcabca"), pid="x")
        db = StideDatabase(self._train(), k=3)
        mis = db.mismatches(test)
        # windows starting at 2, 3, 4 cover position 4
        assert mis.tolist() == [0, 0, 1, 1, 1, 0, 0, 0]
        assert db.score(test, h=3) == 3 and db.score(test, h=8) == 3

    def test_short_trace_warns(self):
        db = StideDatabase(self._train(), k=5)
        with pytest.warns(UserWarning):
            assert db.score(trace([0.0], (("a",),)), h=5) == 0

    def test_h_below_k_rejected(self):
        with pytest.raises(InputError):
            StideDatabase(self._train(), k=5).score(self._train()[0], h=3)
