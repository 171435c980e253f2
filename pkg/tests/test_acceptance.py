"""End-to-end acceptance checks, one per criterion.

Each ``criterion_N`` returns ``(ok, detail)``; the pytest wrappers print a
``criterion N: PASS|FAIL`` line and then assert.  Running this file as a
script prints the same lines without pytest.
"""
import os
import sys
import time
import warnings

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ctbnids import cli, ctbn, ctmc, hids, nids, synth  # noqa: E402
from ctbnids.ctmc import EMConfig, EvidenceTrajectory, IntensityMatrix, Segment  # noqa: E402
from ctbnids.evaluation import confusion_matrix, label_windows, roc_auc  # noqa: E402
from ctbnids.exceptions import NotConvergedWarning  # noqa: E402

import oracles  # noqa: E402
from helpers import chained_pair, independent_pair, two_state  # noqa: E402


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# ------------------------------------------------------------------------ 1


def criterion_1():
    Q = IntensityMatrix([[-3.0, 2.0, 1.0], [1.0, -2.5, 1.5], [2.0, 1.0, -3.0]])

    def run():
        tr = ctmc.sample_trajectory(Q, [1.0, 0.0, 0.0], 1e4, seed=0)
        return ctmc.mle_complete(ctmc.suff_stats_complete([tr], 3), pseudo=0.0)
    Qh, secs = _timed(run)
    off = ~np.eye(3, dtype=bool)
    worst = float(np.max(np.abs(Qh.rates[off] / Q.rates[off] - 1)))
    return worst <= 0.05 and secs < 10, f"max relative error {worst:.4f}, {secs:.2f} s"


# ------------------------------------------------------------------------ 2


def criterion_2():
    Q = IntensityMatrix([[-1.3, 1.3], [0.6, -0.6]])
    ev = EvidenceTrajectory(2, (Segment((0,), 0.0, 0.5), Segment((1,), 2.0, 0.7)), 2.7)

    def mask(t):
        if t <= 0.5 + 1e-12:
            return [1, 0]
        if 2.0 - 1e-12 <= t:
            return [0, 1]
        return [1, 1]

    def run():
        ss = ctmc.expected_suff_stats(Q, ev, p0=[1, 0])
        T, M, _ = oracles.grid_ess(Q.rates, [1, 0], mask, 2.7, dt=1e-4)
        return max(np.max(np.abs(ss.T - T)), np.max(np.abs(ss.M - M)))
    err, secs = _timed(run)
    return err < 1e-3 and secs < 30, f"max abs deviation {err:.2e}, {secs:.2f} s"


# ------------------------------------------------------------------------ 3


def _ctmc_run(seed):
    Q = IntensityMatrix([[-1.5, 1.0, 0.5], [0.2, -0.6, 0.4], [2.0, 1.0, -3.0]])
    tr = ctmc.sample_trajectory(Q, [1, 0, 0], 40.0, seed=seed)
    times = np.arange(0.0, 40.0, 1.5)
    ev = EvidenceTrajectory.point_observations(3, times, [tr.state_at(t) for t in times], 40.0)
    return ctmc.em_fit([ev], IntensityMatrix.random(3, seed=seed),
                       EMConfig(max_iter=15, tol=0)).log_likelihoods


def _ctbn_run(seed):
    truth = chained_pair()
    tr = ctbn.forward_sample(truth, 60.0, seed=seed)
    ev = ctbn.observe(truth, tr, ["B"])
    rng = np.random.default_rng(seed)
    a, b, c, d = rng.uniform(0.3, 3.0, 4)
    init = independent_pair(a, b).with_cims(
        {"B": ctbn.Cim("B", ("A",), (2,), np.stack([two_state(b, c), two_state(d, a)]))})
    return ctbn.exact_em(init, ev, EMConfig(max_iter=10, tol=0)).log_likelihoods


def _hids_run(seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(5.0, 30.0, (2, 2))
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    truth = hids.SyscallModel(("a", "b", "c"), q, rng.uniform(10.0, 80.0, (3, 2)))
    procs = synth.gen_syscalls(truth, 4, 0.5, seed=seed)
    init = hids.build_syscall_model(truth.vocabulary, 2, seed=seed + 100)
    return hids.hids_em(init, procs, hids.HidsEMConfig(10, 0.0)).objectives


def criterion_3():
    def run():
        worst = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            for seed in range(20):
                for fn in (_ctmc_run, _ctbn_run, _hids_run):
                    drops = -np.diff(fn(seed))
                    worst = max(worst, float(drops.max(initial=0.0)))
        return worst
    worst, secs = _timed(run)
    return worst <= 1e-9 and secs < 120, f"largest decrease {worst:.2e}, {secs:.1f} s"


# ------------------------------------------------------------------------ 4


def criterion_4():
    def run():
        m = chained_pair()
        Q = ctbn.amalgamate(m)
        states = m.joint_states()
        double = np.array([[np.sum(s != t) > 1 for t in states] for s in states])
        exact_zero = bool(np.all(Q.rates[double] == 0.0))
        worst = 0.0
        for seed in range(100):
            tr = ctbn.forward_sample(m, 20.0, seed=seed)
            flat = ctmc.suff_stats_complete([tr.to_ctmc(m)], Q.n)
            worst = max(worst, abs(ctbn.ctbn_loglik(m, ctbn.ctbn_suff_stats(m, tr))
                                   - ctmc.loglik_complete(Q, flat)))
        return worst, exact_zero
    (worst, exact_zero), secs = _timed(run)
    ok = worst <= 1e-8 and exact_zero and secs < 10
    return ok, f"max |difference| {worst:.1e}, simultaneous entries zero={exact_zero}, {secs:.2f} s"


# ------------------------------------------------------------------------ 5


def _rbpf_toy():
    m = nids.build_traffic_model((22, 80), 2, 2, seed=10, g_range=(0.01, 0.05),
                                 h_range=(0.05, 0.5), toggle_range=(0.2, 2.0))
    return nids.TrafficModel(m.ports, [[-0.05, 0.05], [0.05, -0.05]],
                             m.h_rates * np.array([1.0, 4.0])[None, :, None, None], m.toggle_rates)


def _dominant_error(exact, approx):
    ref = np.concatenate([exact.g.T, exact.h_T.ravel()])
    got = np.concatenate([approx.g.T, approx.h_T.ravel()])
    dom = ref >= 0.1 * ref.max()
    return float(np.median(np.abs(got[dom] / ref[dom] - 1)))


def criterion_5():
    def run():
        m = _rbpf_toy()
        tr = synth.gen_traffic(m, 200.0, seed=11)
        ex = nids.exact_estep(m, tr)
        return {P: float(np.median([_dominant_error(ex, nids.rbpf_estep(m, tr, P, seed=s))
                                    for s in range(20)]))
                for P in (10, 100, 1000)}
    med, secs = _timed(run)
    ok = med[10] > med[100] > med[1000] and med[1000] <= 0.05 and secs < 300
    return ok, ", ".join(f"{p} particles {e:.4f}" for p, e in med.items()) + f", {secs:.1f} s"


# ------------------------------------------------------------------------ 6


def criterion_6():
    def run():
        rates = (3.0, 5.0, 2.0)
        m1 = hids.SyscallModel(("a", "b", "c"), np.zeros((1, 1)), np.array(rates)[:, None])
        rng = np.random.default_rng(0)
        closed = 0.0
        for k in range(1, 7):
            seq = tuple(rng.integers(0, 3, k).tolist())
            got = hids.spike_forward([1.0], hids.build_spike_generator(m1, seq), 0.01)[0]
            want = oracles.poisson_spike_mass([rates[s] for s in seq], sum(rates), 0.01)
            closed = max(closed, abs(got - want))
        m2 = hids.SyscallModel(("a", "b", "c"), [[-30.0, 30.0], [12.0, -12.0]],
                               [[60.0, 150.0], [90.0, 25.0], [40.0, 110.0]])
        alpha = np.array([0.3, 0.7])
        z = 0.0
        for i, seq in enumerate([(0,), (0, 2), (1, 1, 2)]):
            got = hids.spike_forward(alpha, hids.build_spike_generator(m2, seq), 0.01)
            est, se = oracles.rejection_spike(m2.q_h, m2.rates, alpha, seq, 0.01, 10**6, seed=i)
            z = max(z, float(np.max(np.abs(got - est) / se)))
        return closed, z
    (closed, z), secs = _timed(run)
    ok = closed <= 1e-10 and z <= 3 and secs < 300
    return ok, f"m=1 max error {closed:.1e}, m=2 worst |z| {z:.2f}, {secs:.1f} s"


# ------------------------------------------------------------------------ 7


BETAS = (0.1, 0.01, 0.001)


def _nids_seed(seed):
    truth = nids.build_traffic_model([22, 25, 80, 443], 4, 8, seed=seed, g_range=(0.002, 0.01),
                                     h_range=(0.02, 0.5), toggle_range=(0.1, 1.0))
    tr = synth.gen_traffic(truth, 7200.0, seed=seed + 1000)
    train, test = tr.slice(0.0, 3600.0), tr.slice(3600.0, 7200.0)
    init = nids.build_traffic_model(train.top_ports(4) + [nids.OTHER_PORT], 4, 8, seed=seed + 3000)
    model = nids.rbpf_em(init, train, nids.RbpfConfig(n_iter=3, n_particles=100, seed=seed)).model
    aucs = []
    for beta in BETAS:
        spec = synth.InjectionSpec(0.02, beta, synth.AnomalyTemplate("FLOOD", port=80),
                                   seed=seed + 2000)
        attacked, gt = synth.inject_anomaly(test, spec)
        windows = nids.score_windows(model, attacked, 50.0, 100, seed=seed)
        y, keep = label_windows(gt, windows)
        s = np.array([w.log_likelihood for w in windows])[keep]
        aucs.append(roc_auc(s, y).auc)
    return aucs


def criterion_7():
    aucs, secs = _timed(lambda: np.array([_nids_seed(s) for s in range(10)]))
    med = np.median(aucs, axis=0)
    ok = med[1] >= 0.9 and med[0] >= med[1] >= med[2] and secs < 600
    detail = ", ".join(f"beta={b} median AUC {v:.3f}" for b, v in zip(BETAS, med))
    return ok, detail + f", {secs:.0f} s"


# ------------------------------------------------------------------------ 8


def criterion_8():
    def run():
        a = nids.build_traffic_model([22, 80, 443], 2, 4, seed=5, g_range=(0.002, 0.01),
                                     h_range=(0.02, 0.2), toggle_range=(0.05, 0.25))
        b = nids.TrafficModel(a.ports, a.g_rates * 4, a.h_rates * 4, a.toggle_rates * 4)
        models, tests = [], []
        for i, host in enumerate((a, b)):
            tr = synth.gen_traffic(host, 2700.0, seed=10 + i)
            train = tr.slice(0.0, 1800.0)
            init = nids.build_traffic_model(train.top_ports(3) + [nids.OTHER_PORT], 2, 4,
                                            seed=20 + i)
            cfg = nids.RbpfConfig(n_iter=3, n_particles=100, seed=i)
            models.append(nids.rbpf_em(init, train, cfg).model)
            tests.append(tr.slice(1800.0, 2700.0))
        rows, owners = [], []
        for host, test in enumerate(tests):
            per = [nids.score_windows(m, test, 15.0, 100, seed=7) for m in models]
            for k, w in enumerate(per[0]):
                if not w.skipped:
                    rows.append([p[k].log_likelihood for p in per])
                    owners.append(host)
        return confusion_matrix(np.array(rows), owners)
    C, secs = _timed(run)
    diag = np.diag(C)
    return bool(np.all(diag >= 0.8)) and secs < 300, f"diagonal {diag.round(3).tolist()}, {secs:.1f} s"


# ------------------------------------------------------------------------ 9


def criterion_9():
    def run():
        truth = hids.build_syscall_model(m=2, seed=0)
        train = synth.gen_syscalls(truth, 40, 5.0, seed=1, prefix="t")
        normal = synth.gen_syscalls(truth, 40, 5.0, seed=2, prefix="n")
        bad = synth.gen_syscalls(synth.permuted_model(truth, seed=3), 10, 5.0, seed=4,
                                 label="attack", prefix="a")
        init = hids.build_syscall_model(truth.vocabulary, 2, seed=5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            model = hids.hids_em(init, train, hids.HidsEMConfig(50, 1e-6)).model
        test = normal + bad
        y = np.array([0] * len(normal) + [1] * len(bad))
        scores = [s.per_event_log_likelihood for s in hids.score_processes(model, test)]
        db = hids.StideDatabase(train, 5)
        stide = roc_auc([db.score(t, 50) for t in test], y, "high")
        return roc_auc(scores, y).auc, stide
    (auc, stide), secs = _timed(run)
    full = stide.fpr[0] == 0 and stide.tpr[-1] == 1 and stide.fpr[-1] == 1
    ok = auc >= 0.85 and full and secs < 600
    return ok, f"model AUC {auc:.3f}, stide AUC {stide.auc:.3f} over {len(stide.fpr)} points, {secs:.1f} s"


# ----------------------------------------------------------------------- 10


NIDS_SET = ["--set", "nids.particles=20", "--set", "nids.em_iterations=2",
            "--set", "nids.n_global=2", "--set", "nids.n_hidden=4", "--set", "nids.n_ports=3"]
GEN_SET = ["--set", "gen.duration=1200", "--set", "gen.ports=22,80,443",
           "--set", "gen.n_global=2", "--set", "gen.n_hidden=4"]


def _pipelines():
    steps = [
        ["gen-traffic", "--seed", "1", *GEN_SET, "--out", "traffic.csv"],
        ["gen-traffic", "--seed", "2", *GEN_SET, "--set", "gen.toggle_rate_low=0.4",
         "--set", "gen.toggle_rate_high=4.0", "--out", "other.csv"],
        ["inject", "--seed", "3", "--trace", "traffic.csv", "--start", "600",
         "--out", "attacked.csv", "--truth-out", "truth.csv"],
        ["train-nids", "--seed", "4", *NIDS_SET, "--trace", "traffic.csv", "--end", "600",
         "--out", "nids.model"],
        ["score-nids", "--seed", "4", *NIDS_SET, "--model", "nids.model",
         "--trace", "attacked.csv", "--start", "600", "--out", "nids_scores.csv"],
        ["baseline", "--kind", "connections", "--trace", "attacked.csv", "--start", "600",
         "--out", "count_scores.csv"],
        ["eval-roc", "--scores", "nids_scores.csv", "--truth", "truth.csv", "--out", "nids_roc.csv"],
        ["train-nids", "--seed", "5", *NIDS_SET, "--trace", "other.csv", "--end", "600",
         "--out", "other.model"],
        ["host-id", "--seed", "6", *NIDS_SET, "--models", "nids.model", "other.model",
         "--traces", "traffic.csv", "other.csv", "--out", "hosts.csv"],
        ["gen-syscalls", "--seed", "7", "--n-processes", "20", "--anomalous-fraction", "0.25",
         "--set", "gen.mean_horizon=1.0", "--out", "sys.csv", "--labels-out", "labels.csv"],
        ["train-hids", "--seed", "8", "--set", "hids.em_iterations=5", "--trace", "sys.csv",
         "--labels", "labels.csv", "--out", "hids.model"],
        ["score-hids", "--model", "hids.model", "--trace", "sys.csv", "--out", "hids_scores.csv"],
        ["baseline", "--kind", "stide", "--train", "sys.csv", "--train-labels", "labels.csv",
         "--trace", "sys.csv", "--out", "stide_scores.csv"],
        ["eval-roc", "--scores", "hids_scores.csv", "--labels", "labels.csv",
         "--out", "hids_roc.csv"],
    ]
    for argv in steps:
        code = cli.main(argv)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")


def criterion_10(workdir):
    def run():
        contents = []
        for rep in ("first", "second"):
            d = os.path.join(workdir, rep)
            os.makedirs(d, exist_ok=True)
            cwd = os.getcwd()
            os.chdir(d)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    _pipelines()
            finally:
                os.chdir(cwd)
            contents.append({f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))})
        return contents
    (a, b), secs = _timed(run)
    scores = [f for f in a if f.endswith("scores.csv") or f in ("hosts.csv",)]
    differ = [f for f in a if a[f] != b.get(f)]
    ok = set(a) == set(b) and not differ and len(scores) == 5
    return ok, f"{len(a)} files compared, {len(differ)} differ, {secs:.1f} s"


# ------------------------------------------------------------------ pytest


@pytest.fixture
def report(request):
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert ok, line
    return emit


def test_criterion_01_ctmc_recovery(report):
    report(1, *criterion_1())


def test_criterion_02_ess_grid_oracle(report):
    report(2, *criterion_2())


def test_criterion_03_em_monotone(report):
    report(3, *criterion_3())


def test_criterion_04_amalgamation(report):
    report(4, *criterion_4())


def test_criterion_05_rbpf_consistency(report):
    report(5, *criterion_5())


def test_criterion_06_spike_closed_form(report):
    report(6, *criterion_6())


def test_criterion_07_nids_detection(report):
    report(7, *criterion_7())


def test_criterion_08_host_identification(report):
    report(8, *criterion_8())


def test_criterion_09_hids_detection(report):
    report(9, *criterion_9())


def test_criterion_10_reproducible_scores(report, tmp_path):
    report(10, *criterion_10(str(tmp_path)))


if __name__ == "__main__":
    import tempfile
    failed = 0
    checks = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
              criterion_7, criterion_8, criterion_9]
    for n, fn in enumerate(checks, 1):
        ok, detail = fn()
        failed += not ok
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    with tempfile.TemporaryDirectory() as d:
        ok, detail = criterion_10(d)
    failed += not ok
    print(f"criterion 10: {'PASS' if ok else 'FAIL'} ({detail})")
    sys.exit(1 if failed else 0)
