"""Host-based detection from system-call traces.

A single hidden variable H (m states) drives one toggle per system call.
Calls are recorded by a clock of finite resolution, so each clock tick
carries an ordered batch ("spike") of calls whose exact times are unknown.
A spike is integrated exactly with a block-bidiagonal generator over one
resolution unit; gaps between ticks are event-free ("quiet") periods.
"""
from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.sparse import bmat, diags
from scipy.sparse.linalg import expm_multiply

from . import _chain, ctmc
from ._linalg import make_bank, van_loan_integral
from ._validation import check_positive, check_positive_int, check_random_state
from .ctmc import DEFAULT_PSEUDO, IntensityMatrix
from .exceptions import InputError, NotConvergedWarning, ZeroEvidenceError

logger = logging.getLogger(__name__)

DEFAULT_VOCABULARY = ("close", "ioctl", "mmap", "open", "fcntl", "stat", "access",
                      "execve", "chdir", "chroot", "unlink", "chown", "mkdir", "chmod")
OTHER = "OTHER"
DEFAULT_RESOLUTION = 0.01
# spikes longer than this are propagated with a sparse Krylov product
DENSE_SPIKE_LIMIT = 200


# ------------------------------------------------------------------- types


@dataclass(eq=False)
class SyscallModel:
    """Hidden H with intensity matrix ``q_h`` and per-call rates ``rates[s, h]``."""

    vocabulary: tuple
    q_h: np.ndarray
    rates: np.ndarray

    def __post_init__(self):
        self.vocabulary = tuple(str(v) for v in self.vocabulary)
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise InputError("duplicate call name in vocabulary")
        self.q_h = IntensityMatrix(self.q_h).rates
        self.rates = np.asarray(self.rates, dtype=float)
        if self.rates.shape != (len(self.vocabulary), self.n_hidden):
            raise InputError("rates must have shape (vocabulary size, m)")
        if not np.all(np.isfinite(self.rates)) or np.any(self.rates < 0):
            raise InputError("call rates must be finite and nonnegative")
        self._index = {s: i for i, s in enumerate(self.vocabulary)}

    @property
    def n_hidden(self):
        return self.q_h.shape[0]

    @property
    def q_hat(self):
        """H generator given that no call occurs."""
        return self.q_h - np.diag(self.rates.sum(axis=0))

    def encode(self, calls):
        """Map call names to vocabulary indices; unknown names go to OTHER."""
        other = self._index.get(OTHER)
        out = []
        for c in calls:
            i = self._index.get(c, other)
            if i is None:
                raise InputError(f"call {c!r} is not in the vocabulary and there is no {OTHER}")
            out.append(i)
        return tuple(out)

    def __eq__(self, other):
        return (isinstance(other, SyscallModel) and self.vocabulary == other.vocabulary
                and np.array_equal(self.q_h, other.q_h) and np.array_equal(self.rates, other.rates))

    def copy(self):
        return SyscallModel(self.vocabulary, self.q_h.copy(), self.rates.copy())

    # ------------------------------------------------ CTBN conversion
    def to_ctbn(self):
        from .ctbn import Cim, CtbnModel

        m = self.n_hidden
        sizes = {"H": m}
        cims = {"H": Cim("H", (), (), self.q_h)}
        for s, name in enumerate(self.vocabulary):
            var = f"call_{name}"
            sizes[var] = 2
            cims[var] = Cim(var, ("H",), (m,),
                            np.array([[[-x, x], [x, -x]] for x in self.rates[s]]), toggle=True)
        return CtbnModel(sizes, cims)

    def meta(self):
        return {"kind": "syscall"}

    @classmethod
    def from_ctbn(cls, model, meta):
        vocab = tuple(n[len("call_"):] for n in model.names if n.startswith("call_"))
        rates = np.array([model.cims[f"call_{v}"].matrices[:, 0, 1] for v in vocab])
        return cls(vocab, model.cims["H"].matrices[0], rates)


def build_syscall_model(vocabulary=DEFAULT_VOCABULARY + (OTHER,), m=2, seed=None,
                        h_range=(0.1, 2.0), rate_range=(0.5, 20.0)):
    """Random model with log-uniform rates."""
    m = check_positive_int(m, "m")
    rng = check_random_state(seed)

    def loguni(lo, hi, size):
        return np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))

    q_h = IntensityMatrix.from_offdiagonal(loguni(*h_range, (m, m))).rates if m > 1 else np.zeros((1, 1))
    return SyscallModel(vocabulary, q_h, loguni(*rate_range, (len(vocabulary), m)))


@dataclass(frozen=True, eq=False)
class ProcessTrace:
    """Calls of one process grouped by clock tick.

    ``calls[i]`` is the ordered tuple of call names observed at tick
    ``ticks[i]``; consecutive ticks are at least one ``resolution`` apart.
    """

    process_id: str
    ticks: np.ndarray
    calls: tuple
    resolution: float = DEFAULT_RESOLUTION
    label: str = "unknown"

    def __post_init__(self):
        t = np.asarray(self.ticks, dtype=float).reshape(-1)
        calls = tuple(tuple(str(c) for c in batch) for batch in self.calls)
        if len(t) != len(calls):
            raise InputError("ticks and calls must have equal length")
        res = check_positive(self.resolution, "resolution")
        if np.any(np.diff(t) < res * (1 - 1e-9)):
            raise InputError(f"process {self.process_id}: ticks must be at least {res} apart")
        t.setflags(write=False)
        object.__setattr__(self, "ticks", t)
        object.__setattr__(self, "calls", calls)
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "process_id", str(self.process_id))

    def __eq__(self, other):
        return (isinstance(other, ProcessTrace) and self.process_id == other.process_id
                and np.array_equal(self.ticks, other.ticks) and self.calls == other.calls
                and self.resolution == other.resolution and self.label == other.label)

    @property
    def n_calls(self):
        return sum(len(b) for b in self.calls)

    @property
    def horizon(self):
        if not len(self.ticks):
            return 0.0
        return float(self.ticks[-1] - self.ticks[0] + self.resolution)

    def sequence(self):
        """Flat call sequence in recorded order."""
        return [c for batch in self.calls for c in batch]

    def gaps(self):
        """Quiet duration preceding each tick (zero for the first)."""
        if not len(self.ticks):
            return np.zeros(0)
        return np.concatenate([[0.0], np.maximum(np.diff(self.ticks) - self.resolution, 0.0)])


# ----------------------------------------------------------------- spikes


@dataclass
class SpikeGenerator:
    """Block generator of an ordered call batch; ``matrix`` is m(k+1) square."""

    matrix: np.ndarray
    m: int
    calls: tuple

    @property
    def k(self):
        return len(self.calls)


def build_spike_generator(model, calls):
    """Q_X with the no-call generator on the diagonal blocks and the rate of
    the i-th call on the i-th superdiagonal block."""
    idx = calls if all(isinstance(c, (int, np.integer)) for c in calls) else model.encode(calls)
    idx = tuple(int(i) for i in idx)
    if any(i < 0 or i >= len(model.vocabulary) for i in idx):
        raise InputError("call index out of range")
    m, k = model.n_hidden, len(idx)
    Q = np.zeros((m * (k + 1), m * (k + 1)))
    qh = model.q_hat
    for b in range(k + 1):
        Q[b * m:(b + 1) * m, b * m:(b + 1) * m] = qh
    for i, s in enumerate(idx):
        Q[i * m:(i + 1) * m, (i + 1) * m:(i + 2) * m] = np.diag(model.rates[s])
    return SpikeGenerator(Q, m, idx)


def _sparse_spike(model, idx):
    m, k = model.n_hidden, len(idx)
    qh = model.q_hat
    blocks = [[None] * (k + 1) for _ in range(k + 1)]
    for b in range(k + 1):
        blocks[b][b] = qh
        if b < k:
            blocks[b][b + 1] = diags(model.rates[idx[b]])
    return bmat(blocks, format="csr")


def spike_forward(alpha_in, gen, resolution):
    """Unnormalised H distribution after the spike: first block in, last block out."""
    alpha_in = np.asarray(alpha_in, dtype=float)
    m = gen.m
    if gen.k > DENSE_SPIKE_LIMIT:
        a = np.zeros(gen.matrix.shape[0])
        a[:m] = alpha_in
        return np.maximum(expm_multiply(gen.matrix.T * resolution, a)[-m:], 0.0)
    return np.maximum(alpha_in @ expm(gen.matrix * resolution)[:m, -m:], 0.0)


def quiet_forward(alpha_in, model, duration):
    duration = check_positive(duration, "duration", strict=False)
    return np.asarray(alpha_in, dtype=float) @ expm(model.q_hat * duration)


class _SpikeOp:
    """Chain operator for one distinct call batch.

    Forward/backward use the m x m corner of exp(Q_X * resolution); the
    posterior-weighted outer products of incoming and outgoing messages are
    summed so the Van Loan integral is needed only once per distinct batch.
    """

    def __init__(self, model, idx, resolution):
        self.idx = idx
        self.resolution = resolution
        m = model.n_hidden
        if len(idx) > DENSE_SPIKE_LIMIT:
            Qs = _sparse_spike(model, idx)
            E = np.zeros((Qs.shape[0], m))
            E[:m] = np.eye(m)
            self.B = np.maximum(expm_multiply(Qs.T * resolution, E)[-m:].T, 0.0)
        else:
            self.B = np.maximum(expm(build_spike_generator(model, idx).matrix * resolution)[:m, -m:],
                                0.0)
        self.acc = np.zeros((m, m))

    def forward(self, alpha):
        return alpha @ self.B

    def backward(self, beta):
        return beta @ self.B.T

    def accumulate(self, alpha, beta, c):
        self.acc += np.einsum("p,pi,pj->ij", c, alpha, beta)


@dataclass
class SyscallStats:
    """Expected statistics: dwell ``T`` (m,), H transitions ``M`` (m, m) and
    call counts ``calls`` (N, m) attributed to each hidden state."""

    T: np.ndarray
    M: np.ndarray
    calls: np.ndarray
    log_likelihood: float = 0.0

    def __add__(self, other):
        return SyscallStats(self.T + other.T, self.M + other.M, self.calls + other.calls,
                            self.log_likelihood + other.log_likelihood)

    @classmethod
    def zeros(cls, model):
        m = model.n_hidden
        return cls(np.zeros(m), np.zeros((m, m)), np.zeros((len(model.vocabulary), m)))


class _Engine:
    """Per-model caches shared across processes."""

    def __init__(self, model, resolution):
        self.model = model
        self.resolution = resolution
        self.bank = make_bank(model.q_hat[None])
        self.ops = {}

    def op(self, idx):
        if idx not in self.ops:
            self.ops[idx] = _SpikeOp(self.model, idx, self.resolution)
        return self.ops[idx]

    def chain(self, trace):
        m = self.model.n_hidden
        ops = [[self.op(self.model.encode(batch))] for batch in trace.calls]
        h = trace.gaps()
        u = np.zeros((1, len(h)), dtype=int)
        return _chain.bound_steps(_chain.Chain(self.bank, h, u, ops, np.full((1, m), 1.0 / m)))

    def spike_stats(self):
        model, m = self.model, self.model.n_hidden
        stats = SyscallStats.zeros(model)
        for idx, op in self.ops.items():
            if not np.any(op.acc):
                continue
            gen = build_spike_generator(model, idx)
            k = len(idx)
            G = np.zeros_like(gen.matrix)
            G[:m, -m:] = op.acc
            C = van_loan_integral(gen.matrix, G, self.resolution)
            blocks = C.reshape(k + 1, m, k + 1, m)
            diag_blocks = blocks[np.arange(k + 1), :, np.arange(k + 1), :]  # (k+1, m, m)
            stats.T += np.maximum(np.einsum("bii->i", diag_blocks), 0.0)
            off = model.q_h - np.diag(np.diag(model.q_h))
            stats.M += np.maximum(off * diag_blocks.sum(axis=0), 0.0)
            for i, s in enumerate(idx):
                stats.calls[s] += np.maximum(model.rates[s] * np.diag(blocks[i, :, i + 1, :]), 0.0)
        return stats


def _resolution_of(traces):
    res = {t.resolution for t in traces}
    if len(res) > 1:
        raise InputError("all traces in one call must share a clock resolution")
    return res.pop() if res else DEFAULT_RESOLUTION


def process_loglik(model, trace, per_event=False, _engine=None):
    """log P(trace) starting from a uniform H; ``-inf`` for impossible traces."""
    if not len(trace.ticks):
        raise InputError("empty process trace")
    eng = _engine or _Engine(model, trace.resolution)
    ll = float(_chain.forward(eng.chain(trace), store=False).log_z[0])
    if per_event:
        return ll / max(trace.n_calls, 1)
    return ll


@dataclass
class ProcessScore:
    process_id: str
    n_calls: int
    log_likelihood: float
    per_event_log_likelihood: float
    label: str = "unknown"


def score_processes(model, traces):
    """Raw and per-call log-likelihood of every process."""
    traces = list(traces)
    eng = _Engine(model, _resolution_of(traces))
    out = []
    for tr in traces:
        ll = process_loglik(model, tr, _engine=eng)
        out.append(ProcessScore(tr.process_id, tr.n_calls, ll, ll / max(tr.n_calls, 1), tr.label))
    return out


def hids_estep(model, traces):
    """Exact expected statistics summed over processes."""
    traces = [t for t in traces if len(t.ticks)]
    eng = _Engine(model, _resolution_of(traces))
    ll = 0.0
    for tr in traces:
        ch = eng.chain(tr)
        fwd = _chain.forward(ch)
        if not np.isfinite(fwd.log_z[0]):
            raise ZeroEvidenceError(f"process {tr.process_id} is impossible under the model")
        _chain.backward(ch, fwd)
        ll += float(fwd.log_z[0])
    stats = eng.spike_stats()
    C = eng.bank.integrals()[0]
    stats.T += np.maximum(np.diag(C), 0.0)
    off = model.q_h - np.diag(np.diag(model.q_h))
    stats.M += np.maximum(off * C, 0.0)
    stats.log_likelihood = ll
    return stats


def hids_mstep(stats, model, pseudo=DEFAULT_PSEUDO):
    m = model.n_hidden
    if m > 1:
        q_h = ctmc.mle_complete(ctmc.SufficientStatistics(stats.T, stats.M), pseudo).rates
    else:
        q_h = np.zeros((1, 1))
    rates = (stats.calls + pseudo) / (stats.T[None, :] + pseudo)
    return SyscallModel(model.vocabulary, q_h, rates)


def hids_log_prior(model, pseudo=DEFAULT_PSEUDO):
    """Log-density of the regulariser the M step maximises against."""
    lp = ctmc.log_prior(IntensityMatrix(model.q_h), pseudo) if model.n_hidden > 1 else 0.0
    r = model.rates
    with np.errstate(divide="ignore"):
        return float(lp + np.sum(pseudo * np.log(r) - pseudo * r))


@dataclass
class HidsEMConfig:
    max_iter: int = 50
    tol: float = 1e-6
    pseudo: float = DEFAULT_PSEUDO


@dataclass
class HidsEMResult:
    model: SyscallModel
    log_likelihoods: list = field(default_factory=list)
    objectives: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iter(self):
        """Number of M steps taken."""
        return len(self.log_likelihoods) - (1 if self.converged else 0)


def hids_em(model, traces, cfg=None):
    """EM with the exact E step.

    ``objectives`` (log-likelihood plus the regulariser's log-density) never
    decrease; ``log_likelihoods`` are the plain data log-likelihoods.
    """
    cfg = cfg or HidsEMConfig()
    traces = list(traces)
    res = HidsEMResult(model)
    for it in range(cfg.max_iter):
        stats = hids_estep(model, traces)
        obj = stats.log_likelihood + hids_log_prior(model, cfg.pseudo)
        res.log_likelihoods.append(stats.log_likelihood)
        res.objectives.append(obj)
        logger.info("hids-em iteration %d: log-likelihood %.6f", it, stats.log_likelihood)
        if len(res.objectives) > 1 and abs(obj - res.objectives[-2]) <= cfg.tol * max(1.0, abs(obj)):
            res.converged = True
            break
        model = hids_mstep(stats, model, cfg.pseudo)
        res.model = model
    if not res.converged:
        warnings.warn(f"hids_em stopped after {cfg.max_iter} iterations", NotConvergedWarning,
                      stacklevel=2)
    return res


# --------------------------------------------------------------- baseline


def _windows(seq, k):
    return [tuple(seq[i:i + k]) for i in range(len(seq) - k + 1)]


class StideDatabase:
    """Set of every length-``k`` call window seen in normal traces."""

    def __init__(self, traces, k=5):
        self.k = check_positive_int(k, "k")
        self.windows = set()
        for tr in traces:
            self.windows.update(_windows(tr.sequence(), self.k))

    def mismatches(self, trace):
        return np.array([w not in self.windows for w in _windows(trace.sequence(), self.k)],
                        dtype=int)

    def score(self, trace, h=50):
        h = check_positive_int(h, "h")
        if h < self.k:
            raise InputError("locality frame h must be at least k")
        mis = self.mismatches(trace)
        if not len(mis):
            warnings.warn(f"process {trace.process_id} is shorter than k={self.k}", stacklevel=2)
            return 0
        if len(mis) <= h:
            return int(mis.sum())
        c = np.concatenate([[0], np.cumsum(mis)])
        return int((c[h:] - c[:-h]).max())


def stide_baseline(train, test, k=5, h=50):
    """Maximum number of unseen k-windows within any locality frame of ``h`` windows."""
    return StideDatabase(train, k).score(test, h)


def call_counts(traces):
    return Counter(c for tr in traces for c in tr.sequence())

