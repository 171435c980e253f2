"""Finite-state homogeneous Markov processes.

Rate matrices, exact sampling, complete-data likelihood and MLE, and the
scaled forward-backward machinery that turns interval evidence into
expected sufficient statistics for EM.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import _chain
from ._linalg import make_bank
from ._validation import check_positive, check_probability_vector, check_random_state
from .exceptions import InputError, NotConvergedWarning, ZeroEvidenceError

DEFAULT_PSEUDO = 1e-3


@dataclass(frozen=True, eq=False)
class IntensityMatrix:
    """An n x n transition-intensity matrix with zero row sums.

    The diagonal is recomputed from the off-diagonal entries on
    construction so the row sums are exactly zero in floating point up to a
    single summation.
    """

    rates: np.ndarray

    def __post_init__(self):
        q = np.array(self.rates, dtype=float, copy=True)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise InputError("intensity matrix must be square")
        if not np.all(np.isfinite(q)):
            raise InputError("intensity matrix has non-finite entries")
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            raise InputError("off-diagonal intensities must be nonnegative")
        rowsum = q.sum(axis=1)
        scale = np.maximum(1.0, np.abs(np.diag(q)))
        if np.any(np.abs(rowsum) > 1e-9 * scale):
            raise InputError("intensity matrix rows must sum to zero")
        np.fill_diagonal(q, -off.sum(axis=1))
        q.setflags(write=False)
        object.__setattr__(self, "rates", q)

    @classmethod
    def from_offdiagonal(cls, off):
        off = np.array(off, dtype=float)
        np.fill_diagonal(off, 0.0)
        np.fill_diagonal(off, -off.sum(axis=1))
        return cls(off)

    @classmethod
    def random(cls, n, seed=None, low=0.1, high=10.0):
        """Rates drawn log-uniformly from [low, high]."""
        rng = check_random_state(seed)
        off = np.exp(rng.uniform(np.log(low), np.log(high), size=(n, n)))
        return cls.from_offdiagonal(off)

    @property
    def n(self):
        return self.rates.shape[0]

    @property
    def exit_rates(self):
        """q_x, the total rate of leaving each state."""
        return -np.diag(self.rates).copy()

    @property
    def jump_probabilities(self):
        """theta[x, x'] = q_{xx'} / q_x; rows of absorbing states are zero."""
        q = self.exit_rates
        off = self.rates.copy()
        np.fill_diagonal(off, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            theta = np.where(q[:, None] > 0, off / q[:, None], 0.0)
        return theta

    def __eq__(self, other):
        return isinstance(other, IntensityMatrix) and np.array_equal(self.rates, other.rates)

    def __repr__(self):
        return f"IntensityMatrix({self.rates.tolist()})"


@dataclass(frozen=True)
class Trajectory:
    """Complete record of a single process over [start, horizon].

    ``states[d]`` is occupied from ``jump_times[d-1]`` (or ``start``) until
    ``jump_times[d]`` (or ``horizon``).
    """

    states: np.ndarray
    jump_times: np.ndarray
    horizon: float
    start: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.states, dtype=int)
        t = np.asarray(self.jump_times, dtype=float)
        if s.ndim != 1 or len(s) != len(t) + 1:
            raise InputError("need exactly one more state than jump time")
        if np.any(s[1:] == s[:-1]):
            raise InputError("consecutive states must differ")
        edges = np.concatenate([[self.start], t, [self.horizon]])
        if np.any(np.diff(edges) < 0):
            raise InputError("jump times must be ordered within [start, horizon]")
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "jump_times", t)

    @classmethod
    def from_transitions(cls, start_state, transitions, horizon, start=0.0):
        """Build from (x, dwell, x') triples; the last state dwells until horizon."""
        states = [start_state]
        times = []
        t = start
        for x, dwell, nxt in transitions:
            if x != states[-1]:
                raise InputError("transitions do not chain")
            t += dwell
            times.append(t)
            states.append(nxt)
        return cls(np.array(states), np.array(times), horizon, start)

    @property
    def dwells(self):
        edges = np.concatenate([[self.start], self.jump_times, [self.horizon]])
        return np.diff(edges)

    @property
    def transitions(self):
        d = self.dwells
        return [(int(self.states[i]), float(d[i]), int(self.states[i + 1]))
                for i in range(len(self.jump_times))]

    def state_at(self, t):
        return int(self.states[np.searchsorted(self.jump_times, t, side="right")])


@dataclass(frozen=True)
class Segment:
    states: tuple
    start: float
    duration: float = 0.0

    @property
    def end(self):
        return self.start + self.duration


@dataclass(frozen=True)
class EvidenceTrajectory:
    """Interval and point evidence over [0, horizon] for an n-state process.

    Time not covered by any segment is unobserved.  A segment with zero
    duration is point evidence.
    """

    n: int
    segments: tuple
    horizon: float

    def __post_init__(self):
        segs = []
        last_end = 0.0
        for seg in self.segments:
            if not isinstance(seg, Segment):
                seg = Segment(*seg)
            states = tuple(sorted(set(int(s) for s in seg.states)))
            if not states:
                raise InputError("evidence subsystems must be nonempty")
            if states[0] < 0 or states[-1] >= self.n:
                raise InputError("evidence names an unknown state")
            if seg.duration < 0 or seg.start < last_end - 1e-12:
                raise InputError("evidence segments must be ordered and non-overlapping")
            if seg.end > self.horizon + 1e-9:
                raise InputError("evidence extends past the horizon")
            segs.append(Segment(states, float(seg.start), float(seg.duration)))
            last_end = seg.end
        object.__setattr__(self, "segments", tuple(segs))

    @classmethod
    def from_trajectory(cls, traj, n):
        """Fully observed evidence equivalent to a complete trajectory."""
        d = traj.dwells
        edges = np.concatenate([[traj.start], traj.jump_times])
        segs = [Segment((int(x),), float(t), float(dt))
                for x, t, dt in zip(traj.states, edges, d)]
        return cls(n, tuple(segs), traj.horizon)

    @classmethod
    def point_observations(cls, n, times, states, horizon):
        segs = [Segment((int(s),), float(t), 0.0) for t, s in zip(times, states)]
        return cls(n, tuple(segs), horizon)

    @property
    def breakpoints(self):
        pts = {0.0, float(self.horizon)}
        for seg in self.segments:
            pts.add(seg.start)
            pts.add(seg.end)
        return np.array(sorted(pts))


@dataclass
class SufficientStatistics:
    """Dwell totals T[x] and transition counts M[x, x'] (possibly expected)."""

    T: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.M = np.asarray(self.M, dtype=float)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros((n, n)))

    @property
    def n(self):
        return self.T.shape[0]

    @property
    def M_out(self):
        """M[x] = sum over x' of M[x, x']."""
        return self.M.sum(axis=1)

    def __add__(self, other):
        return SufficientStatistics(self.T + other.T, self.M + other.M)


@dataclass
class MessagePass:
    """Stored forward/backward messages for one evidence trajectory."""

    Q: IntensityMatrix
    log_evidence: float
    log_evidence_backward: float
    starts: np.ndarray
    ends: np.ndarray
    chain: object = field(repr=False)
    passes: object = field(repr=False)

    @property
    def alphas(self):
        """Normalised forward vectors at each breakpoint (after evidence there)."""
        return [a[0] for a in self.passes.a_pre[1:]] + [self.passes.a_end[0]]

    @property
    def betas(self):
        """Normalised backward vectors at each step end (including evidence there)."""
        return [b[0] for b in self.passes.b_mid]


# ---------------------------------------------------------------- basic ops


def transition_probabilities(Q, t):
    """exp(Q t) with round-off clamped so each row is a distribution."""
    t = check_positive(t, "t", strict=False)
    rates = Q.rates if isinstance(Q, IntensityMatrix) else np.asarray(Q, dtype=float)
    if not np.all(np.isfinite(rates)):
        raise InputError("intensity matrix has non-finite entries")
    P = np.maximum(expm(rates * t), 0.0)
    P = np.minimum(P, 1.0)
    return P / P.sum(axis=1, keepdims=True)


def sample_trajectory(Q, p0, horizon, seed=None):
    """Exact simulation: exponential dwells, successors from the jump chain."""
    horizon = check_positive(horizon, "horizon")
    p0 = check_probability_vector(p0, Q.n, "initial distribution")
    rng = check_random_state(seed)
    q = Q.exit_rates
    theta = Q.jump_probabilities
    x = int(rng.choice(Q.n, p=p0))
    states, times = [x], []
    t = 0.0
    while True:
        if q[x] <= 0:
            break
        t += rng.exponential(1.0 / q[x])
        if t >= horizon:
            break
        x = int(rng.choice(Q.n, p=theta[x]))
        states.append(x)
        times.append(t)
    return Trajectory(np.array(states), np.array(times), float(horizon))


def suff_stats_complete(data, n):
    ss = SufficientStatistics.zeros(n)
    for traj in data:
        np.add.at(ss.T, traj.states, traj.dwells)
        np.add.at(ss.M, (traj.states[:-1], traj.states[1:]), 1.0)
    return ss


def loglik_complete(Q, ss):
    """Complete-data log-likelihood; -inf when a counted transition has zero rate."""
    off = Q.rates.copy()
    np.fill_diagonal(off, 0.0)
    M = ss.M.copy()
    np.fill_diagonal(M, 0.0)
    if np.any((M > 0) & (off <= 0)):
        return -np.inf
    used = M > 0
    ll = float(np.sum(M[used] * np.log(off[used])))
    return ll - float(np.dot(Q.exit_rates, ss.T))


def mle_complete(ss, pseudo=DEFAULT_PSEUDO):
    """Rates from (possibly expected) statistics.

    ``pseudo`` adds a total of ``pseudo`` transitions per state, spread
    evenly over its successors, and ``pseudo`` time units per state.
    """
    n = ss.n
    M = ss.M.copy()
    np.fill_diagonal(M, 0.0)
    if n > 1:
        M += pseudo / (n - 1) * (1.0 - np.eye(n))
    T = ss.T + pseudo
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(T[:, None] > 0, M / T[:, None], 0.0)
    return IntensityMatrix.from_offdiagonal(off)


def log_prior(Q, pseudo=DEFAULT_PSEUDO):
    """Log-density of the pseudo-count prior that ``mle_complete`` maximises."""
    n = Q.n
    if n < 2 or pseudo == 0:
        return 0.0
    off = Q.rates[~np.eye(n, dtype=bool)]
    with np.errstate(divide="ignore"):
        return float(pseudo / (n - 1) * np.sum(np.log(off)) - pseudo * Q.exit_rates.sum())


# ----------------------------------------------------- evidence -> chain


def _subgenerator(rates, states):
    n = rates.shape[0]
    keep = np.zeros(n, dtype=bool)
    keep[list(states)] = True
    A = rates * np.outer(keep, keep)
    return A


def _build_chain(Q, ev, p0):
    n = Q.n
    rates = Q.rates
    full = tuple(range(n))
    gens = {}

    def gen(states):
        if states not in gens:
            gens[states] = len(gens)
        return gens[states]

    h, u, ops, starts, ends, jumps = [], [], [], [], [], []
    alpha0 = np.ones(n) / n if p0 is None else check_probability_vector(p0, n).copy()
    t = 0.0
    prev = None  # subsystem in force just before t, None when unobserved
    segs = list(ev.segments)
    if segs and segs[0].start <= 0.0:
        mask = np.zeros(n)
        mask[list(segs[0].states)] = 1.0
        alpha0 = alpha0 * mask
        if alpha0.sum() <= 0:
            raise ZeroEvidenceError("initial distribution excludes the first observation")
        prev = segs[0].states

    def step(dur, states, step_ops):
        h.append(dur)
        u.append(gen(states))
        ops.append(step_ops)
        starts.append(t)
        ends.append(t + dur)

    for i, seg in enumerate(segs):
        if seg.start > t:
            step(seg.start - t, full, [])
            t = seg.start
            prev = None
        if i == 0 and seg.start <= 0.0:
            boundary = []
        elif prev is not None and not set(prev) & set(seg.states):
            B = np.zeros((n, n))
            ii = np.array(prev)[:, None]
            jj = np.array(seg.states)[None, :]
            B[ii, jj] = rates[ii, jj]
            op = _chain.MatrixOp(B, record=True)
            jumps.append(op)
            boundary = [op]
        elif prev is not None and set(seg.states) >= set(prev):
            boundary = []
        else:
            keep = np.zeros(n)
            keep[list(seg.states)] = 1.0
            boundary = [_chain.MatrixOp(np.diag(keep))]
        if boundary:
            if ops:
                ops[-1].extend(boundary)
            else:
                step(0.0, full, boundary)
        if seg.duration > 0:
            step(seg.duration, seg.states, [])
            t = seg.end
        prev = seg.states
    if ev.horizon > t:
        step(ev.horizon - t, full, [])
        t = ev.horizon
    if not h:
        step(0.0, full, [])
    order = sorted(gens, key=gens.get)
    bank = make_bank(np.stack([_subgenerator(rates, s) for s in order]))
    chain = _chain.Chain(bank, np.array(h, dtype=float), np.array([u]), ops, alpha0[None, :])
    return chain, np.array(starts), np.array(ends), jumps


def message_pass(Q, ev, p0=None):
    """Scaled alpha-beta recursions over interval evidence.

    The initial distribution ``p0`` (uniform by default) is conditioned on
    the observation at time 0, so the reported log-evidence is that of the
    trajectory given its first observation.  Zero-probability evidence
    yields ``-inf`` rather than an exception.
    """
    if ev.n != Q.n:
        raise InputError("evidence and intensity matrix disagree on state count")
    chain, starts, ends, _ = _build_chain(Q, ev, p0)
    fwd = _chain.forward(chain)
    _chain.backward(chain, fwd, accumulate=False, store=True)
    return MessagePass(Q, float(fwd.log_z[0]), float(fwd.log_z_backward[0]),
                       starts, ends, chain, fwd)


def _estep_one(Q, ev, p0=None):
    chain, _, _, jumps = _build_chain(Q, ev, p0)
    fwd = _chain.forward(chain)
    log_z = float(fwd.log_z[0])
    if not np.isfinite(log_z):
        return None, log_z
    _chain.backward(chain, fwd, accumulate=True)
    C = chain.bank.integrals()
    mats = chain.bank.mats
    n = Q.n
    T = np.einsum("uii->i", C)
    off = mats.copy()
    off[:, np.arange(n), np.arange(n)] = 0.0
    M = np.einsum("uij,uij->ij", off, C)
    for op in jumps:
        if op.acc is not None:
            M += op.acc
    np.fill_diagonal(M, 0.0)
    return SufficientStatistics(np.maximum(T, 0.0), np.maximum(M, 0.0)), log_z


def expected_suff_stats(Q, ev, p0=None):
    """Posterior expected dwell times and transition counts given evidence."""
    ss, log_z = _estep_one(Q, ev, p0)
    if ss is None:
        raise ZeroEvidenceError("evidence has zero probability under the model")
    return ss


def smoothed_marginal(mp, t):
    """P(X_t = x | all evidence) from a stored message pass."""
    ends, starts = mp.ends, mp.starts
    if t < 0 or t > ends[-1] + 1e-12:
        raise InputError("query time outside the evidence horizon")
    k = int(min(np.searchsorted(ends, t, side="left"), len(ends) - 1))
    ch, fp = mp.chain, mp.passes
    u = ch.u[0, k]
    if t >= ends[k]:
        a = fp.a_mid[k][0]
        b = fp.b_mid[k][0]
    else:
        a = fp.a_pre[k][0] @ ch.bank.expm(u, t - starts[k])
        b = ch.bank.expm(u, ends[k] - t) @ fp.b_mid[k][0]
    p = np.maximum(a * b, 0.0)
    s = p.sum()
    if s <= 0:
        raise ZeroEvidenceError("evidence has zero probability under the model")
    return p / s


# ----------------------------------------------------------------------- EM


@dataclass
class EMConfig:
    max_iter: int = 100
    tol: float = 1e-6
    pseudo: float = DEFAULT_PSEUDO


@dataclass
class EMResult:
    Q: IntensityMatrix
    log_likelihoods: list
    converged: bool
    n_iter: int

    def __iter__(self):
        return iter((self.Q, self.log_likelihoods))


def em_fit(ev_set, init, cfg=None, p0=None):
    """Expectation-maximisation for a partially observed Markov process.

    The tracked objective is the log-evidence plus the log of the
    pseudo-count prior, which is exactly what the regularised M step
    maximises, so the sequence is non-decreasing.
    """
    cfg = cfg or EMConfig()
    ev_set = list(ev_set)
    Q = init
    history = []
    for it in range(cfg.max_iter + 1):
        total = SufficientStatistics.zeros(Q.n)
        ll = 0.0
        for ev in ev_set:
            ss, lz = _estep_one(Q, ev, p0)
            if ss is None:
                raise ZeroEvidenceError("evidence has zero probability under the model")
            total = total + ss
            ll += lz
        history.append(ll + log_prior(Q, cfg.pseudo))
        if it > 0:
            prev, cur = history[-2], history[-1]
            if np.isfinite(prev) and cur - prev <= cfg.tol * abs(prev):
                return EMResult(Q, history, True, it)
        if it == cfg.max_iter:
            break
        Q = mle_complete(total, cfg.pseudo)
    warnings.warn(f"EM stopped after {cfg.max_iter} iterations", NotConvergedWarning)
    return EMResult(Q, history, False, cfg.max_iter)
