"""Network-traffic anomaly detection with a hierarchical CTBN.

A global hidden process G drives one hidden process H per port; each H
drives four toggle variables whose "transitions" are the observed packet
and connection events.  Parameters are learned by EM whose E step is a
Rao-Blackwellised particle filter: G trajectories are sampled from their
prior, and every port submodel is marginalised exactly given each sample.
Fixed windows of traffic are then scored by their log-likelihood given the
filtered history.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _chain, ctbn, ctmc
from ._linalg import make_bank
from ._validation import check_positive, check_positive_int, check_random_state
from .ctbn import Cim, CtbnModel
from .ctmc import DEFAULT_PSEUDO, IntensityMatrix
from .exceptions import InputError, ParticleDegeneracyError

logger = logging.getLogger(__name__)

KINDS = ("PKT_IN", "PKT_OUT", "CONN_OPEN", "CONN_CLOSE")
PKT_IN, PKT_OUT, CONN_OPEN, CONN_CLOSE = range(4)
OTHER_PORT = -1


# ------------------------------------------------------------------ traces


@dataclass(frozen=True, eq=False)
class TrafficTrace:
    """Time-ordered packet/connection events of a single host.

    ``kinds`` index into :data:`KINDS`.  The trace covers ``[start, end)``.
    Unless ``require_balanced`` is false, no port may close more
    connections than it has opened at any point of the trace; slices and
    externally captured traces that begin mid-connection opt out.
    """

    times: np.ndarray
    ports: np.ndarray
    kinds: np.ndarray
    start: float = 0.0
    end: float | None = None
    require_balanced: bool = field(default=True, compare=False)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).reshape(-1)
        p = np.asarray(self.ports, dtype=int).reshape(-1)
        k = np.asarray(self.kinds, dtype=int).reshape(-1)
        if not (len(t) == len(p) == len(k)):
            raise InputError("times, ports and kinds must have equal length")
        if np.any(np.diff(t) < 0):
            raise InputError("event timestamps must be non-decreasing")
        if np.any((k < 0) | (k >= len(KINDS))):
            raise InputError("unknown event kind")
        end = self.end
        if end is None:
            end = float(t[-1]) if len(t) else float(self.start)
        if len(t) and (t[0] < self.start or t[-1] > end):
            raise InputError("events fall outside [start, end]")
        for name, arr in (("times", t), ("ports", p), ("kinds", k)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.require_balanced and not self.is_balanced():
            raise InputError("a port closes more connections than it opened")
        object.__setattr__(self, "start", float(self.start))
        object.__setattr__(self, "end", float(end))

    def __len__(self):
        return len(self.times)

    @property
    def horizon(self):
        return self.end - self.start

    def __eq__(self, other):
        return (isinstance(other, TrafficTrace) and self.start == other.start
                and self.end == other.end and np.array_equal(self.times, other.times)
                and np.array_equal(self.ports, other.ports)
                and np.array_equal(self.kinds, other.kinds))

    def slice(self, t0, t1):
        sel = (self.times >= t0) & (self.times < t1)
        return TrafficTrace(self.times[sel], self.ports[sel], self.kinds[sel], t0, t1,
                            require_balanced=False)

    def port_counts(self):
        ports, counts = np.unique(self.ports, return_counts=True)
        return dict(zip(ports.tolist(), counts.tolist()))

    def top_ports(self, k):
        """The ``k`` most frequent ports, ties broken by port number."""
        counts = self.port_counts()
        return sorted(counts, key=lambda p: (-counts[p], p))[:k]

    def is_balanced(self):
        """True when no port ever closes more connections than it opened."""
        for port in np.unique(self.ports):
            k = self.kinds[self.ports == port]
            level = np.cumsum((k == CONN_OPEN).astype(int) - (k == CONN_CLOSE).astype(int))
            if len(level) and level.min() < 0:
                return False
        return True

    @classmethod
    def concatenate(cls, traces, start=None, end=None, require_balanced=False):
        t = np.concatenate([tr.times for tr in traces])
        p = np.concatenate([tr.ports for tr in traces])
        k = np.concatenate([tr.kinds for tr in traces])
        order = np.argsort(t, kind="stable")
        start = min(tr.start for tr in traces) if start is None else start
        end = max(tr.end for tr in traces) if end is None else end
        return cls(t[order], p[order], k[order], start, end, require_balanced)


# ------------------------------------------------------------------- model


def toggle_states(n_hidden):
    """Active hidden states of each toggle: {2j, 2j+1} modulo ``n_hidden``."""
    j = np.arange(len(KINDS))
    return np.stack([(2 * j) % n_hidden, (2 * j + 1) % n_hidden], axis=1)


def active_mask(n_hidden):
    mask = np.zeros((len(KINDS), n_hidden), dtype=bool)
    for j, pair in enumerate(toggle_states(n_hidden)):
        mask[j, pair] = True
    return mask


def _port_name(port):
    return "other" if port == OTHER_PORT else str(port)


def _parse_port(name):
    return OTHER_PORT if name == "other" else int(name)


@dataclass(eq=False)
class TrafficModel:
    """Global G, per-port H conditioned on G, four tied toggles per port.

    Attributes
    ----------
    ports : tuple of int
        Port of each submodel; :data:`OTHER_PORT` collects unlisted ports.
    g_rates : ndarray (nG, nG)
    h_rates : ndarray (n_ports, nG, nH, nH)
        Intensity matrix of each H given each value of G.
    toggle_rates : ndarray (n_ports, 4)
        Event rate of each toggle while H is in one of its active states.
    """

    ports: tuple
    g_rates: np.ndarray
    h_rates: np.ndarray
    toggle_rates: np.ndarray

    def __post_init__(self):
        self.ports = tuple(int(p) for p in self.ports)
        self.g_rates = IntensityMatrix(self.g_rates).rates
        h = np.asarray(self.h_rates, dtype=float)
        if h.ndim != 4 or h.shape[0] != len(self.ports) or h.shape[1] != self.g_rates.shape[0]:
            raise InputError("h_rates must have shape (n_ports, nG, nH, nH)")
        self.h_rates = np.stack([[IntensityMatrix(m).rates for m in per_g] for per_g in h])
        self.toggle_rates = np.asarray(self.toggle_rates, dtype=float)
        if self.toggle_rates.shape != (len(self.ports), len(KINDS)):
            raise InputError("toggle_rates must have shape (n_ports, 4)")
        if np.any(self.toggle_rates < 0) or not np.all(np.isfinite(self.toggle_rates)):
            raise InputError("toggle rates must be finite and nonnegative")
        if self.n_hidden % 2 and self.n_hidden != 1:
            raise InputError("the hidden port variable needs an even number of states")
        if len(set(self.ports)) != len(self.ports):
            raise InputError("duplicate port in model")

    @property
    def n_global(self):
        return self.g_rates.shape[0]

    @property
    def n_hidden(self):
        return self.h_rates.shape[2]

    @property
    def n_variables(self):
        return 1 + len(self.ports) * (1 + len(KINDS))

    def event_rates(self, j):
        """(4, nH) rate of each toggle in each hidden state of port ``j``."""
        return self.toggle_rates[j][:, None] * active_mask(self.n_hidden)

    def subgenerators(self, j):
        """H generators of port ``j`` conditioned on observing no event, per G value."""
        leak = self.event_rates(j).sum(axis=0)
        return self.h_rates[j] - np.diag(leak)[None]

    def port_index(self, port):
        if port in self.ports:
            return self.ports.index(port)
        if OTHER_PORT in self.ports:
            return self.ports.index(OTHER_PORT)
        return None

    def copy(self):
        return TrafficModel(self.ports, self.g_rates.copy(), self.h_rates.copy(),
                            self.toggle_rates.copy())

    def __eq__(self, other):
        return (isinstance(other, TrafficModel) and self.ports == other.ports
                and np.array_equal(self.g_rates, other.g_rates)
                and np.array_equal(self.h_rates, other.h_rates)
                and np.array_equal(self.toggle_rates, other.toggle_rates))

    # --------------------------------------------------- CTBN conversion
    def to_ctbn(self):
        """Equivalent generic CTBN; toggles become 2-state toggle variables."""
        nG, nH = self.n_global, self.n_hidden
        sizes = {"G": nG}
        cims = {"G": Cim("G", (), (), self.g_rates)}
        for j, port in enumerate(self.ports):
            h = f"H_{_port_name(port)}"
            sizes[h] = nH
            cims[h] = Cim(h, ("G",), (nG,), self.h_rates[j])
            for k, kind in enumerate(KINDS):
                name = f"{kind}_{_port_name(port)}"
                rates = self.event_rates(j)[k]
                mats = np.array([[[-r, r], [r, -r]] for r in rates])
                sizes[name] = 2
                cims[name] = Cim(name, (h,), (nH,), mats, toggle=True)
        return CtbnModel(sizes, cims)

    def meta(self):
        return {"kind": "traffic", "ports": ",".join(_port_name(p) for p in self.ports)}

    @classmethod
    def from_ctbn(cls, model, meta):
        ports = tuple(_parse_port(p) for p in meta["ports"].split(","))
        g = model.cims["G"].matrices[0]
        h = np.stack([model.cims[f"H_{_port_name(p)}"].matrices for p in ports])
        nH = h.shape[2]
        mask = active_mask(nH)
        tog = np.zeros((len(ports), len(KINDS)))
        for j, port in enumerate(ports):
            for k, kind in enumerate(KINDS):
                mats = model.cims[f"{kind}_{_port_name(port)}"].matrices
                tog[j, k] = mats[np.flatnonzero(mask[k])[0], 0, 1]
        return cls(ports, g, h, tog)


def build_traffic_model(ports, n_global=4, n_hidden=8, seed=None,
                        g_range=(0.002, 0.05), h_range=(0.05, 5.0),
                        toggle_range=(0.05, 5.0)):
    """Randomly initialised traffic model with log-uniform rates.

    Toggle ``j`` is active in hidden states ``{2j, 2j+1}`` (modulo
    ``n_hidden``), so with eight hidden states every toggle owns a disjoint
    pair.
    """
    ports = tuple(int(p) for p in ports)
    if not ports:
        raise InputError("at least one port is required")
    n_global = check_positive_int(n_global, "n_global")
    n_hidden = check_positive_int(n_hidden, "n_hidden")
    if n_hidden % 2 and n_hidden != 1:
        raise InputError("n_hidden must be even (or 1 for a degenerate submodel)")
    rng = check_random_state(seed)

    def loguni(lo, hi, size):
        return np.exp(rng.uniform(np.log(lo), np.log(hi), size=size))

    g = IntensityMatrix.from_offdiagonal(loguni(*g_range, (n_global, n_global))).rates
    h = np.empty((len(ports), n_global, n_hidden, n_hidden))
    for j in range(len(ports)):
        for u in range(n_global):
            h[j, u] = IntensityMatrix.from_offdiagonal(loguni(*h_range, (n_hidden, n_hidden))).rates
    tog = loguni(*toggle_range, (len(ports), len(KINDS)))
    return TrafficModel(ports, g, h, tog)


def route_events(model, trace):
    """Split a trace into per-submodel (times, kinds); unmodelled ports dropped."""
    out = [([], []) for _ in model.ports]
    idx = {p: model.port_index(p) for p in np.unique(trace.ports).tolist()}
    target = np.array([idx[p] if idx[p] is not None else -1 for p in trace.ports.tolist()],
                      dtype=int)
    routed = []
    for j in range(len(model.ports)):
        sel = target == j
        routed.append((trace.times[sel], trace.kinds[sel]))
    return routed


# ------------------------------------------------------------- G sampling


@dataclass
class GPath:
    """Piecewise-constant G trajectory: ``states[i]`` holds from ``times[i]``."""

    times: np.ndarray
    states: np.ndarray
    end: float

    def state_at(self, t):
        return self.states[np.searchsorted(self.times, t, side="right") - 1]

    def suff_stats(self, n):
        dwell = np.diff(np.concatenate([self.times, [self.end]]))
        T = np.zeros(n)
        M = np.zeros((n, n))
        np.add.at(T, self.states, dwell)
        np.add.at(M, (self.states[:-1], self.states[1:]), 1.0)
        return ctmc.SufficientStatistics(T, M)

    @classmethod
    def join(cls, chunks):
        times = np.concatenate([c.times if i == 0 else c.times[1:] for i, c in enumerate(chunks)])
        states = np.concatenate([c.states if i == 0 else c.states[1:]
                                 for i, c in enumerate(chunks)])
        return cls(times, states, chunks[-1].end)


def _sample_g(rng, Q, start_states, t0, t1):
    """Forward-sample G on [t0, t1) for every particle."""
    P = len(start_states)
    q = -np.diag(Q)
    off = Q - np.diag(np.diag(Q))
    with np.errstate(invalid="ignore", divide="ignore"):
        cum = np.cumsum(np.where(q[:, None] > 0, off / np.where(q > 0, q, 1)[:, None], 0), axis=1)
    times = [[t0] for _ in range(P)]
    states = [[int(s)] for s in start_states]
    cur = np.asarray(start_states, dtype=int).copy()
    t = np.full(P, float(t0))
    active = q[cur] > 0
    while active.any():
        idx = np.flatnonzero(active)
        tn = t[idx] + rng.exponential(size=len(idx)) / q[cur[idx]]
        fire = tn < t1
        active[idx[~fire]] = False
        idx, tn = idx[fire], tn[fire]
        if not len(idx):
            break
        r = rng.random(len(idx))
        new = np.minimum((cum[cur[idx]] < r[:, None]).sum(axis=1), len(q) - 1)
        cur[idx] = new
        t[idx] = tn
        for p, tt, s in zip(idx.tolist(), tn.tolist(), new.tolist()):
            times[p].append(tt)
            states[p].append(s)
    paths = [GPath(np.array(times[p]), np.array(states[p], dtype=int), float(t1))
             for p in range(P)]
    return paths, cur


# --------------------------------------------------------- port chains


def _port_chain(bank, event_ops, ev_times, ev_kinds, paths, t0, t1, alpha0):
    """Lockstep chain for one port over [t0, t1) and a batch of G paths.

    Steps are aligned on the port's event times.  Inside each inter-event
    interval every particle gets its own sub-steps at its own G changes;
    shorter particles are padded with zero-length steps, so the work grows
    with the number of events plus the busiest particle, not with the union
    of all particles' changes.
    """
    sel = (ev_times >= t0) & (ev_times < t1)
    et, ek = ev_times[sel], ev_kinds[sel]
    points = np.unique(np.append(et, t1))
    K, P = len(points), len(paths)
    changes = [p.times[1:] for p in paths]
    bins = [np.searchsorted(points, c, side="right") for c in changes]
    counts = np.zeros((P, K + 1), dtype=int)
    for i, b in enumerate(bins):
        np.add.at(counts[i], b, 1)
    depth = 1 + counts[:, :K].max(axis=0)
    off = np.concatenate([[0], np.cumsum(depth)[:-1]])
    last = off + depth - 1
    H = np.zeros((P, int(depth.sum())))
    U = np.zeros_like(H, dtype=int)
    for i, p in enumerate(paths):
        c, b = changes[i], bins[i]
        keep = b < K
        c, b = c[keep], b[keep]
        ends = np.concatenate([c, points])
        is_event = np.concatenate([np.zeros(len(c), bool), np.ones(K, bool)])
        order = np.lexsort((~is_event, ends))
        ends, is_event = ends[order], is_event[order]
        rank = np.arange(len(b)) - np.searchsorted(b, b, side="left")
        slot = np.empty(len(ends), dtype=int)
        slot[~is_event] = off[b] + rank
        slot[is_event] = last
        starts = np.concatenate([[t0], ends[:-1]])
        H[i, slot] = ends - starts
        U[i, slot] = p.states[np.searchsorted(p.times, starts, side="right") - 1]
    ops = [[] for _ in range(H.shape[1])]
    if len(et):
        pos = last[np.searchsorted(points, et)]
        for k, kind in zip(pos.tolist(), ek.tolist()):
            ops[k].append(event_ops[kind])
    return _chain.bound_steps(_chain.Chain(bank, H, U, ops, alpha0))


def _event_ops(model, j):
    rates = model.event_rates(j)
    return [_chain.MatrixOp(np.diag(rates[k])) for k in range(len(KINDS))]


def _systematic(rng, w):
    P = len(w)
    c = np.cumsum(w)
    c[-1] = 1.0
    pos = (rng.random() + np.arange(P)) / P
    return np.minimum(np.searchsorted(c, pos, side="right"), P - 1)


def _spans(t0, t1, every):
    if every is None or every <= 0 or every >= t1 - t0:
        return [(t0, t1)]
    edges = np.arange(t0, t1, every)
    edges = np.append(edges, t1)
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


@dataclass
class WindowScore:
    start: float
    length: float
    log_likelihood: float
    n_events: int
    skipped: bool = False
    degenerate: bool = False

    @property
    def end(self):
        return self.start + self.length


@dataclass
class _FilterResult:
    windows: list
    paths: list
    log_weights: np.ndarray
    log_likelihood: float


def _particle_filter(model, trace, n_particles, span, rng, *, strict, keep_paths):
    """Sequential importance resampling over G with exact per-port filters."""
    P = check_positive_int(n_particles, "n_particles")
    nG, nH = model.n_global, model.n_hidden
    routed = route_events(model, trace)
    banks = [make_bank(model.subgenerators(j)) for j in range(len(model.ports))]
    ops = [_event_ops(model, j) for j in range(len(model.ports))]
    g = rng.integers(nG, size=P)
    alpha = [np.full((P, nH), 1.0 / nH) for _ in model.ports]
    logw = np.zeros(P)
    chunks = [[] for _ in range(P)]
    windows = []
    total = 0.0
    spans = _spans(trace.start, trace.end, span)
    for si, (a, b) in enumerate(spans):
        seg, g = _sample_g(rng, model.g_rates, g, a, b)
        inc = np.zeros(P)
        for j in range(len(model.ports)):
            t_j, k_j = routed[j]
            ch = _port_chain(banks[j], ops[j], t_j, k_j, seg, a, b, alpha[j])
            fwd = _chain.forward(ch, store=False)
            inc += fwd.log_z
            alpha[j] = fwd.a_end
        n_ev = int(np.count_nonzero((trace.times >= a) & (trace.times < b)))
        lw = logw - logsumexp(logw)
        with np.errstate(invalid="ignore"):
            est = float(logsumexp(lw + inc))
        logw = logw + inc
        degenerate = not np.isfinite(est)
        if keep_paths:
            for p in range(P):
                chunks[p].append(seg[p])
        windows.append(WindowScore(a, b - a, est, n_ev, skipped=n_ev == 0,
                                   degenerate=degenerate))
        if degenerate:
            if strict:
                raise ParticleDegeneracyError(
                    f"all {P} particles have zero weight in [{a:g}, {b:g}); "
                    "increase n_particles")
            logger.warning("particle degeneracy in window [%g, %g)", a, b)
            alpha = [np.full((P, nH), 1.0 / nH) for _ in model.ports]
            logw = np.zeros(P)
            continue
        total += est
        if si < len(spans) - 1:
            w = np.exp(logw - logsumexp(logw))
            idx = _systematic(rng, w)
            g = g[idx]
            alpha = [al[idx] for al in alpha]
            if keep_paths:
                chunks = [list(chunks[i]) for i in idx]
            logw = np.zeros(P)
    paths = [GPath.join(c) for c in chunks] if keep_paths else None
    return _FilterResult(windows, paths, logw, total)


# ---------------------------------------------------------------- E step


@dataclass
class TrafficStats:
    """Expected sufficient statistics of every variable of a TrafficModel."""

    g: ctmc.SufficientStatistics
    h_T: np.ndarray  # (n_ports, nG, nH)
    h_M: np.ndarray  # (n_ports, nG, nH, nH)
    toggle_T: np.ndarray  # (n_ports, 4) expected time with the toggle active
    toggle_M: np.ndarray  # (n_ports, 4) event counts
    log_likelihood: float = np.nan


def _toggle_stats(model, h_T, routed):
    mask = active_mask(model.n_hidden)
    tT = np.einsum("pgh,kh->pk", h_T, mask.astype(float))
    tM = np.zeros((len(model.ports), len(KINDS)))
    for j, (_, kinds) in enumerate(routed):
        tM[j] = np.bincount(kinds, minlength=len(KINDS))[:len(KINDS)]
    return tT, tM


def _smooth_ports(model, routed, paths, weights, t0, t1):
    """Weighted exact H statistics over full G paths (one batch per port)."""
    nP, nG, nH = len(model.ports), model.n_global, model.n_hidden
    h_T = np.zeros((nP, nG, nH))
    h_M = np.zeros((nP, nG, nH, nH))
    logp = np.zeros((nP, len(paths)))
    for j in range(nP):
        gens = model.subgenerators(j)
        bank = make_bank(gens)
        t_j, k_j = routed[j]
        alpha0 = np.full((len(paths), nH), 1.0 / nH)
        ch = _port_chain(bank, _event_ops(model, j), t_j, k_j, paths, t0, t1, alpha0)
        fwd = _chain.forward(ch)
        _chain.backward(ch, fwd, weights=weights)
        C = bank.integrals()
        h_T[j] = np.maximum(np.einsum("gii->gi", C), 0.0)
        off = model.h_rates[j].copy()
        off[:, np.arange(nH), np.arange(nH)] = 0.0
        h_M[j] = np.maximum(off * C, 0.0)
        logp[j] = fwd.log_z
    return h_T, h_M, logp


def submodel_estep(model, j, g_path, events):
    """Exact E step of port submodel ``j`` given one G trajectory.

    Returns ``(log P(events | g), h_T (nG, nH), h_M (nG, nH, nH))``.
    """
    t_j, k_j = events
    h_T, h_M, logp = _smooth_ports(
        _single_port(model, j), [(np.asarray(t_j, float), np.asarray(k_j, int))],
        [g_path], np.ones(1), g_path.times[0], g_path.end)
    return float(logp[0, 0]), h_T[0], h_M[0]


def _single_port(model, j):
    return TrafficModel((model.ports[j],), model.g_rates, model.h_rates[j:j + 1],
                        model.toggle_rates[j:j + 1])


def rbpf_estep(model, trace, n_particles=100, resample_every=50.0, seed=None):
    """Rao-Blackwellised particle-filter E step.

    G paths are forward-sampled from their prior and weighted by the exact
    likelihood of every port's events given the path; with
    ``resample_every`` set, particles are synchronised and systematically
    resampled at those boundaries and the surviving ancestral paths are
    smoothed.  Returns :class:`TrafficStats` whose ``log_likelihood`` is the
    filter's estimate of log P(trace).
    """
    rng = check_random_state(seed)
    filt = _particle_filter(model, trace, n_particles, resample_every, rng,
                            strict=True, keep_paths=True)
    w = np.exp(filt.log_weights - logsumexp(filt.log_weights))
    routed = route_events(model, trace)
    h_T, h_M, _ = _smooth_ports(model, routed, filt.paths, w, trace.start, trace.end)
    g = ctmc.SufficientStatistics.zeros(model.n_global)
    for wp, path in zip(w, filt.paths):
        if wp > 0:
            s = path.suff_stats(model.n_global)
            g = g + ctmc.SufficientStatistics(wp * s.T, wp * s.M)
    tT, tM = _toggle_stats(model, h_T, routed)
    return TrafficStats(g, h_T, h_M, tT, tM, filt.log_likelihood)


def hidden_ctbn(model):
    """The G and H part of the model as a CTBN (no toggles)."""
    sizes = {"G": model.n_global}
    cims = {"G": Cim("G", (), (), model.g_rates)}
    for j, port in enumerate(model.ports):
        name = f"H_{_port_name(port)}"
        sizes[name] = model.n_hidden
        cims[name] = Cim(name, ("G",), (model.n_global,), model.h_rates[j])
    return CtbnModel(sizes, cims)


def exact_estep(model, trace, cap=ctbn.JOINT_SIZE_CAP):
    """E step by flattening G and every H into one process (small models only)."""
    hid = hidden_ctbn(model)
    Q = ctbn.amalgamate(hid, cap).rates
    states = hid.joint_states()
    N = len(states)
    rates = np.zeros((N, len(model.ports), len(KINDS)))
    for j in range(len(model.ports)):
        rates[:, j, :] = model.event_rates(j)[:, states[:, 1 + j]].T
    A = Q - np.diag(rates.sum(axis=(1, 2)))
    bank = make_bank(A[None])
    ops_for = {(j, k): _chain.MatrixOp(np.diag(rates[:, j, k]))
               for j in range(len(model.ports)) for k in range(len(KINDS))}
    routed = route_events(model, trace)
    tags = np.concatenate([np.full(len(t), j) for j, (t, _) in enumerate(routed)] + [np.zeros(0)])
    et = np.concatenate([t for t, _ in routed] + [np.zeros(0)])
    ek = np.concatenate([k for _, k in routed] + [np.zeros(0, int)])
    order = np.argsort(et, kind="stable")
    et, ek, tags = et[order], ek[order].astype(int), tags[order].astype(int)
    points = np.unique(np.concatenate([et, [trace.end]]))
    h = points - np.concatenate([[trace.start], points[:-1]])
    ops = [[] for _ in points]
    for t, k, j in zip(et, ek, tags):
        ops[int(np.searchsorted(points, t))].append(ops_for[(int(j), int(k))])
    ch = _chain.bound_steps(_chain.Chain(bank, h, np.zeros((1, len(points)), dtype=int), ops,
                                         hid.joint_initial()[None]))
    fwd = _chain.forward(ch)
    _chain.backward(ch, fwd)
    C = bank.integrals()[0]
    off = Q.copy()
    np.fill_diagonal(off, 0.0)
    joint = ctmc.SufficientStatistics(np.diag(C).copy(), off * C)
    css = ctbn._project(hid, joint)
    h_T = np.stack([css.T[n] for n in hid.names[1:]])
    h_M = np.stack([css.M[n] for n in hid.names[1:]])
    g = ctmc.SufficientStatistics(css.T["G"][0], css.M["G"][0])
    tT, tM = _toggle_stats(model, h_T, routed)
    return TrafficStats(g, h_T, h_M, tT, tM, float(fwd.log_z[0]))


# ---------------------------------------------------------------- M step


def nids_mstep(stats, model, pseudo=DEFAULT_PSEUDO):
    """Quotient updates (counts over dwell times) for G and each H; tied toggle rates."""
    g = ctmc.mle_complete(stats.g, pseudo).rates
    nP, nG = len(model.ports), model.n_global
    h = np.empty_like(model.h_rates)
    for j in range(nP):
        for u in range(nG):
            ss = ctmc.SufficientStatistics(stats.h_T[j, u], stats.h_M[j, u])
            h[j, u] = ctmc.mle_complete(ss, pseudo).rates
    tog = (stats.toggle_M + pseudo) / (stats.toggle_T + pseudo)
    return TrafficModel(model.ports, g, h, tog)


@dataclass
class RbpfConfig:
    n_iter: int = 10
    n_particles: int = 100
    resample_every: float | None = 50.0
    seed: int = 0
    pseudo: float = DEFAULT_PSEUDO


@dataclass
class RbpfEMResult:
    model: TrafficModel
    log_likelihoods: list = field(default_factory=list)


def rbpf_em(model, trace, cfg=None):
    """EM with the particle-filter E step; reports the filter's likelihood estimates.

    These estimates are Monte Carlo and need not increase monotonically.
    """
    cfg = cfg or RbpfConfig()
    history = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(max(cfg.n_iter, 0))
    for it in range(cfg.n_iter):
        stats = rbpf_estep(model, trace, cfg.n_particles, cfg.resample_every,
                           np.random.default_rng(seeds[it]))
        history.append(stats.log_likelihood)
        logger.info("rbpf-em iteration %d: log-likelihood estimate %.4f", it, stats.log_likelihood)
        model = nids_mstep(stats, model, cfg.pseudo)
    return RbpfEMResult(model, history)


# ----------------------------------------------------------------- scoring


def score_windows(model, trace, window=50.0, n_particles=100, seed=None):
    """Log-likelihood of each window given the filtered history.

    Windows tile ``[trace.start, trace.end)``; windows without events are
    returned with ``skipped=True``.
    """
    window = check_positive(window, "window")
    rng = check_random_state(seed)
    filt = _particle_filter(model, trace, n_particles, window, rng,
                            strict=False, keep_paths=False)
    return filt.windows


def connection_count_baseline(trace, window=50.0):
    """Number of CONN_OPEN events per window (higher means more anomalous)."""
    window = check_positive(window, "window")
    out = []
    for a, b in _spans(trace.start, trace.end, window):
        sel = (trace.times >= a) & (trace.times < b)
        n = int(np.count_nonzero(sel))
        opens = int(np.count_nonzero(trace.kinds[sel] == CONN_OPEN))
        out.append(WindowScore(a, b - a, float(opens), n, skipped=n == 0))
    return out
