"""Synthetic traffic and system-call data with controllable anomalies."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ctbn
from ._validation import check_positive, check_positive_int, check_random_state
from .exceptions import InputError
from .hids import DEFAULT_RESOLUTION, ProcessTrace, SyscallModel
from .nids import CONN_CLOSE, CONN_OPEN, KINDS, PKT_IN, TrafficModel, TrafficTrace


# ----------------------------------------------------------------- traffic


def gen_traffic(model: TrafficModel, duration, seed=None, start=0.0):
    """Forward-sample a trace; each toggle flip becomes one event.

    A CONN_CLOSE flip on a port with no open connection is discarded so the
    trace never closes more connections than it opened.
    """
    duration = check_positive(duration, "duration")
    net = model.to_ctbn()
    traj = ctbn.forward_sample(net, duration, seed)
    lookup = {}
    for j, port in enumerate(model.ports):
        name = "other" if port < 0 else str(port)
        for k, kind in enumerate(KINDS):
            lookup[net.names.index(f"{kind}_{name}")] = (port, k)
    var_port = np.full(len(net.names), -2)
    var_kind = np.full(len(net.names), -1)
    for i, (p, k) in lookup.items():
        var_port[i], var_kind[i] = p, k
    sel = var_kind[traj.variables] >= 0
    times = traj.times[sel] + start
    ports = var_port[traj.variables[sel]]
    kinds = var_kind[traj.variables[sel]]
    keep = np.ones(len(times), dtype=bool)
    open_count = {}
    for i, (p, k) in enumerate(zip(ports.tolist(), kinds.tolist())):
        if k == CONN_OPEN:
            open_count[p] = open_count.get(p, 0) + 1
        elif k == CONN_CLOSE:
            if open_count.get(p, 0) == 0:
                keep[i] = False
            else:
                open_count[p] -= 1
    return TrafficTrace(times[keep], ports[keep], kinds[keep], start, start + duration)


@dataclass(frozen=True)
class AnomalyTemplate:
    """Event stream of an attack at full speed.

    ``pattern`` is one of ``SCAN`` (CONN_OPEN on ascending ports starting at
    ``port``), ``FLOOD`` (PKT_IN on ``port``) or ``PROBE`` (alternating
    CONN_OPEN / CONN_CLOSE on ``port``).  ``n_events`` of None means the
    stream fills the whole injection window.
    """

    pattern: str = "FLOOD"
    rate: float = 1000.0
    port: int = 80
    n_events: int | None = None

    def __post_init__(self):
        if self.pattern not in ("SCAN", "FLOOD", "PROBE"):
            raise InputError(f"unknown anomaly pattern {self.pattern!r}")
        check_positive(self.rate, "rate")

    def events(self, n):
        i = np.arange(n)
        if self.pattern == "SCAN":
            return self.port + i, np.full(n, CONN_OPEN)
        if self.pattern == "FLOOD":
            return np.full(n, self.port), np.full(n, PKT_IN)
        return np.full(n, self.port), np.where(i % 2 == 0, CONN_OPEN, CONN_CLOSE)


@dataclass(frozen=True)
class InjectionSpec:
    """``alpha``: share of the trace covered by the injection window;
    ``beta``: speed of the attack relative to the template."""

    alpha: float = 0.02
    beta: float = 0.01
    template: AnomalyTemplate = AnomalyTemplate()
    seed: int | None = None

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise InputError("alpha must lie in (0, 1]")
        if not 0 < self.beta <= 1:
            raise InputError("beta must lie in (0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    """Sorted, disjoint half-open intervals of injected traffic."""

    intervals: tuple = ()

    def __post_init__(self):
        iv = tuple(sorted((float(a), float(b)) for a, b in self.intervals))
        for a, b in iv:
            if not b > a:
                raise InputError("ground-truth intervals need end > start")
        for (_, b0), (a1, _) in zip(iv, iv[1:]):
            if a1 < b0:
                raise InputError("ground-truth intervals overlap")
        object.__setattr__(self, "intervals", iv)

    def __len__(self):
        return len(self.intervals)

    def contains(self, t):
        return any(a <= t < b for a, b in self.intervals)


def _injection_start(rng, trace):
    return trace.start + rng.random() * trace.horizon / 2.0


def inject_anomaly(trace, spec):
    """Insert a slowed-down template burst into the first half of ``trace``.

    Returns the merged trace and the interval spanned by the injected events.
    The original events are kept untouched.
    """
    rng = check_random_state(spec.seed)
    tpl = spec.template
    start = _injection_start(rng, trace)
    limit = min(start + spec.alpha * trace.horizon, trace.end)
    mean_gap = 1.0 / (tpl.rate * spec.beta)
    cap = tpl.n_events if tpl.n_events is not None else np.inf
    times = [start]
    while len(times) < cap:
        t = times[-1] + rng.exponential(mean_gap)
        if t >= limit:
            break
        times.append(t)
    if len(times) == 1:
        warnings.warn("injection window shorter than one attack gap; injecting a single event",
                      stacklevel=2)
    times = np.array(times)
    ports, kinds = tpl.events(len(times))
    injected = TrafficTrace(times, ports, kinds, trace.start, trace.end, require_balanced=False)
    merged = TrafficTrace.concatenate([trace, injected], trace.start, trace.end)
    gt = GroundTruth(((times[0], np.nextafter(times[-1], np.inf)),))
    return merged, gt


def mix_hosts(trace_a, trace_b, spec):
    """Replay a window of ``trace_b`` inside ``trace_a`` as if it were an attack.

    A stretch of ``alpha * beta * horizon_a`` seconds of host b is slowed by
    ``1 / beta`` so it occupies ``alpha * horizon_a`` seconds of host a.
    """
    rng = check_random_state(spec.seed)
    length = spec.alpha * trace_a.horizon
    src_len = length * spec.beta
    if len(trace_b) == 0:
        return trace_a, GroundTruth()
    src0 = trace_b.start + rng.random() * max(trace_b.horizon - src_len, 0.0)
    dst0 = _injection_start(rng, trace_a)
    dst1 = min(dst0 + length, trace_a.end)
    sel = (trace_b.times >= src0) & (trace_b.times < src0 + src_len)
    t = dst0 + (trace_b.times[sel] - src0) / spec.beta
    keep = t < dst1
    if not keep.any():
        return trace_a, GroundTruth()
    injected = TrafficTrace(t[keep], trace_b.ports[sel][keep], trace_b.kinds[sel][keep],
                            trace_a.start, trace_a.end, require_balanced=False)
    merged = TrafficTrace.concatenate([trace_a, injected], trace_a.start, trace_a.end)
    return merged, GroundTruth(((dst0, dst1),))


# ---------------------------------------------------------------- syscalls


def _sample_calls(rng, model, horizon, h0):
    """Exact-time call sequence of one process (competing clocks)."""
    qh = model.q_h
    exit_rates = -np.diag(qh)
    m, N = model.n_hidden, len(model.vocabulary)
    # per hidden state: [H moves to each state..., call 0..N-1]
    weights = np.concatenate([qh - np.diag(np.diag(qh)), model.rates.T], axis=1)
    totals = exit_rates + model.rates.sum(axis=0)
    cum = np.cumsum(weights, axis=1)
    t, h = 0.0, h0
    times, calls = [], []
    while True:
        if totals[h] <= 0:
            break
        t += rng.exponential(1.0 / totals[h])
        if t >= horizon:
            break
        j = min(int(np.searchsorted(cum[h], rng.random() * cum[h, -1], side="right")), m + N - 1)
        if j < m:
            h = j
        else:
            times.append(t)
            calls.append(j - m)
    return np.array(times), np.array(calls, dtype=int)


def quantize(times, calls, resolution):
    """Floor times to clock ticks; calls sharing a tick keep their order."""
    idx = np.floor(np.asarray(times) / resolution).astype(np.int64)
    ticks, batches = [], []
    for i, c in zip(idx.tolist(), calls):
        if ticks and ticks[-1] == i:
            batches[-1].append(c)
        else:
            ticks.append(i)
            batches.append([c])
    return np.array(ticks, dtype=np.int64), batches


def gen_syscalls(model: SyscallModel, n_processes, mean_horizon, resolution=DEFAULT_RESOLUTION,
                 seed=None, label="normal", prefix="p"):
    """Sample processes exactly in time, then quantise to the clock.

    Process lengths are uniform on [0.5, 1.5] x ``mean_horizon``; the hidden
    state starts uniformly.  Processes without any call are redrawn.
    """
    n_processes = check_positive_int(n_processes, "n_processes")
    mean_horizon = check_positive(mean_horizon, "mean_horizon")
    resolution = check_positive(resolution, "resolution")
    rng = check_random_state(seed)
    out = []
    while len(out) < n_processes:
        horizon = mean_horizon * rng.uniform(0.5, 1.5)
        h0 = int(rng.integers(model.n_hidden))
        times, calls = _sample_calls(rng, model, horizon, h0)
        if not len(times):
            continue
        ticks, batches = quantize(times, calls, resolution)
        names = tuple(tuple(model.vocabulary[c] for c in b) for b in batches)
        out.append(ProcessTrace(f"{prefix}{len(out)}", ticks * resolution, names, resolution,
                                label))
    return out


def permuted_model(model, seed=None):
    """Same model with call rates shuffled across calls (an "anomalous" twin)."""
    rng = check_random_state(seed)
    N = len(model.vocabulary)
    perm = rng.permutation(N)
    while N > 1 and np.all(perm == np.arange(N)):
        perm = rng.permutation(N)
    return SyscallModel(model.vocabulary, model.q_h.copy(), model.rates[perm].copy())
