"""Scaled forward-backward passes over piecewise-homogeneous evidence.

A chain is a sequence of K steps.  Step k first propagates the hidden
state for a duration h[k] under generator u[p, k] of a bank (possibly a
different generator per batch element p), then applies zero or more
instantaneous operators (observed transitions, event selectors, state
restrictions, finite-resolution spikes).  All batch elements share the
step layout, which is what lets the particle filter run particles in
lockstep.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MatrixOp:
    """Multiply the forward row vector by a fixed nonnegative matrix.

    ``B`` is (n, n) or (P, n, n).  When ``record`` is set, the expected
    number of times each entry of ``B`` was used is accumulated in ``acc``.
    """

    def __init__(self, B, record=False):
        self.B = np.asarray(B, dtype=float)
        self.record = record
        self.acc = None

    def forward(self, alpha):
        if self.B.ndim == 2:
            return alpha @ self.B
        return np.einsum("pi,pij->pj", alpha, self.B)

    def backward(self, beta):
        if self.B.ndim == 2:
            return beta @ self.B.T
        return np.einsum("pij,pj->pi", self.B, beta)

    def accumulate(self, alpha, beta, c):
        if not self.record:
            return
        outer = np.einsum("p,pi,pj->ij", c, alpha, beta) if self.B.ndim == 2 else None
        if outer is not None:
            contrib = outer * self.B
        else:
            contrib = np.einsum("p,pi,pij,pj->ij", c, alpha, self.B, beta)
        self.acc = contrib if self.acc is None else self.acc + contrib


@dataclass
class Chain:
    bank: object
    h: np.ndarray  # (K,) shared or (P, K) per batch element
    u: np.ndarray  # (P, K) generator index per batch element
    ops: list  # K lists of operators
    alpha0: np.ndarray  # (P, n)


# Largest log-decay one propagation step may carry.  Scaled messages lose
# roughly this much mass across a step, and the interval posterior factor
# exp(la + lb - log_z) grows by as much, so it must stay far below ~700.
MAX_STEP_DECAY = 50.0


def bound_steps(chain, max_decay=MAX_STEP_DECAY):
    """Split steps whose length times exit rate exceeds ``max_decay``.

    Operators stay on the last piece of a split step, so the evidence and
    the statistics are unchanged; only the step indices move.
    """
    exit_rate = np.max(-np.diagonal(chain.bank.mats, axis1=1, axis2=2), axis=1)
    exit_rate = np.maximum(exit_rate, 0.0)
    h = np.asarray(chain.h, dtype=float)
    load = np.atleast_2d(h) * exit_rate[chain.u]
    pieces = np.maximum(1, np.ceil(load.max(axis=0) / max_decay)).astype(int)
    if np.all(pieces == 1):
        return chain
    ops = []
    for k, n in enumerate(pieces.tolist()):
        ops.extend([[] for _ in range(n - 1)])
        ops.append(chain.ops[k])
    return Chain(chain.bank, np.repeat(h / pieces, pieces, axis=-1),
                 np.repeat(chain.u, pieces, axis=1), ops, chain.alpha0)


@dataclass
class ChainPass:
    log_z: np.ndarray
    log_z_backward: np.ndarray | None = None
    a_pre: list = field(default_factory=list)
    la_pre: list = field(default_factory=list)
    a_mid: list = field(default_factory=list)
    la_mid: list = field(default_factory=list)
    b_mid: list = field(default_factory=list)  # beta at step end, before its ops
    lb_mid: list = field(default_factory=list)
    a_end: np.ndarray | None = None


def _renorm_sum(a, la):
    s = a.sum(axis=1)
    if s.min() > 0.0 and s.max() < np.inf:
        return a / s[:, None], la + np.log(s)
    good = np.isfinite(s) & (s > 0)
    a = np.where(good[:, None], a / np.where(good, s, 1.0)[:, None], 0.0)
    la = np.where(good, la + np.log(np.where(good, s, 1.0)), -np.inf)
    return a, la


def _renorm_max(b, lb):
    s = b.max(axis=1)
    if s.min() > 0.0 and s.max() < np.inf:
        return b / s[:, None], lb + np.log(s)
    good = np.isfinite(s) & (s > 0)
    b = np.where(good[:, None], b / np.where(good, s, 1.0)[:, None], 0.0)
    lb = np.where(good, lb + np.log(np.where(good, s, 1.0)), -np.inf)
    return b, lb


def _step(h, k):
    return h[k] if h.ndim == 1 else h[:, k]


class _ExpmCache:
    """exp(A_u h) per (generator, duration), clamped to be entrywise nonnegative."""

    def __init__(self, bank):
        self.bank = bank
        self.mats = {}

    def __call__(self, u, h):
        key = (int(u), float(h))
        E = self.mats.get(key)
        if E is None:
            E = self.mats[key] = np.maximum(self.bank.expm(key[0], key[1]), 0.0)
        return E


def _single(chain):
    return chain.alpha0.shape[0] == 1 and chain.h.ndim == 1


def _renorm1(a, la):
    s = float(a.sum())
    if s > 0.0 and s < np.inf:
        return a / s, la + np.log(s)
    return np.zeros_like(a), np.full(1, -np.inf)


def _forward_single(chain, store):
    # one sequence: plain matrix products with cached exponentials
    cache = chain.expm_cache = _ExpmCache(chain.bank)
    a, la = _renorm1(np.asarray(chain.alpha0, dtype=float), np.zeros(1))
    if np.isfinite(la[0]):
        la = np.zeros(1)
    out = ChainPass(log_z=None)
    u = chain.u[0]
    a_pre, la_pre, a_mid, la_mid = out.a_pre, out.la_pre, out.a_mid, out.la_mid
    for k, hk in enumerate(chain.h.tolist()):
        if store:
            a_pre.append(a)
            la_pre.append(la)
        if hk > 0.0:
            a, la = _renorm1(a @ cache(u[k], hk), la)
        if store:
            a_mid.append(a)
            la_mid.append(la)
        for op in chain.ops[k]:
            a, la = _renorm1(np.maximum(op.forward(a), 0.0), la)
    out.a_end = a
    out.log_z = la
    return out


def forward(chain, store=True):
    """Scaled forward pass; returns per-batch log-evidence and stored messages."""
    if _single(chain):
        return _forward_single(chain, store)
    a = np.asarray(chain.alpha0, dtype=float)
    P = a.shape[0]
    a, la = _renorm_sum(a, np.zeros(P))
    la = np.where(np.isfinite(la), 0.0, -np.inf)
    out = ChainPass(log_z=None)
    for k in range(chain.h.shape[-1]):
        if store:
            out.a_pre.append(a)
            out.la_pre.append(la)
        hk = _step(chain.h, k)
        if (hk > 0.0).any():
            a = np.maximum(chain.bank.forward(a, chain.u[:, k], hk), 0.0)
            a, la = _renorm_sum(a, la)
        if store:
            out.a_mid.append(a)
            out.la_mid.append(la)
        for op in chain.ops[k]:
            a = np.maximum(op.forward(a), 0.0)
            a, la = _renorm_sum(a, la)
    out.a_end = a
    out.log_z = la
    return out


def _factor(w, la, lb, log_z):
    expo = la + lb - log_z
    if np.isfinite(expo).all():
        return np.where(w > 0, w, 0.0) * np.exp(expo)
    ok = np.isfinite(log_z) & np.isfinite(la) & np.isfinite(lb) & (w > 0)
    expo = np.where(ok, la + lb - np.where(ok, log_z, 0.0), -np.inf)
    return np.where(ok, w * np.exp(expo), 0.0)


class _Deferred:
    """Buffers interval contributions and hands them to the bank in batches."""

    def __init__(self, bank, budget=1 << 20):
        self.bank = bank
        self.limit = max(1, budget // (bank.n * bank.n))
        self.parts = []
        self.rows = 0

    def add(self, a, b, u, h, c):
        self.parts.append((a, b, u, np.broadcast_to(h, u.shape), c))
        self.rows += len(u)
        if self.rows >= self.limit:
            self.flush()

    def flush(self):
        if self.parts:
            self.bank.accumulate(*(np.concatenate(x) for x in zip(*self.parts)))
            self.parts, self.rows = [], 0


def backward(chain, fwd, weights=None, accumulate=True, store=False):
    """Scaled backward pass; optionally accumulates expected statistics.

    ``weights`` (P,) multiply each batch element's posterior contribution.
    """
    if _single(chain) and getattr(chain, "expm_cache", None) is not None:
        return _backward_single(chain, fwd, weights, accumulate, store)
    P, n = fwd.a_end.shape
    w = np.ones(P) if weights is None else np.asarray(weights, dtype=float)
    b = np.ones((P, n))
    lb = np.zeros(P)
    K = chain.h.shape[-1]
    pending = _Deferred(chain.bank) if accumulate else None
    if store:
        fwd.b_mid = [None] * K
        fwd.lb_mid = [None] * K
    for k in range(K - 1, -1, -1):
        ops = chain.ops[k]
        if ops:
            if accumulate:
                xs = [fwd.a_mid[k]]
                ls = [fwd.la_mid[k]]
                for op in ops[:-1]:
                    x, lx = _renorm_sum(np.maximum(op.forward(xs[-1]), 0.0), ls[-1])
                    xs.append(x)
                    ls.append(lx)
            for j in range(len(ops) - 1, -1, -1):
                if accumulate and getattr(ops[j], "record", True):
                    ops[j].accumulate(xs[j], b, _factor(w, ls[j], lb, fwd.log_z))
                b = np.maximum(ops[j].backward(b), 0.0)
                b, lb = _renorm_max(b, lb)
        if store:
            fwd.b_mid[k] = b
            fwd.lb_mid[k] = lb
        hk = _step(chain.h, k)
        if (hk > 0.0).any():
            if accumulate:
                c = _factor(w, fwd.la_pre[k], lb, fwd.log_z)
                pending.add(fwd.a_pre[k], b, chain.u[:, k], hk, c)
            b = np.maximum(chain.bank.backward(b, chain.u[:, k], hk), 0.0)
            b, lb = _renorm_max(b, lb)
    if pending is not None:
        pending.flush()
    a0, _ = _renorm_sum(np.asarray(chain.alpha0, dtype=float), np.zeros(P))
    s = np.einsum("pi,pi->p", a0, b)
    with np.errstate(divide="ignore"):
        fwd.log_z_backward = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)) + lb, -np.inf)
    return fwd


def _renorm1_max(b, lb):
    s = float(b.max())
    if s > 0.0 and s < np.inf:
        return b / s, lb + np.log(s)
    return np.zeros_like(b), np.full(1, -np.inf)


def _backward_single(chain, fwd, weights, accumulate, store):
    w = np.ones(1) if weights is None else np.asarray(weights, dtype=float)
    cache = chain.expm_cache
    log_z = fwd.log_z
    b = np.ones_like(fwd.a_end)
    lb = np.zeros(1)
    K = len(chain.h)
    u = chain.u[0]
    h = chain.h.tolist()
    if store:
        fwd.b_mid = [None] * K
        fwd.lb_mid = [None] * K
    rows_a, rows_b, rows_k, rows_c = [], [], [], []
    for k in range(K - 1, -1, -1):
        ops = chain.ops[k]
        if ops:
            if accumulate:
                xs = [fwd.a_mid[k]]
                ls = [fwd.la_mid[k]]
                for op in ops[:-1]:
                    x, lx = _renorm1(np.maximum(op.forward(xs[-1]), 0.0), ls[-1])
                    xs.append(x)
                    ls.append(lx)
            for j in range(len(ops) - 1, -1, -1):
                if accumulate and getattr(ops[j], "record", True):
                    ops[j].accumulate(xs[j], b, _factor(w, ls[j], lb, log_z))
                b, lb = _renorm1_max(np.maximum(ops[j].backward(b), 0.0), lb)
        if store:
            fwd.b_mid[k] = b
            fwd.lb_mid[k] = lb
        hk = h[k]
        if hk > 0.0:
            if accumulate:
                rows_a.append(fwd.a_pre[k])
                rows_b.append(b)
                rows_k.append(k)
                rows_c.append(fwd.la_pre[k] + lb)
            b, lb = _renorm1_max(b @ cache(u[k], hk).T, lb)
    if accumulate and rows_k:
        idx = np.array(rows_k)
        budget = max(1, (1 << 20) // (chain.bank.n ** 2))
        A, B = np.concatenate(rows_a), np.concatenate(rows_b)
        lab = np.concatenate(rows_c)
        C = _factor(np.broadcast_to(w, lab.shape), lab, np.zeros_like(lab),
                    np.broadcast_to(log_z, lab.shape))
        for i in range(0, len(idx), budget):
            sl = slice(i, i + budget)
            chain.bank.accumulate(A[sl], B[sl], u[idx[sl]], chain.h[idx[sl]], C[sl])
    a0, _ = _renorm1(np.asarray(chain.alpha0, dtype=float), np.zeros(1))
    s = float((a0 * b).sum())
    fwd.log_z_backward = np.array([np.log(s) + lb[0] if s > 0 else -np.inf])
    return fwd
