"""Matrix-exponential kernels shared by every inference routine.

Two interchangeable "banks" hold a stack of sub-generator matrices over one
state space and provide batched propagation plus accumulation of the
time-integrals needed for expected sufficient statistics:

    C = int_0^h exp(A s)^T a^T b^T exp(A (h - s))^T ds

i.e. C[x, y] = int (a exp(A s))_x (exp(A (h - s)) b)_y ds.  Dwell times are
read off diag(C), transition counts off A * C.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import expm

# eigenvector condition number above which the eigen route is abandoned
_COND_LIMIT = 1e8


def van_loan_integral(A, G, h):
    """Return int_0^h exp(A^T s) G exp(A^T (h - s)) ds via one block exponential."""
    n = A.shape[0]
    Y = A.T
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = Y
    big[n:, n:] = Y
    big[:n, n:] = G
    return expm(big * h)[:n, n:]


def _exprel(z):
    small = np.abs(z) < 1e-6
    zs = np.where(small, 1.0, z)
    out = np.expm1(zs) / zs
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, out)


def _rowmul(x, mats):
    """Batched row-vector times matrix: x[p] @ mats[p]."""
    return (x[:, None, :] @ mats)[:, 0]


def _colmul(mats, x):
    """Batched matrix times column vector: mats[p] @ x[p]."""
    return (mats @ x[:, :, None])[:, :, 0]


class EigenBank:
    """Diagonalised stack of generators, shape (U, n, n)."""

    def __init__(self, mats):
        mats = np.asarray(mats, dtype=float)
        self.mats = mats
        self.U, self.n = mats.shape[0], mats.shape[1]
        lam, V = np.linalg.eig(mats)
        self.lam = lam.astype(complex)
        self.V = V.astype(complex)
        self.Vinv = np.linalg.inv(self.V)
        self.ok = bool(np.all(np.isfinite(self.Vinv))) and max(
            np.linalg.cond(v) for v in self.V) < _COND_LIMIT
        self.acc = np.zeros((self.U, self.n, self.n), dtype=complex)

    def expm(self, u, h):
        return np.real(self.V[u] @ (np.exp(self.lam[u] * h)[:, None] * self.Vinv[u]))

    # In forward/backward/accumulate, alpha/beta are (P, n), u is (P,) and h
    # is either a scalar or a (P,) array of durations.
    def _decay(self, u, h):
        h = np.asarray(h, dtype=float)
        return np.exp(self.lam[u] * (h[:, None] if h.ndim else h))

    def forward(self, alpha, u, h):
        at = _rowmul(alpha, self.V[u]) * self._decay(u, h)
        return _rowmul(at, self.Vinv[u]).real

    def backward(self, beta, u, h):
        bt = _colmul(self.Vinv[u], beta) * self._decay(u, h)
        return _colmul(self.V[u], bt).real

    @staticmethod
    def _phi(lam, h):
        li = lam[..., :, None]
        lj = lam[..., None, :]
        first = li.real >= lj.real
        big = np.where(first, li, lj)
        small = np.where(first, lj, li)
        return np.exp(big * h) * h * _exprel((small - big) * h)

    def accumulate(self, alpha, beta, u, h, c):
        """Add sum_p c_p * C(alpha_p, beta_p) into the slot of generator u_p."""
        u = np.asarray(u)
        h = np.broadcast_to(np.asarray(h, dtype=float), u.shape)
        keep = (h > 0.0) & (c != 0.0)
        if not keep.all():
            if not keep.any():
                return
            alpha, beta, u, h, c = alpha[keep], beta[keep], u[keep], h[keep], c[keep]
        at = _rowmul(alpha, self.V[u]) * c[:, None]
        bt = _colmul(self.Vinv[u], beta)
        outer = at[:, :, None] * bt[:, None, :]
        # rows mostly share a few (generator, duration) pairs: sum within each
        # pair first, then weight by that pair's kernel once
        hu, hinv = np.unique(h, return_inverse=True)
        code = hinv.reshape(-1) * self.U + u
        order = np.argsort(code, kind="stable")
        code = code[order]
        first = np.flatnonzero(np.r_[True, code[1:] != code[:-1]])
        summed = np.add.reduceat(outer[order], first, axis=0)
        keys = code[first]
        ku = keys % self.U
        phi = self._phi(self.lam[ku], hu[keys // self.U][:, None, None])
        np.add.at(self.acc, ku, summed * phi)

    def integrals(self):
        """Accumulated C matrices, one per generator, shape (U, n, n)."""
        Vt = np.transpose(self.V, (0, 2, 1))
        Vinvt = np.transpose(self.Vinv, (0, 2, 1))
        return np.real(Vinvt @ self.acc @ Vt)


class ExpmBank:
    """Slow but robust twin of EigenBank built on scipy's Pade expm."""

    def __init__(self, mats):
        mats = np.asarray(mats, dtype=float)
        self.mats = mats
        self.U, self.n = mats.shape[0], mats.shape[1]
        self.ok = True
        self.acc = np.zeros((self.U, self.n, self.n))
        self._cache = {}

    def expm(self, u, h):
        key = (int(u), float(h))
        if key not in self._cache:
            if len(self._cache) > 512:
                self._cache.clear()
            self._cache[key] = expm(self.mats[u] * h)
        return self._cache[key]

    @staticmethod
    def _groups(u, h):
        h = np.broadcast_to(np.asarray(h, dtype=float), u.shape)
        pairs = np.stack([u.astype(float), h], axis=1)
        keys, inverse = np.unique(pairs, axis=0, return_inverse=True)
        for g, (k, hk) in enumerate(keys):
            yield int(k), float(hk), inverse.reshape(-1) == g

    def forward(self, alpha, u, h):
        out = np.empty_like(alpha)
        for k, hk, sel in self._groups(u, h):
            out[sel] = alpha[sel] @ self.expm(k, hk)
        return out

    def backward(self, beta, u, h):
        out = np.empty_like(beta)
        for k, hk, sel in self._groups(u, h):
            out[sel] = beta[sel] @ self.expm(k, hk).T
        return out

    def accumulate(self, alpha, beta, u, h, c):
        for k, hk, sel in self._groups(u, h):
            if hk <= 0.0:
                continue
            G = (alpha[sel] * c[sel, None]).T @ beta[sel]
            self.acc[k] += van_loan_integral(self.mats[k], G, hk)

    def integrals(self):
        return self.acc.copy()


def make_bank(mats):
    """EigenBank when the eigenbasis is well conditioned, ExpmBank otherwise."""
    bank = EigenBank(mats)
    if bank.ok:
        return bank
    return ExpmBank(mats)
