"""Continuous time Bayesian networks.

Conditional intensity matrices, the network container, amalgamation into
a joint Markov process, competing-clocks forward sampling, complete-data
learning and exact EM by flattening.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import ctmc
from ._validation import check_positive, check_probability_vector, check_random_state
from .ctmc import DEFAULT_PSEUDO, EvidenceTrajectory, IntensityMatrix, Segment
from .exceptions import InputError, JointSizeError, NotConvergedWarning, ZeroEvidenceError

JOINT_SIZE_CAP = 4096


def _radix_strides(sizes):
    strides = np.ones(len(sizes), dtype=int)
    for i in range(len(sizes) - 2, -1, -1):
        strides[i] = strides[i + 1] * sizes[i + 1]
    return strides


@dataclass(frozen=True, eq=False)
class Cim:
    """One intensity matrix per instantiation of the parents.

    Parent instantiations are indexed mixed-radix in declared parent order
    with the last parent varying fastest.
    """

    variable: str
    parents: tuple
    parent_sizes: tuple
    matrices: np.ndarray
    toggle: bool = False

    def __post_init__(self):
        mats = np.array(self.matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        n_inst = int(np.prod(self.parent_sizes, dtype=int)) if self.parents else 1
        if len(self.parents) != len(self.parent_sizes):
            raise InputError(f"{self.variable}: parents and parent sizes differ in length")
        if mats.shape[0] != n_inst:
            raise InputError(
                f"{self.variable}: expected {n_inst} matrices, got {mats.shape[0]}")
        mats = np.stack([IntensityMatrix(m).rates for m in mats])
        mats.setflags(write=False)
        object.__setattr__(self, "parents", tuple(self.parents))
        object.__setattr__(self, "parent_sizes", tuple(int(s) for s in self.parent_sizes))
        object.__setattr__(self, "matrices", mats)

    @property
    def n(self):
        return self.matrices.shape[1]

    @property
    def n_instantiations(self):
        return self.matrices.shape[0]

    def index(self, parent_values):
        """Mixed-radix index of a parent instantiation."""
        strides = _radix_strides(self.parent_sizes) if self.parents else np.ones(0, int)
        return int(np.dot(strides, parent_values)) if self.parents else 0

    def __eq__(self, other):
        return (isinstance(other, Cim) and self.variable == other.variable
                and self.parents == other.parents and self.toggle == other.toggle
                and np.array_equal(self.matrices, other.matrices))


class CtbnModel:
    """Variables with finite state spaces, a (possibly cyclic) graph and CIMs.

    Parameters
    ----------
    sizes : dict
        Ordered mapping from variable name to number of states.
    cims : dict
        Mapping from variable name to its :class:`Cim`.
    initial : dict, optional
        Per-variable initial distributions; uniform where absent.
    """

    def __init__(self, sizes, cims, initial=None):
        self.sizes = dict(sizes)
        self.names = list(self.sizes)
        self.cims = {name: cims[name] for name in self.names}
        self.initial = {}
        for name in self.names:
            cim = self.cims[name]
            if cim.n != self.sizes[name]:
                raise InputError(f"{name}: CIM size {cim.n} != declared size {self.sizes[name]}")
            for par, size in zip(cim.parents, cim.parent_sizes):
                if par not in self.sizes:
                    raise InputError(f"{name}: unknown parent {par}")
                if self.sizes[par] != size:
                    raise InputError(f"{name}: parent {par} size mismatch")
            if self.sizes[name] < 1:
                raise InputError(f"{name}: variables need at least one state")
        for name, p in (initial or {}).items():
            self.initial[name] = check_probability_vector(p, self.sizes[name], f"initial {name}")
        self._index = {name: i for i, name in enumerate(self.names)}

    # ---------------------------------------------------------- structure
    @property
    def edges(self):
        return [(p, name) for name in self.names for p in self.cims[name].parents]

    def parents(self, name):
        return self.cims[name].parents

    def children(self, name):
        return [c for c in self.names if name in self.cims[c].parents]

    @property
    def joint_size(self):
        return int(np.prod([self.sizes[n] for n in self.names], dtype=object))

    def initial_distribution(self, name):
        if name in self.initial:
            return self.initial[name]
        return np.full(self.sizes[name], 1.0 / self.sizes[name])

    def joint_initial(self):
        p = np.ones(1)
        for name in self.names:
            p = np.outer(p, self.initial_distribution(name)).ravel()
        return p

    def with_cims(self, cims):
        new = dict(self.cims)
        new.update(cims)
        return CtbnModel(self.sizes, new, self.initial)

    def joint_states(self):
        """All joint assignments, shape (N, n_vars), last variable fastest."""
        sizes = [self.sizes[n] for n in self.names]
        grids = np.indices(sizes).reshape(len(sizes), -1).T
        return grids

    def encode(self, values):
        strides = _radix_strides([self.sizes[n] for n in self.names])
        return int(np.dot(strides, values))

    def parent_indices(self, states):
        """Parent-instantiation index of each variable for each joint row."""
        out = np.zeros(states.shape, dtype=int)
        for i, name in enumerate(self.names):
            cim = self.cims[name]
            if cim.parents:
                cols = [self._index[p] for p in cim.parents]
                out[:, i] = states[:, cols] @ _radix_strides(cim.parent_sizes)
        return out

    def __eq__(self, other):
        return (isinstance(other, CtbnModel) and self.sizes == other.sizes
                and all(self.cims[n] == other.cims[n] for n in self.names)
                and self.initial.keys() == other.initial.keys()
                and all(np.array_equal(self.initial[k], other.initial[k]) for k in self.initial))


@dataclass(frozen=True)
class JointTrajectory:
    """Initial joint assignment plus single-variable change events."""

    names: tuple
    initial: tuple
    times: np.ndarray
    variables: np.ndarray
    values: np.ndarray
    horizon: float

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if np.any(np.diff(t) <= 0):
            raise InputError("event times must be strictly increasing")
        if len(t) and (t[0] < 0 or t[-1] > self.horizon):
            raise InputError("events must lie within [0, horizon]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "variables", np.asarray(self.variables, dtype=int))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=int))

    def states(self):
        """Joint value rows after each event, starting with the initial row."""
        rows = [np.array(self.initial, dtype=int)]
        for v, x in zip(self.variables, self.values):
            r = rows[-1].copy()
            if r[v] == x:
                raise InputError("each event must change its variable's value")
            r[v] = x
            rows.append(r)
        return np.array(rows)

    def to_ctmc(self, model):
        """The same path as a trajectory of the amalgamated process."""
        rows = self.states()
        strides = _radix_strides([model.sizes[n] for n in model.names])
        return ctmc.Trajectory(rows @ strides, self.times, self.horizon)

    def variable_path(self, name):
        """(states, jump_times) of a single variable."""
        i = self.names.index(name)
        sel = self.variables == i
        return (np.concatenate([[self.initial[i]], self.values[sel]]).astype(int),
                self.times[sel])


@dataclass
class ConditionalSuffStats:
    """Per variable: T[u, x] dwell and M[u, x, x'] transition totals."""

    T: dict
    M: dict

    @classmethod
    def zeros(cls, model):
        T, M = {}, {}
        for name in model.names:
            cim = model.cims[name]
            T[name] = np.zeros((cim.n_instantiations, cim.n))
            M[name] = np.zeros((cim.n_instantiations, cim.n, cim.n))
        return cls(T, M)

    def __add__(self, other):
        return ConditionalSuffStats({k: v + other.T[k] for k, v in self.T.items()},
                                    {k: v + other.M[k] for k, v in self.M.items()})

    def variable(self, name, u=0):
        return ctmc.SufficientStatistics(self.T[name][u], self.M[name][u])


# ---------------------------------------------------------- amalgamation


def _single_changes(model):
    """Index arrays (src, dst, var, u, x, x') for every single-variable move."""
    states = model.joint_states()
    uidx = model.parent_indices(states)
    strides = _radix_strides([model.sizes[n] for n in model.names])
    codes = states @ strides
    out = []
    for i, name in enumerate(model.names):
        n = model.sizes[name]
        x = states[:, i]
        for delta in range(1, n):
            xn = (x + delta) % n
            dst = codes + (xn - x) * strides[i]
            out.append((codes, dst, np.full(len(codes), i), uidx[:, i], x, xn))
    if not out:
        e = np.zeros(0, int)
        return e, e, e, e, e, e
    return tuple(np.concatenate(col) for col in zip(*out))


def amalgamate(model, cap=JOINT_SIZE_CAP):
    """Joint intensity matrix; simultaneous changes get rate exactly 0."""
    N = model.joint_size
    if N > cap:
        sizes = " x ".join(f"{n}({model.sizes[n]})" for n in model.names)
        raise JointSizeError(f"joint state space {sizes} = {N} exceeds cap {cap}")
    src, dst, var, u, x, xn = _single_changes(model)
    Q = np.zeros((N, N))
    for i, name in enumerate(model.names):
        sel = var == i
        Q[src[sel], dst[sel]] = model.cims[name].matrices[u[sel], x[sel], xn[sel]]
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return IntensityMatrix(Q)


# -------------------------------------------------------------- sampling


def forward_sample(model, horizon, seed=None, initial=None):
    """Competing-clocks simulation of the whole network."""
    horizon = check_positive(horizon, "horizon")
    rng = check_random_state(seed)
    names = model.names
    if initial is None:
        values = [int(rng.choice(model.sizes[n], p=model.initial_distribution(n)))
                  for n in names]
    else:
        values = [int(v) for v in initial]
    idx = {n: i for i, n in enumerate(names)}
    par_idx = [[idx[p] for p in model.cims[n].parents] for n in names]
    strides = [_radix_strides(model.cims[n].parent_sizes) for n in names]
    mats = [model.cims[n].matrices for n in names]
    children = [[idx[c] for c in model.children(n)] for n in names]

    def row(i):
        u = int(np.dot(strides[i], [values[j] for j in par_idx[i]])) if par_idx[i] else 0
        return mats[i][u][values[i]]

    def draw(i, now):
        q = -row(i)[values[i]]
        return now + rng.exponential(1.0 / q) if q > 0 else np.inf

    clock = np.array([draw(i, 0.0) for i in range(len(names))])
    init = tuple(values)
    times, variables, new_values = [], [], []
    while True:
        i = int(np.argmin(clock))
        t = clock[i]
        if t >= horizon:
            break
        if model.sizes[names[i]] == 2:
            values[i] = 1 - values[i]
        else:
            r = row(i).copy()
            r[values[i]] = 0.0
            c = np.cumsum(r)
            values[i] = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(r) - 1)
        times.append(t)
        variables.append(i)
        new_values.append(values[i])
        for j in [i] + children[i]:
            clock[j] = draw(j, t)
    return JointTrajectory(tuple(names), init, np.array(times), np.array(variables, dtype=int),
                           np.array(new_values, dtype=int), float(horizon))


# --------------------------------------------------------------- learning


def ctbn_suff_stats(model, traj):
    """Conditional dwell times and transition counts from a complete trajectory."""
    if tuple(traj.names) != tuple(model.names):
        unknown = set(traj.names) - set(model.names)
        raise InputError(f"trajectory variables do not match the model: {sorted(unknown)}")
    css = ConditionalSuffStats.zeros(model)
    rows = traj.states()
    uidx = model.parent_indices(rows)
    edges = np.concatenate([[0.0], traj.times, [traj.horizon]])
    dwell = np.diff(edges)
    for i, name in enumerate(model.names):
        np.add.at(css.T[name], (uidx[:, i], rows[:, i]), dwell)
        sel = traj.variables == i
        ev = np.flatnonzero(sel)
        np.add.at(css.M[name], (uidx[ev, i], rows[ev, i], rows[ev + 1, i]), 1.0)
    return css


def _toggle_rate(T, M, pseudo):
    return (M.sum() + pseudo) / (T.sum() + pseudo)


def ctbn_mle(css, model, pseudo=DEFAULT_PSEUDO):
    """Per-variable CIMs maximising the (pseudo-count regularised) likelihood."""
    cims = {}
    for name in model.names:
        cim = model.cims[name]
        mats = []
        for u in range(cim.n_instantiations):
            if cim.toggle:
                r = _toggle_rate(css.T[name][u], css.M[name][u], pseudo)
                mats.append(np.array([[-r, r], [r, -r]]))
            else:
                mats.append(ctmc.mle_complete(css.variable(name, u), pseudo).rates)
        cims[name] = Cim(name, cim.parents, cim.parent_sizes, np.stack(mats), cim.toggle)
    return cims


def ctbn_loglik(model, css):
    """Sum over variables and parent instantiations of the complete-data term."""
    total = 0.0
    for name in model.names:
        cim = model.cims[name]
        for u in range(cim.n_instantiations):
            ll = ctmc.loglik_complete(IntensityMatrix(cim.matrices[u]), css.variable(name, u))
            if ll == -np.inf:
                return -np.inf
            total += ll
    return total


def ctbn_log_prior(model, pseudo=DEFAULT_PSEUDO):
    total = 0.0
    for name in model.names:
        cim = model.cims[name]
        for m in cim.matrices:
            if cim.toggle:
                r = m[0, 1]
                with np.errstate(divide="ignore"):
                    total += pseudo * np.log(r) - pseudo * r
            else:
                total += ctmc.log_prior(IntensityMatrix(m), pseudo)
    return float(total)


# ---------------------------------------------------------------- evidence


def observe(model, traj, observed):
    """Evidence over the joint space revealing only the ``observed`` variables.

    Segments break wherever an observed variable changes; each constrains
    the joint state to the assignments matching the observed values.
    """
    observed = list(observed)
    cols = [model.names.index(n) for n in observed]
    states = model.joint_states()
    rows = traj.states()
    edges = np.concatenate([[0.0], traj.times, [traj.horizon]])
    segs = []
    cur_start, cur_vals = 0.0, tuple(rows[0, cols])
    for k in range(len(traj.times)):
        vals = tuple(rows[k + 1, cols])
        if vals != cur_vals:
            t = edges[k + 1]
            segs.append((cur_vals, cur_start, t - cur_start))
            cur_start, cur_vals = t, vals
    segs.append((cur_vals, cur_start, traj.horizon - cur_start))
    out = []
    for vals, start, dur in segs:
        match = np.all(states[:, cols] == np.array(vals), axis=1)
        out.append(Segment(tuple(np.flatnonzero(match)), start, dur))
    return EvidenceTrajectory(model.joint_size, tuple(out), traj.horizon)


def _project(model, ss):
    """Map joint expected statistics onto per-variable conditional ones."""
    css = ConditionalSuffStats.zeros(model)
    states = model.joint_states()
    uidx = model.parent_indices(states)
    for i, name in enumerate(model.names):
        np.add.at(css.T[name], (uidx[:, i], states[:, i]), ss.T)
    src, dst, var, u, x, xn = _single_changes(model)
    for i, name in enumerate(model.names):
        sel = var == i
        np.add.at(css.M[name], (u[sel], x[sel], xn[sel]), ss.M[src[sel], dst[sel]])
    return css


@dataclass
class CtbnEMResult:
    model: CtbnModel
    log_likelihoods: list = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0


def exact_em(model, evidence, cfg=None, cap=JOINT_SIZE_CAP):
    """EM with an exact E step on the amalgamated process.

    ``evidence`` is one joint-space :class:`EvidenceTrajectory` or a list of
    them.  The objective tracked is log-evidence plus the pseudo-count prior.
    """
    cfg = cfg or ctmc.EMConfig()
    evs = [evidence] if isinstance(evidence, EvidenceTrajectory) else list(evidence)
    history = []
    for it in range(cfg.max_iter + 1):
        Q = amalgamate(model, cap)
        p0 = model.joint_initial()
        total = ctmc.SufficientStatistics.zeros(Q.n)
        ll = 0.0
        for ev in evs:
            ss, lz = ctmc._estep_one(Q, ev, p0)
            if ss is None:
                raise ZeroEvidenceError("evidence has zero probability under the model")
            total = total + ss
            ll += lz
        history.append(ll + ctbn_log_prior(model, cfg.pseudo))
        if it > 0:
            prev, cur = history[-2], history[-1]
            if np.isfinite(prev) and cur - prev <= cfg.tol * abs(prev):
                return CtbnEMResult(model, history, True, it)
        if it == cfg.max_iter:
            break
        model = model.with_cims(ctbn_mle(_project(model, total), model, cfg.pseudo))
    warnings.warn(f"EM stopped after {cfg.max_iter} iterations", NotConvergedWarning)
    return CtbnEMResult(model, history, False, cfg.max_iter)
