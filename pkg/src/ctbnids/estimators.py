"""Estimator-style wrappers (fit / decision_function / predict) for the detectors.

Inputs are traces rather than feature matrices, so the wrappers follow the
scikit-learn conventions (constructor stores hyper-parameters only,
learned state ends in ``_``, ``get_params``/``set_params``/``clone`` work)
but do their own input checking.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import hids, nids
from ._validation import check_positive, check_positive_int, substream
from .exceptions import InputError


def check_traffic_trace(X):
    if not isinstance(X, nids.TrafficTrace):
        raise InputError(f"expected a TrafficTrace, got {type(X).__name__}")
    return X


def check_process_traces(X):
    if isinstance(X, hids.ProcessTrace):
        X = [X]
    X = list(X)
    if not X or not all(isinstance(x, hids.ProcessTrace) for x in X):
        raise InputError("expected a non-empty sequence of ProcessTrace")
    return X


def _seed(random_state):
    if random_state is None:
        return int(np.random.SeedSequence().entropy % (2 ** 63))
    return int(random_state)


def _threshold(scores, contamination, low_is_anomalous):
    s = np.asarray(scores, dtype=float)
    s = s[np.isfinite(s)]
    if not len(s):
        return -np.inf if low_is_anomalous else np.inf
    q = contamination if low_is_anomalous else 1.0 - contamination
    return float(np.quantile(s, q))


class TrafficAnomalyDetector(BaseEstimator):
    """Window-level network anomaly detector backed by the hierarchical CTBN.

    ``fit`` picks the ``n_ports`` busiest ports (plus a catch-all bucket when
    ``other_bucket`` is set), trains by particle-filter EM and calibrates
    ``threshold_`` so that a ``contamination`` share of training windows
    would be flagged.
    """

    def __init__(self, n_global=4, n_hidden=8, n_ports=9, other_bucket=True, n_iter=10,
                 n_particles=100, resample_every=50.0, window=50.0, pseudo=1e-3,
                 contamination=0.02, random_state=0):
        self.n_global = n_global
        self.n_hidden = n_hidden
        self.n_ports = n_ports
        self.other_bucket = other_bucket
        self.n_iter = n_iter
        self.n_particles = n_particles
        self.resample_every = resample_every
        self.window = window
        self.pseudo = pseudo
        self.contamination = contamination
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_traffic_trace(X)
        check_positive_int(self.n_ports, "n_ports")
        check_positive(self.window, "window")
        seed = _seed(self.random_state)
        ports = X.top_ports(self.n_ports)
        if self.other_bucket:
            ports = ports + [nids.OTHER_PORT]
        if not ports:
            raise InputError("training trace has no events and no catch-all port")
        init = nids.build_traffic_model(ports, self.n_global, self.n_hidden,
                                        seed=substream(seed, "nids-init"))
        cfg = nids.RbpfConfig(n_iter=self.n_iter, n_particles=self.n_particles,
                              resample_every=self.resample_every,
                              seed=int(substream(seed, "nids-em").integers(2 ** 63)),
                              pseudo=self.pseudo)
        res = nids.rbpf_em(init, X, cfg)
        self.model_ = res.model
        self.log_likelihoods_ = list(res.log_likelihoods)
        train_scores = self.decision_function(X)
        self.threshold_ = _threshold(train_scores, self.contamination, True)
        return self

    def score_windows(self, X):
        check_is_fitted(self, "model_")
        X = check_traffic_trace(X)
        seed = _seed(self.random_state)
        return nids.score_windows(self.model_, X, self.window, self.n_particles,
                                  seed=substream(seed, "nids-score"))

    def decision_function(self, X):
        """Window log-likelihoods (NaN for windows without events); low is anomalous."""
        return np.array([np.nan if w.skipped else w.log_likelihood for w in self.score_windows(X)])

    def predict(self, X):
        """1 for anomalous windows, 0 for normal ones, -1 for skipped ones."""
        check_is_fitted(self, "threshold_")
        s = self.decision_function(X)
        return np.where(np.isnan(s), -1, (s < self.threshold_).astype(int))


class SyscallAnomalyDetector(BaseEstimator):
    """Process-level detector: per-call (or raw) log-likelihood under a learned model."""

    def __init__(self, m=2, vocabulary=None, max_iter=50, tol=1e-6, pseudo=1e-3,
                 per_event=True, contamination=0.02, random_state=0):
        self.m = m
        self.vocabulary = vocabulary
        self.max_iter = max_iter
        self.tol = tol
        self.pseudo = pseudo
        self.per_event = per_event
        self.contamination = contamination
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_process_traces(X)
        seed = _seed(self.random_state)
        vocab = tuple(self.vocabulary) if self.vocabulary is not None else (
            hids.DEFAULT_VOCABULARY + (hids.OTHER,))
        init = hids.build_syscall_model(vocab, self.m, seed=substream(seed, "hids-init"))
        res = hids.hids_em(init, X, hids.HidsEMConfig(self.max_iter, self.tol, self.pseudo))
        self.model_ = res.model
        self.log_likelihoods_ = list(res.log_likelihoods)
        self.threshold_ = _threshold(self.decision_function(X), self.contamination, True)
        return self

    def score_processes(self, X):
        check_is_fitted(self, "model_")
        return hids.score_processes(self.model_, check_process_traces(X))

    def decision_function(self, X):
        attr = "per_event_log_likelihood" if self.per_event else "log_likelihood"
        return np.array([getattr(s, attr) for s in self.score_processes(X)])

    score_samples = decision_function

    def predict(self, X):
        check_is_fitted(self, "threshold_")
        return (self.decision_function(X) < self.threshold_).astype(int)


class StideDetector(BaseEstimator):
    """Sequence-database baseline; higher scores are more anomalous."""

    def __init__(self, k=5, h=50):
        self.k = k
        self.h = h

    def fit(self, X, y=None):
        X = check_process_traces(X)
        if check_positive_int(self.h, "h") < check_positive_int(self.k, "k"):
            raise InputError("locality frame h must be at least k")
        self.database_ = hids.StideDatabase(X, self.k)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "database_")
        return np.array([self.database_.score(x, self.h) for x in check_process_traces(X)])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


class ConnectionCountDetector(BaseEstimator):
    """Counts connection openings per window; nothing to learn."""

    def __init__(self, window=50.0):
        self.window = window

    def fit(self, X=None, y=None):
        check_positive(self.window, "window")
        self.fitted_ = True
        return self

    def score_windows(self, X):
        return nids.connection_count_baseline(check_traffic_trace(X), self.window)

    def decision_function(self, X):
        return np.array([np.nan if w.skipped else w.log_likelihood for w in self.score_windows(X)])
