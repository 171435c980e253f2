"""Window labelling, ROC analysis and host-identification confusion matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.metrics import auc, roc_curve

from .exceptions import InputError


def label_windows(ground_truth, windows):
    """1 for windows intersecting an injected interval, 0 otherwise.

    Windows and intervals are half-open, so touching at an endpoint is not
    an intersection.  Skipped windows are left out; the returned mask tells
    which input windows were kept.
    """
    keep = np.array([not getattr(w, "skipped", False) for w in windows], dtype=bool)
    labels = []
    for w in windows:
        if getattr(w, "skipped", False):
            continue
        a, b = w.start, w.start + w.length
        labels.append(int(any(s < b and a < e for s, e in ground_truth.intervals)))
    return np.array(labels, dtype=int), keep


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def table(self):
        lines = ["false_positive_rate,true_positive_rate,threshold"]
        for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
            lines.append(f"{f!r},{t!r},{float(th)!r}")
        return "\n".join(lines) + "\n"

    def to_svg(self, size=320, title="ROC"):
        """Minimal standalone SVG rendering of the curve."""
        pad = 30
        span = size - 2 * pad
        pts = " ".join(f"{pad + f * span:.2f},{size - pad - t * span:.2f}"
                       for f, t in zip(self.fpr, self.tpr))
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="black"/>'
            f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#bbb"/>'
            f'<polyline points="{pts}" fill="none" stroke="#1f5fbf" stroke-width="2"/>'
            f'<text x="{pad}" y="{pad - 8}" font-size="12">{title} (AUC {self.auc:.3f})</text>'
            "</svg>\n")


def roc_auc(scores, labels, polarity="low"):
    """ROC curve over every threshold with trapezoidal area.

    ``polarity="low"`` means small scores are anomalous (log-likelihoods);
    ``"high"`` means large scores are (counts).  Tied scores share a single
    threshold, so ties contribute half credit.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise InputError("scores and labels differ in length")
    if polarity not in ("low", "high"):
        raise InputError("polarity must be 'low' or 'high'")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise InputError("ROC analysis needs at least one positive and one negative label")
    if np.any(np.isnan(scores)):
        raise InputError("scores contain NaN")
    s = -scores if polarity == "low" else scores
    # sklearn rejects infinities; map them past the finite range, preserving order
    finite = s[np.isfinite(s)]
    lo, hi = (finite.min(), finite.max()) if len(finite) else (0.0, 0.0)
    s = np.where(s == np.inf, hi + 1.0, np.where(s == -np.inf, lo - 1.0, s))
    fpr, tpr, thr = roc_curve(labels, s, drop_intermediate=False)
    return RocResult(fpr, tpr, thr, float(auc(fpr, tpr)))


def confusion_matrix(segment_scores, owners):
    """Row-normalised host-identification matrix.

    ``segment_scores[i, j]`` is the log-likelihood of segment ``i`` under
    model ``j``; ``owners[i]`` is its true host.  Entry (a, b) is the share
    of host a's segments whose best model is b; ties go to the lowest index.
    """
    S = np.asarray(segment_scores, dtype=float)
    owners = np.asarray(owners, dtype=int)
    if S.ndim != 2 or S.shape[0] != len(owners):
        raise InputError("segment_scores must be (n_segments, n_models)")
    J = S.shape[1]
    if np.any((owners < 0) | (owners >= J)):
        raise InputError("segment owner outside the model range")
    best = np.argmax(np.where(np.isnan(S), -np.inf, S), axis=1)
    C = np.zeros((J, J))
    for host in range(J):
        mine = owners == host
        if not mine.any():
            raise InputError(f"no segments for host {host}")
        C[host] = np.bincount(best[mine], minlength=J) / mine.sum()
    return C
