"""Shared test oracles: finite differences and brute-force ranking metrics.

Everything here is deliberately independent of the library's own code paths:
plain loops, direct definitions, no reuse of the functions under test.
"""

from __future__ import annotations

import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradient of scalar f(*arrays) wrt every coordinate."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            hi = f()
            a[idx] = orig - h
            lo = f()
            a[idx] = orig
            g[idx] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def finite_difference_at(f, array, idx, h=1e-5):
    """Central difference of scalar f() wrt one coordinate of array."""
    orig = array[idx]
    array[idx] = orig + h
    hi = f()
    array[idx] = orig - h
    lo = f()
    array[idx] = orig
    return (hi - lo) / (2.0 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(floor, abs(a) + abs(b))


def sweep_average_precision(scores, truth):
    """AP by direct definition: precision at each positive's own threshold."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    pos_scores = scores[truth]
    ap = 0.0
    for s in pos_scores:
        kept = scores >= s
        ap += truth[kept].sum() / kept.sum()
    return ap / len(pos_scores)


def pairwise_auroc(scores, truth):
    """AUROC as the exhaustive mean over positive/negative pairs."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    pos = scores[truth]
    neg = scores[~truth]
    wins = 0.0
    for p in pos:
        wins += (p > neg).sum() + 0.5 * (p == neg).sum()
    return wins / (len(pos) * len(neg))


def sweep_fpr_at_tpr(scores, truth, target=0.95):
    """FPR at the largest threshold reaching the target TPR, by full sweep."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    n_pos = truth.sum()
    n_neg = (~truth).sum()
    if target <= 0:
        return 0.0, np.inf
    best_tau = None
    for tau in sorted(set(scores.tolist()), reverse=True):
        tpr = (scores[truth] >= tau).sum() / n_pos
        if tpr >= target:
            best_tau = tau
            break
    fpr = (scores[~truth] >= best_tau).sum() / n_neg
    return fpr, best_tau
