"""Slow, obviously-correct reference implementations used by the tests."""
import math

import numpy as np


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        return None
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def dense_objective(w, b, X, y, cw, lam):
    """Direct per-row sum, no blocking, no log-sum-exp helpers."""
    X = np.asarray(X.todense() if hasattr(X, "todense") else X, dtype=float)
    total = 0.0
    for xi, yi in zip(X, y):
        z = b + float(xi @ w)
        loss = math.log1p(math.exp(-z)) if yi == 1 else math.log1p(math.exp(z))
        total += (cw[0] if yi == 1 else cw[1]) * loss
    return total / len(y) + lam * float(np.abs(w).sum())


def grid_objective_min(X, y, cw, lam, axes):
    """Exhaustive minimum of the objective over a Cartesian grid; the last axis may be the intercept.

    ``axes`` is a list of 1-D arrays, one per weight (plus an optional intercept axis,
    signalled by len(axes) == X.shape[1] + 1).
    """
    X = np.asarray(X.todense() if hasattr(X, "todense") else X, dtype=float)
    d = X.shape[1]
    has_b = len(axes) == d + 1
    mesh = np.meshgrid(*axes, indexing="ij")
    W = np.stack([m.ravel() for m in mesh[:d]], axis=1)
    B = mesh[d].ravel() if has_b else np.zeros(len(W))
    c = np.where(np.asarray(y) == 1, cw[0], cw[1])
    best = (np.inf, None)
    for lo in range(0, len(W), 200000):
        w = W[lo:lo + 200000]
        z = w @ X.T + B[lo:lo + 200000, None]
        sgn = np.where(np.asarray(y) == 1, -1.0, 1.0)
        f = (c * np.logaddexp(0.0, sgn * z)).mean(axis=1) + lam * np.abs(w).sum(axis=1)
        k = int(np.argmin(f))
        if f[k] < best[0]:
            best = (float(f[k]), np.r_[w[k], B[lo + k]] if has_b else w[k])
    return best


def doubled_pair_count(auc, labels):
    """Recover 2*U (an integer) from an AUC value; exact for the sizes tested."""
    n_pos = sum(1 for y in labels if y == 1)
    m = n_pos * (len(labels) - n_pos)
    return round(auc * m * 2), m
