"""Independent reference implementations used only by the tests.

These deliberately avoid the library's vectorised code paths: loops over
scalars, exhaustive enumeration, long iterative solves.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Max coordinate-wise relative error, with a floor on the denominator."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def scalar_forward(arch, d, out, hidden, params, x):
    """Loop-by-loop forward pass over the documented flat layout."""
    p = list(params)
    pos = 0

    def take(n):
        nonlocal pos
        chunk = p[pos:pos + n]
        pos += n
        return chunk

    if arch == "linear":
        W = take(out * d)
        b = take(out)
        return [sum(W[o * d + j] * x[j] for j in range(d)) + b[o] for o in range(out)]
    W1 = take(hidden * d)
    b1 = take(hidden)
    W2 = take(out * hidden)
    b2 = take(out)
    h = [math.tanh(sum(W1[i * d + j] * x[j] for j in range(d)) + b1[i]) for i in range(hidden)]
    return [sum(W2[o * hidden + i] * h[i] for i in range(hidden)) + b2[o] for o in range(out)]


# ---- CART ---------------------------------------------------------------

def brute_impurity(labels, kind):
    n = len(labels)
    if kind == "mse":
        mu = sum(labels) / n
        return sum((v - mu) ** 2 for v in labels) / n
    counts = {}
    for v in labels:
        counts[v] = counts.get(v, 0) + 1
    ps = [c / n for c in counts.values()]
    if kind == "gini":
        return 1.0 - sum(p * p for p in ps)
    return -sum(p * math.log(p) for p in ps)


def brute_best_split(X, y, kind):
    """Every (feature, midpoint) pair scored naively.

    Returns the lowest (feature, threshold) whose gain is within the tie
    tolerance of the maximum, or None when the maximum is not positive.
    """
    X = np.asarray(X)
    n, d = X.shape
    parent = brute_impurity(list(y), kind)
    scored = []
    for f in range(d):
        vals = sorted(set(X[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2.0
            left = [y[i] for i in range(n) if X[i, f] <= thr]
            right = [y[i] for i in range(n) if X[i, f] > thr]
            gain = parent - len(left) / n * brute_impurity(left, kind) - len(right) / n * brute_impurity(right, kind)
            scored.append((f, thr, gain))
    tol = 1e-12 * max(1.0, abs(parent))
    if not scored or max(g for _, _, g in scored) <= tol:
        return None
    top = max(g for _, _, g in scored)
    return next(s for s in scored if s[2] >= top - tol)


# ---- min-norm combination ----------------------------------------------

def grid_min_norm(g1, g2, step=1e-4):
    alphas = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    D = alphas[:, None] * g1[None, :] + (1 - alphas)[:, None] * g2[None, :]
    norms = np.linalg.norm(D, axis=1)
    return norms.min(), alphas[norms.argmin()]


# ---- surrogate ------------------------------------------------------------

def gd_surrogate(X, Y, ridge, steps=10_000):
    """Plain gradient descent on mean squared error + ridge for an affine map."""
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    H = A.T @ A / n + ridge * np.eye(d + 1)
    lr = 1.0 / np.linalg.eigvalsh(H).max()
    C = np.zeros((d + 1, Y.shape[1]))
    for _ in range(steps):
        C -= lr * (H @ C - A.T @ Y / n)
    return np.concatenate([C[:d].T.ravel(), C[d]])


# ---- boosting --------------------------------------------------------------

def reference_booster(X, y, rounds, lr, fit):
    """Textbook single-machine L2 boosting: returns (base, trees)."""
    base = float(np.mean(y))
    pred = np.full(len(y), base)
    trees = []
    for _ in range(rounds):
        t = fit(X, y - pred)
        trees.append(t)
        pred = pred + lr * t.predict_batch(X)
    return base, trees


# ---- KLRS -------------------------------------------------------------------

def klrs_best_action(stored_counts, target, y, n_classes):
    """Enumerate ignore / replace-class-c for every c; smallest KL wins, ignore on ties."""
    def kl(counts):
        total = sum(counts)
        out = 0.0
        for c in range(n_classes):
            p = counts[c] / total
            if p > 0:
                out += p * math.log(p / target[c])
        return out

    options = [("ignore", None, kl(stored_counts))]
    for c in range(n_classes):
        if stored_counts[c] == 0:
            continue
        cand = list(stored_counts)
        cand[c] -= 1
        cand[y] += 1
        options.append(("replace", c, kl(cand)))
    best = min(o[2] for o in options)
    for o in options:
        if o[2] <= best:
            return o[0], o[1], o[2]


def all_subsets(n):
    return itertools.chain.from_iterable(itertools.combinations(range(n), k) for k in range(n + 1))
