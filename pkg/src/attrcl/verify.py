"""Independent reference implementations used to check the fast code paths.

Nothing in here imports the modules it checks: the oracles work on plain
Python floats and numpy arrays, written as direct loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    step: float
    precision: str = "float64"
    tolerance: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def fd_gradient(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point``."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(x))
        flat[i] = orig - step
        fm = float(fn(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _unit(row):
    norm = math.sqrt(sum(v * v for v in row))
    if norm == 0.0:
        raise ValueError("zero-norm row")
    return [v / norm for v in row]


def naive_info_nce(anchors, positives, tau: float) -> float:
    """Per-row loop form of the symmetric doublet InfoNCE loss."""
    anchors = [list(map(float, r)) for r in np.asarray(anchors)]
    positives = [list(map(float, r)) for r in np.asarray(positives)]
    b = len(anchors)
    if b == 0 or b != len(positives):
        raise ValueError("need equally many anchors and positives")
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = [_unit(r) for r in anchors + positives]
    total = 0.0
    for i in range(2 * b):
        pos = i + b if i < b else i - b
        sims = {}
        for j in range(2 * b):
            if j != i:
                sims[j] = sum(p * q for p, q in zip(z[i], z[j])) / tau
        m = max(sims.values())
        denom = sum(math.exp(s - m) for s in sims.values())
        total += math.log(math.exp(sims[pos] - m) / denom)
    return -total / (2 * b)


def naive_cosine(a, b) -> float:
    ua, ub = _unit([float(v) for v in a]), _unit([float(v) for v in b])
    return sum(x * y for x, y in zip(ua, ub))


def naive_triplet(anchor, positive, negative, margin: float) -> float:
    return max(0.0, margin + naive_cosine(anchor, negative) - naive_cosine(anchor, positive))


def naive_matvec(weight, vec, bias=None) -> np.ndarray:
    weight = np.asarray(weight, dtype=np.float64)
    out = np.zeros(weight.shape[0])
    for i in range(weight.shape[0]):
        acc = 0.0 if bias is None else float(bias[i])
        for j in range(weight.shape[1]):
            acc += weight[i, j] * vec[j]
        out[i] = acc
    return out


def naive_gate_mlp(w1, b1, w2, b2, pooled, attr) -> np.ndarray:
    """pooled * sigmoid(W2 relu(W1 [pooled; attr] + b1) + b2), by loops."""
    u = list(pooled) + list(attr)
    hidden = [max(0.0, v) for v in naive_matvec(w1, u, b1)]
    logits = naive_matvec(w2, hidden, b2)
    return np.array([p / (1.0 + math.exp(-g)) for p, g in zip(pooled, logits)])


def naive_spatial_attention(reduced, attr):
    """(D, h, w) map and (D,) vector -> (h, w) softmax weights, (D,) pooled."""
    reduced = np.asarray(reduced, dtype=np.float64)
    d, h, w = reduced.shape
    scores = [[sum(reduced[c, y, x] * attr[c] for c in range(d)) / math.sqrt(d)
               for x in range(w)] for y in range(h)]
    m = max(max(row) for row in scores)
    ex = [[math.exp(s - m) for s in row] for row in scores]
    z = sum(sum(row) for row in ex)
    amap = np.array([[v / z for v in row] for row in ex])
    pooled = np.array([sum(reduced[c, y, x] * amap[y, x] for y in range(h) for x in range(w))
                       for c in range(d)])
    return amap, pooled


def closed_form_ema(theta0, theta_s, beta: float, steps: int):
    """Teacher value after ``steps`` momentum updates toward a fixed student."""
    bt = beta ** steps
    return bt * np.asarray(theta0, dtype=np.float64) + (1.0 - bt) * np.asarray(theta_s, dtype=np.float64)


def naive_average_precision(relevance) -> float:
    hits = 0
    total = 0.0
    for k, r in enumerate(relevance, start=1):
        if r:
            hits += 1
            total += hits / k
    return total / hits if hits else 0.0


def brute_force_map(embeddings, ids, labels) -> float:
    """Sort each query's gallery by (-cosine, id) with Python's sort and average AP."""
    emb = [list(map(float, e)) for e in np.asarray(embeddings)]
    aps = []
    for q in range(len(ids)):
        gallery = [(-naive_cosine(emb[q], emb[g]), ids[g], labels[g] == labels[q])
                   for g in range(len(ids)) if g != q]
        gallery.sort(key=lambda t: (t[0], t[1]))
        aps.append(naive_average_precision([t[2] for t in gallery]))
    return sum(aps) / len(aps)


def random_ranking_map(labels, n_perm: int = 200, seed: int = 0) -> float:
    """Monte-Carlo mAP of uniformly random gallery orderings (each query excluded
    from its own gallery)."""
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(seed)
    n = len(labels)
    aps = []
    for _ in range(n_perm):
        q = int(rng.integers(n))
        gallery = np.delete(np.arange(n), q)
        rng.shuffle(gallery)
        aps.append(naive_average_precision(labels[gallery] == labels[q]))
    return float(np.mean(aps))
