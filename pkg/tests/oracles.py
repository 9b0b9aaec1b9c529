"""Independent reference implementations the library is checked against.

These are written for clarity, not speed: plain loops, float64, no shared code
with the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i][t]) * float(b[t][j])
            out[i][j] = acc
    return np.array(out)


def layer_norm_formula(row, gain, bias, eps):
    row = [float(x) for x in row]
    mu = sum(row) / len(row)
    var = sum((x - mu) ** 2 for x in row) / len(row)
    return np.array([(x - mu) / math.sqrt(var + eps) * g + b for x, g, b in zip(row, gain, bias)])


def cross_entropy_lse(logits, targets, mask):
    total, count = 0.0, 0
    for row, t, m in zip(logits, targets, mask):
        if not m:
            continue
        top = max(float(x) for x in row)
        lse = top + math.log(sum(math.exp(float(x) - top) for x in row))
        total += lse - float(row[t])
        count += 1
    return total / count


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros(x.shape, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def gradient_mismatches(analytic, numeric, rel_tol=1e-3, abs_floor=1e-6):
    """Entries failing |a - n| <= max(abs_floor, rel_tol * max(|a|, |n|))."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    allowed = np.maximum(abs_floor, rel_tol * np.maximum(np.abs(a), np.abs(n)))
    return np.argwhere(np.abs(a - n) > allowed)


def adamw_reference(x0, grad_fn, steps, lr, b1, b2, eps, wd):
    """Scalar AdamW with bias correction and decoupled weight decay."""
    x, m, v = float(x0), 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * (mhat / (math.sqrt(vhat) + eps) + wd * x)
        path.append(x)
    return path


# --- metrics -------------------------------------------------------------------


def count_slot_accuracy(preds, golds, include_none):
    hit = total = 0
    for key in golds:
        if not include_none and golds[key] == "none":
            continue
        total += 1
        if preds[key] == golds[key]:
            hit += 1
    return 1.0 if total == 0 else hit / total


def set_equality_jga(preds, golds):
    turns = sorted({k[:2] for k in golds})
    if not turns:
        return 1.0
    good = 0
    for turn in turns:
        p = {(k, preds[k]) for k in golds if k[:2] == turn}
        g = {(k, golds[k]) for k in golds if k[:2] == turn}
        good += p == g
    return good / len(turns)


def count_taxonomy(preds, golds):
    out = {"partial": 0, "over": 0, "other": 0}
    for key, g in golds.items():
        p = preds[key]
        if p == g:
            continue
        if g != "none" and p == "none":
            out["partial"] += 1
        elif g == "none" and p != "none":
            out["over"] += 1
        else:
            out["other"] += 1
    return out


# --- clustering ----------------------------------------------------------------


def all_partitions(n: int, k: int):
    """Every labelling of ``n`` points into exactly ``k`` non-empty clusters."""
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) == k and labels[0] == 0:
            # canonical form: first appearance order 0, 1, 2, ...
            seen = []
            for c in labels:
                if c not in seen:
                    seen.append(c)
            if seen == list(range(k)):
                yield labels


def partition_sse(x: np.ndarray, labels) -> float:
    total = 0.0
    for c in set(labels):
        members = x[[i for i, l in enumerate(labels) if l == c]]
        total += float(((members - members.mean(axis=0)) ** 2).sum())
    return total


def best_partition(x: np.ndarray, k: int):
    """Minimum within-cluster SSE over every partition, as (sse, canonical labels)."""
    return min((partition_sse(x, labels), labels) for labels in all_partitions(len(x), k))


def canonical(labels) -> tuple[int, ...]:
    mapping, out = {}, []
    for c in labels:
        mapping.setdefault(c, len(mapping))
        out.append(mapping[c])
    return tuple(out)


def nearest_linear_scan(vec, centroids) -> int:
    best, best_d = 0, float("inf")
    for i, c in enumerate(centroids):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(vec, c))
        if d < best_d:
            best, best_d = i, d
    return best


def cosine_loop(a, b) -> float:
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return 0.0 if na == 0 or nb == 0 else dot / (na * nb)


def acs_pairwise(features, assignments, test_slots, test_clusters):
    """Train ACS over within-cluster train pairs, test ACS over (test, member) pairs."""
    train = list(assignments)
    tr = [cosine_loop(features[a], features[b])
          for i, a in enumerate(train) for b in train[i + 1:]
          if assignments[a] == assignments[b]]
    te = [cosine_loop(features[s], features[m])
          for s in test_slots for m in train if assignments[m] == test_clusters[s]]
    mean = lambda xs: sum(xs) / len(xs) if xs else float("nan")  # noqa: E731
    return mean(tr), mean(te)
