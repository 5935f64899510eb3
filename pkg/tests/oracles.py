"""Independent reference computations used as test oracles."""

from __future__ import annotations

import math

import numpy as np


def central_diff(f, arrays, eps=1e-5):
    """Central finite-difference gradient of scalar f() w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            up = f()
            arr[idx] = orig - eps
            down = f()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.abs(a) + np.abs(b))))


def logsumexp_ce(logits, targets):
    """Brute-force mean cross-entropy with explicit per-row log-sum-exp (math module)."""
    total = 0.0
    for row, t in zip(logits.tolist(), targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[t]
    return total / len(targets)


def logsumexp_ce_grad(logits, targets):
    rows = []
    for row, t in zip(logits.tolist(), targets):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        g = [math.exp(v - m) / z for v in row]
        g[t] -= 1.0
        rows.append(g)
    return np.array(rows) / len(targets)


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, one update per gradient in ``grads``."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def fofe_recursive(tokens, alpha, V):
    z = [0.0] * V
    for w in tokens:
        z = [alpha * x for x in z]
        z[w] += 1.0
    return np.array(z)
