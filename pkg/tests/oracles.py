"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports sinklab internals beyond plain data, so the fast code
is checked against an independent formulation.
"""

import math

import numpy as np


def naive_matmul(A, B):
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    out = np.zeros((A.shape[0], B.shape[1]))
    for i in range(A.shape[0]):
        for j in range(B.shape[1]):
            s = 0.0
            for k in range(A.shape[1]):
                s += A[i, k] * B[k, j]
            out[i, j] = s
    return out


def target_loop(tokens, j):
    L, n = tokens.shape
    out = np.zeros((L, n))
    for c in range(n):
        s = 0.0
        for k in range(2, j + 1):
            s += tokens[k - 1, c]
        out[j - 1, c] = s / (j - 1)
    return out


def linf_loop(preds, targets):
    best = 0.0
    for p, t in zip(preds, targets):
        for row_p, row_t in zip(p, t):
            best = max(best, math.sqrt(sum((a - b) ** 2 for a, b in zip(row_p, row_t))))
    return best


def l2_loop(preds, targets):
    total = 0.0
    for p, t in zip(preds, targets):
        for row_p, row_t in zip(p, t):
            total += sum((a - b) ** 2 for a, b in zip(row_p, row_t))
    return total / len(preds)


def head_loop(x, Wq, Wk, Wv, Wo, relu):
    """One head on one sequence; returns (outputs, alpha) with 1-based row semantics."""
    L, n = x.shape
    B = naive_matmul(Wq, np.asarray(Wk).T)
    alpha = np.zeros((L, L))
    for i in range(L):
        scores = [float(x[i] @ B @ x[k]) for k in range(i + 1)]
        if relu:
            div = max(i, 1)  # 1-based position i+1, divisor max(i, 1)
            w = [max(s, 0.0) / div for s in scores]
        else:
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            w = [v / z for v in e]
        alpha[i, : i + 1] = w
    V = naive_matmul(Wo, Wv)
    out = np.zeros((L, n))
    for i in range(L):
        for k in range(i + 1):
            out[i] += alpha[i, k] * (V @ x[k])
    return out, alpha


def model_loop(layers, x, relu, residual):
    """``layers`` is a list of lists of (Wq, Wk, Wv, Wo); mirrors the documented model."""
    h = np.asarray(x, dtype=float)
    alphas = []
    for heads in layers:
        total = h.copy() if residual else np.zeros_like(h)
        layer_alpha = []
        for Wq, Wk, Wv, Wo in heads:
            out, a = head_loop(h, Wq, Wk, Wv, Wo, relu)
            total = total + out
            layer_alpha.append(a)
        h = total
        alphas.append(layer_alpha)
    return (h - x if residual else h), alphas


def adam_reference(w, grad_fn, steps, lr, b1, b2, eps):
    w = list(map(float, w))
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    for t in range(1, steps + 1):
        g = grad_fn(w)
        for i in range(len(w)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            w[i] -= lr * (m[i] / (1 - b1**t)) / (math.sqrt(v[i] / (1 - b2**t)) + eps)
    return w
