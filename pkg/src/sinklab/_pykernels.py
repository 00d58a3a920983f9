"""Pure-numpy attention kernels (fallback for the compiled ``_ckernels``).

Both backends share one contract. ``H`` is a C-contiguous ``(B, L, n)`` stack
of row-token matrices. A head maps it to

    scores[b, i, k] = H[b, i] @ Wq @ Wk.T @ H[b, k]        (k <= i)
    Y[b, i]         = Wo @ sum_k A[b, i, k] * Wv @ H[b, k]

where ``A`` is the causal softmax of the scores, or ``relu(score) / max(i-1, 1)``
with 1-based ``i`` for ReLU heads. Backward returns gradients of
``sum(G * Y)`` with respect to ``H`` and all four weight matrices; the ReLU
derivative at exactly zero is taken to be zero.
"""

import numpy as np


def _relu_divisor(L):
    # n_i = max(i - 1, 1) for 1-based i == max(r, 1) for 0-based r
    return np.maximum(np.arange(L), 1).astype(float)[:, None]


def attention_forward(H, Wq, Wk, Wv, Wo, relu):
    L = H.shape[1]
    scores = (H @ Wq) @ (H @ Wk).transpose(0, 2, 1)
    causal = np.tril(np.ones((L, L), dtype=bool))
    if relu:
        A = np.where(causal, np.maximum(scores, 0.0), 0.0) / _relu_divisor(L)
    else:
        masked = np.where(causal, scores, -np.inf)
        E = np.exp(masked - masked.max(axis=-1, keepdims=True))
        A = E / E.sum(axis=-1, keepdims=True)
    Y = (A @ (H @ Wv.T)) @ Wo.T
    return Y, A


def attention_backward(H, Wq, Wk, Wv, Wo, relu, A, G):
    B, L, n = H.shape
    Q = H @ Wq
    K = H @ Wk
    V = H @ Wv.T
    P = A @ V
    flat = H.reshape(B * L, n)

    dWo = G.reshape(B * L, n).T @ P.reshape(B * L, n)
    dP = G @ Wo
    dA = dP @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dP
    dWv = dV.reshape(B * L, n).T @ flat
    dH = dV @ Wv

    if relu:
        dS = np.where(A > 0.0, dA, 0.0) / _relu_divisor(L)
    else:
        dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
    dQ = dS @ K
    dK = dS.transpose(0, 2, 1) @ Q
    dWq = flat.T @ dQ.reshape(B * L, n)
    dWk = flat.T @ dK.reshape(B * L, n)
    dH += dQ @ Wq.T + dK @ Wk.T
    return dH, dWq, dWk, dWv, dWo
