# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention kernels; same contract as ``sinklab._pykernels``.

Each example is handled in small scratch buffers that stay in L1. All dense
work goes through ``mm``, which keeps 32-column blocks of an output row in
vector registers; the block width is dispatched to a compile-time constant so
the accumulators never spill. Weight gradients accumulate in example order,
so results are reproducible run to run.
"""

import numpy as np
from libc.math cimport exp


cdef extern from *:
    """
    typedef double sl_v4 __attribute__((vector_size(32), aligned(8)));

    /* One 32-column block of out (+)= X @ W. Called with literal nv/tail so
       the accumulators are unrolled into registers. */
    static inline __attribute__((always_inline)) void sl_block(
            const double *restrict X, const double *restrict W, double *restrict out,
            Py_ssize_t rows, Py_ssize_t inner, Py_ssize_t cols, Py_ssize_t c0,
            int accumulate, const int nv, const int tail) {
        for (Py_ssize_t i = 0; i < rows; ++i) {
            sl_v4 acc[8];
            double rest[3] = {0.0, 0.0, 0.0};
            double *o = out + i * cols + c0;
            sl_v4 *ov = (sl_v4 *)o;
            for (int c = 0; c < nv; ++c) acc[c] = accumulate ? ov[c] : (sl_v4){0, 0, 0, 0};
            if (accumulate)
                for (int t = 0; t < tail; ++t) rest[t] = o[4 * nv + t];
            const double *x = X + i * inner;
            for (Py_ssize_t a = 0; a < inner; ++a) {
                const double *w = W + a * cols + c0;
                const sl_v4 *wv = (const sl_v4 *)w;
                for (int c = 0; c < nv; ++c) acc[c] += x[a] * wv[c];
                for (int t = 0; t < tail; ++t) rest[t] += x[a] * w[4 * nv + t];
            }
            for (int c = 0; c < nv; ++c) ov[c] = acc[c];
            for (int t = 0; t < tail; ++t) o[4 * nv + t] = rest[t];
        }
    }

#define SL_NV(NV) \
    case 4 * NV + 0: sl_block(X, W, out, rows, inner, cols, c0, accumulate, NV, 0); break; \
    case 4 * NV + 1: sl_block(X, W, out, rows, inner, cols, c0, accumulate, NV, 1); break; \
    case 4 * NV + 2: sl_block(X, W, out, rows, inner, cols, c0, accumulate, NV, 2); break; \
    case 4 * NV + 3: sl_block(X, W, out, rows, inner, cols, c0, accumulate, NV, 3); break;

    /* out (+)= X @ W with X (rows, inner), W (inner, cols); no aliasing */
    static void sl_mm(const double *restrict X, const double *restrict W, double *restrict out,
                      Py_ssize_t rows, Py_ssize_t inner, Py_ssize_t cols, int accumulate) {
        for (Py_ssize_t c0 = 0; c0 < cols; c0 += 32) {
            const Py_ssize_t width = cols - c0 < 32 ? cols - c0 : 32;
            switch (width) {
                SL_NV(0) SL_NV(1) SL_NV(2) SL_NV(3) SL_NV(4) SL_NV(5) SL_NV(6) SL_NV(7)
                case 32: sl_block(X, W, out, rows, inner, cols, c0, accumulate, 8, 0); break;
            }
        }
    }

    static void sl_transpose(const double *restrict X, double *restrict out, Py_ssize_t rows, Py_ssize_t cols) {
        for (Py_ssize_t i = 0; i < rows; ++i)
            for (Py_ssize_t c = 0; c < cols; ++c)
                out[c * rows + i] = X[i * cols + c];
    }
    """
    void mm "sl_mm"(const double* X, const double* W, double* out,
                    Py_ssize_t rows, Py_ssize_t inner, Py_ssize_t cols, int accumulate) noexcept nogil
    void transpose "sl_transpose"(const double* X, double* out, Py_ssize_t rows, Py_ssize_t cols) noexcept nogil


cdef void normalise(double* S, Py_ssize_t L, bint relu) noexcept nogil:
    # scores (full L x L) -> causal attention weights, in place
    cdef Py_ssize_t i, k
    cdef double m, z, div
    cdef double* row
    for i in range(L):
        row = S + i * L
        if relu:
            div = <double>i if i > 1 else 1.0
            for k in range(i + 1):
                row[k] = (row[k] if row[k] > 0.0 else 0.0) / div
        else:
            m = row[0]
            for k in range(1, i + 1):
                if row[k] > m:
                    m = row[k]
            z = 0.0
            for k in range(i + 1):
                row[k] = exp(row[k] - m)
                z += row[k]
            for k in range(i + 1):
                row[k] = row[k] / z
        for k in range(i + 1, L):
            row[k] = 0.0


cdef inline const double* cptr(const double[:, ::1] a) noexcept nogil:
    return &a[0, 0]


def attention_forward(const double[:, :, ::1] H, Wq, Wk, Wv, Wo, bint relu):
    cdef Py_ssize_t B = H.shape[0], L = H.shape[1], n = H.shape[2], b
    cdef const double[:, ::1] wq = np.ascontiguousarray(Wq, dtype=float)
    cdef const double[:, ::1] wk = np.ascontiguousarray(Wk, dtype=float)
    cdef const double[:, ::1] wvt = np.ascontiguousarray(np.transpose(Wv), dtype=float)
    cdef const double[:, ::1] wot = np.ascontiguousarray(np.transpose(Wo), dtype=float)
    Y_arr = np.empty((B, L, n))
    A_arr = np.empty((B, L, L))
    cdef double[:, :, ::1] Y = Y_arr
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, ::1] buf = np.empty((5, L * n))
    cdef double *Q = &buf[0, 0]
    cdef double *K = &buf[1, 0]
    cdef double *Kt = &buf[2, 0]
    cdef double *V = &buf[3, 0]
    cdef double *P = &buf[4, 0]
    cdef const double* X
    cdef double* Ab
    with nogil:
        for b in range(B):
            X = &H[b, 0, 0]
            Ab = &A[b, 0, 0]
            mm(X, cptr(wq), Q, L, n, n, 0)
            mm(X, cptr(wk), K, L, n, n, 0)
            mm(X, cptr(wvt), V, L, n, n, 0)
            transpose(K, Kt, L, n)
            mm(Q, Kt, Ab, L, n, L, 0)
            normalise(Ab, L, relu)
            mm(Ab, V, P, L, L, n, 0)
            mm(P, cptr(wot), &Y[b, 0, 0], L, n, n, 0)
    return Y_arr, A_arr


def attention_backward(const double[:, :, ::1] H, Wq, Wk, Wv, Wo, bint relu,
                       const double[:, :, ::1] A, const double[:, :, ::1] G):
    cdef Py_ssize_t B = H.shape[0], L = H.shape[1], n = H.shape[2], b, i, k
    cdef double s, div
    cdef const double[:, ::1] wq = np.ascontiguousarray(Wq, dtype=float)
    cdef const double[:, ::1] wk = np.ascontiguousarray(Wk, dtype=float)
    cdef const double[:, ::1] wqt = np.ascontiguousarray(np.transpose(Wq), dtype=float)
    cdef const double[:, ::1] wkt = np.ascontiguousarray(np.transpose(Wk), dtype=float)
    cdef const double[:, ::1] wv = np.ascontiguousarray(Wv, dtype=float)
    cdef const double[:, ::1] wvt = np.ascontiguousarray(np.transpose(Wv), dtype=float)
    cdef const double[:, ::1] wo = np.ascontiguousarray(Wo, dtype=float)
    dH_arr = np.empty((B, L, n))
    grads = np.zeros((4, n, n))
    cdef double[:, :, ::1] dH = dH_arr
    cdef double[:, :, ::1] dW = grads
    cdef double[:, ::1] buf = np.empty((12, L * n))
    cdef double[:, ::1] sq = np.empty((3, L * L))
    cdef double *Q = &buf[0, 0]
    cdef double *K = &buf[1, 0]
    cdef double *V = &buf[2, 0]
    cdef double *Vt = &buf[3, 0]
    cdef double *P = &buf[4, 0]
    cdef double *Gt = &buf[5, 0]
    cdef double *Xt = &buf[6, 0]
    cdef double *dP = &buf[7, 0]
    cdef double *dV = &buf[8, 0]
    cdef double *dVt = &buf[9, 0]
    cdef double *dQ = &buf[10, 0]
    cdef double *dK = &buf[11, 0]
    cdef double *At = &sq[0, 0]
    cdef double *dS = &sq[1, 0]
    cdef double *dSt = &sq[2, 0]
    cdef const double *X
    cdef const double *Ab
    cdef const double *Gb
    cdef double *dHb
    cdef double *row
    with nogil:
        for b in range(B):
            X = &H[b, 0, 0]
            Ab = &A[b, 0, 0]
            Gb = &G[b, 0, 0]
            dHb = &dH[b, 0, 0]
            mm(X, cptr(wq), Q, L, n, n, 0)
            mm(X, cptr(wk), K, L, n, n, 0)
            mm(X, cptr(wvt), V, L, n, n, 0)
            mm(Ab, V, P, L, L, n, 0)
            transpose(X, Xt, L, n)

            # output projection: dWo += G^T P, dP = G Wo
            transpose(Gb, Gt, L, n)
            mm(Gt, P, &dW[3, 0, 0], n, L, n, 1)
            mm(Gb, cptr(wo), dP, L, n, n, 0)

            # value path: dV = A^T dP, dWv += dV^T X, dH = dV Wv
            transpose(Ab, At, L, L)
            mm(At, dP, dV, L, L, n, 0)
            transpose(dV, dVt, L, n)
            mm(dVt, X, &dW[2, 0, 0], n, L, n, 1)
            mm(dV, cptr(wv), dHb, L, n, n, 0)

            # weights -> scores
            transpose(V, Vt, L, n)
            mm(dP, Vt, dS, L, n, L, 0)
            for i in range(L):
                row = dS + i * L
                if relu:
                    div = <double>i if i > 1 else 1.0
                    for k in range(i + 1):
                        row[k] = row[k] / div if Ab[i * L + k] > 0.0 else 0.0
                else:
                    s = 0.0
                    for k in range(i + 1):
                        s += row[k] * Ab[i * L + k]
                    for k in range(i + 1):
                        row[k] = Ab[i * L + k] * (row[k] - s)
                for k in range(i + 1, L):
                    row[k] = 0.0

            # scores -> queries and keys
            mm(dS, K, dQ, L, L, n, 0)
            transpose(dS, dSt, L, L)
            mm(dSt, Q, dK, L, L, n, 0)
            mm(Xt, dQ, &dW[0, 0, 0], n, L, n, 1)
            mm(Xt, dK, &dW[1, 0, 0], n, L, n, 1)
            mm(dQ, cptr(wqt), dHb, L, n, n, 1)
            mm(dK, cptr(wkt), dHb, L, n, n, 1)
    return dH_arr, grads[0], grads[1], grads[2], grads[3]
