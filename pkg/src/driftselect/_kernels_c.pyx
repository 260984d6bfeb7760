# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: SiLU attention and the sampled-softmax item head.

Same contract as ``_kernels_py``. The matrix products go through BLAS
(row-major operands passed as transposed column-major views); bias lookup,
activation, causal masking and the bias-gradient reduction are fused into a
single pass over the lower triangle, which removes the NumPy temporaries.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       double* a, int lda, double* b, int ldb,
                       double* c, int ldc) noexcept nogil:
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &zero, c, &ldc)


def attention_forward(double[:, :, ::1] Q, double[:, :, ::1] K, double[:, :, ::1] V,
                      double[::1] rab_pos, double[::1] rab_time, int[:, :, ::1] time_bucket):
    cdef Py_ssize_t B = Q.shape[0], N = Q.shape[1], d = Q.shape[2]
    cdef Py_ssize_t b, i, j
    cdef double s
    Y_arr = np.empty((B, N, d))
    S_arr = np.empty((B, N, N))
    A_arr = np.empty((N, N))
    cdef double[:, :, ::1] Y = Y_arr
    cdef double[:, :, ::1] S = S_arr
    cdef double[:, ::1] A = A_arr
    cdef int n = <int>N, dd = <int>d
    with nogil:
        for b in range(B):
            # S = Q K^T
            _gemm(b'T', b'N', n, n, dd, &K[b, 0, 0], dd, &Q[b, 0, 0], dd, &S[b, 0, 0], n)
            for i in range(N):
                for j in range(i + 1):
                    s = S[b, i, j] + rab_pos[i - j] + rab_time[time_bucket[b, i, j]]
                    S[b, i, j] = s
                    A[i, j] = s / (1.0 + exp(-s))
                for j in range(i + 1, N):
                    A[i, j] = 0.0
            # Y = A V
            _gemm(b'N', b'N', dd, n, n, &V[b, 0, 0], dd, &A[0, 0], n, &Y[b, 0, 0], dd)
    return Y_arr, S_arr


def attention_backward(double[:, :, ::1] dY, double[:, :, ::1] Q, double[:, :, ::1] K,
                       double[:, :, ::1] V, double[:, :, ::1] S, int[:, :, ::1] time_bucket,
                       Py_ssize_t n_pos, Py_ssize_t n_time):
    cdef Py_ssize_t B = Q.shape[0], N = Q.shape[1], d = Q.shape[2]
    cdef Py_ssize_t b, i, j
    cdef double s, sig, g
    dQ_arr = np.empty((B, N, d))
    dK_arr = np.empty((B, N, d))
    dV_arr = np.empty((B, N, d))
    dpos_arr = np.zeros(n_pos)
    dtime_arr = np.zeros(n_time)
    A_arr = np.empty((N, N))
    dS_arr = np.empty((N, N))
    cdef double[:, :, ::1] dQ = dQ_arr
    cdef double[:, :, ::1] dK = dK_arr
    cdef double[:, :, ::1] dV = dV_arr
    cdef double[::1] dpos = dpos_arr
    cdef double[::1] dtime = dtime_arr
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] dS = dS_arr
    cdef int n = <int>N, dd = <int>d
    with nogil:
        for b in range(B):
            # dA = dY V^T, written into dS then overwritten with dS
            _gemm(b'T', b'N', n, n, dd, &V[b, 0, 0], dd, &dY[b, 0, 0], dd, &dS[0, 0], n)
            for i in range(N):
                for j in range(i + 1):
                    s = S[b, i, j]
                    sig = 1.0 / (1.0 + exp(-s))
                    A[i, j] = s * sig
                    g = dS[i, j] * sig * (1.0 + s * (1.0 - sig))
                    dS[i, j] = g
                    dpos[i - j] += g
                    dtime[time_bucket[b, i, j]] += g
                for j in range(i + 1, N):
                    A[i, j] = 0.0
                    dS[i, j] = 0.0
            # dV = A^T dY ; dQ = dS K ; dK = dS^T Q
            _gemm(b'N', b'T', dd, n, n, &dY[b, 0, 0], dd, &A[0, 0], n, &dV[b, 0, 0], dd)
            _gemm(b'N', b'N', dd, n, n, &K[b, 0, 0], dd, &dS[0, 0], n, &dQ[b, 0, 0], dd)
            _gemm(b'N', b'T', dd, n, n, &Q[b, 0, 0], dd, &dS[0, 0], n, &dK[b, 0, 0], dd)
    return dQ_arr, dK_arr, dV_arr, dpos_arr, dtime_arr


def sampled_logits(double[:, :, ::1] H, double[:, ::1] WT, cnp.int64_t[:, :, ::1] cand):
    """``logits[b, p, c] = H[b, p] . WT[cand[b, p, c]]`` without materialising the gathered rows."""
    cdef Py_ssize_t B = cand.shape[0], n = cand.shape[1], C = cand.shape[2], d = H.shape[2]
    cdef Py_ssize_t b, p, c, k
    cdef double acc
    cdef double* h
    cdef double* w
    out_arr = np.empty((B, n, C))
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for p in range(n):
                h = &H[b, p, 0]
                for c in range(C):
                    w = &WT[cand[b, p, c], 0]
                    acc = 0.0
                    for k in range(d):
                        acc = acc + h[k] * w[k]
                    out[b, p, c] = acc
    return out_arr


def sampled_backward(double[:, :, ::1] dlog, double[:, :, ::1] H, double[:, ::1] WT,
                     cnp.int64_t[:, :, ::1] cand, Py_ssize_t vocab):
    """Return ``(dH[:, :n], dWT)`` for :func:`sampled_logits`."""
    cdef Py_ssize_t B = cand.shape[0], n = cand.shape[1], C = cand.shape[2], d = H.shape[2]
    cdef Py_ssize_t b, p, c, k
    cdef double g
    cdef double* h
    cdef double* w
    cdef double* dh
    cdef double* dw
    dH_arr = np.zeros((B, n, d))
    dW_arr = np.zeros((vocab, d))
    cdef double[:, :, ::1] dH = dH_arr
    cdef double[:, ::1] dW = dW_arr
    with nogil:
        for b in range(B):
            for p in range(n):
                h = &H[b, p, 0]
                dh = &dH[b, p, 0]
                for c in range(C):
                    g = dlog[b, p, c]
                    if g == 0.0:
                        continue
                    w = &WT[cand[b, p, c], 0]
                    dw = &dW[cand[b, p, c], 0]
                    for k in range(d):
                        dh[k] = dh[k] + g * w[k]
                        dw[k] = dw[k] + g * h[k]
    return dH_arr, dW_arr
