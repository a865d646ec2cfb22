# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


def hinge_rank_batch(p, s, double scale):
    cdef double[:, ::1] P = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, ::1] S = np.ascontiguousarray(s, dtype=np.float64)
    cdef Py_ssize_t B = P.shape[0], K = P.shape[1]
    loss_arr = np.zeros(B, dtype=np.float64)
    grad_arr = np.zeros((B, K), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t b, i, j
    cdef double d, acc
    with nogil:
        for b in range(B):
            acc = 0.0
            for i in range(K):
                for j in range(K):
                    if S[b, i] < S[b, j]:
                        d = P[b, i] - P[b, j]
                        if d > 0:
                            acc += d
                            grad[b, i] += scale
                            grad[b, j] -= scale
            loss[b] = scale * acc
    return loss_arr, grad_arr


def pl_nll_batch(z, order):
    cdef double[:, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef long long[:, ::1] O = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t B = Z.shape[0], K = Z.shape[1]
    nll_arr = np.zeros(B, dtype=np.float64)
    grad_arr = np.zeros((B, K), dtype=np.float64)
    cdef double[::1] nll = nll_arr
    cdef double[:, ::1] grad = grad_arr
    used_arr = np.zeros(K, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t b, t, j
    cdef long long c
    cdef double top, tot, lse, acc
    with nogil:
        for b in range(B):
            for j in range(K):
                used[j] = 0
            acc = 0.0
            for t in range(K):
                top = -INFINITY
                for j in range(K):
                    if not used[j] and Z[b, j] > top:
                        top = Z[b, j]
                tot = 0.0
                for j in range(K):
                    if not used[j]:
                        tot += exp(Z[b, j] - top)
                lse = top + log(tot)
                for j in range(K):
                    if not used[j]:
                        grad[b, j] += exp(Z[b, j] - top) / tot
                c = O[b, t]
                acc += lse - Z[b, c]
                used[c] = 1
            for j in range(K):
                grad[b, j] -= 1.0
            nll[b] = acc
    return nll_arr, grad_arr


def masked_greedy(logits):
    cdef double[::1] L = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t K = L.shape[0]
    out_arr = np.empty(K, dtype=np.int64)
    cdef long long[::1] out = out_arr
    used_arr = np.zeros(K, dtype=np.uint8)
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t t, j, best
    cdef double bv
    with nogil:
        for t in range(K):
            best = -1
            bv = -INFINITY
            for j in range(K):
                if not used[j] and (best < 0 or L[j] > bv):
                    best = j
                    bv = L[j]
            out[t] = best
            used[best] = 1
    return out_arr


def filtered_ranks(orderings, gold, filt):
    cdef long long[:, ::1] O = np.ascontiguousarray(orderings, dtype=np.int64)
    cdef long long[::1] G = np.ascontiguousarray(gold, dtype=np.int64)
    cdef unsigned char[:, ::1] F = np.ascontiguousarray(filt, dtype=np.uint8)
    cdef Py_ssize_t N = O.shape[0], E = O.shape[1]
    ranks_arr = np.empty(N, dtype=np.int64)
    cdef long long[::1] R = ranks_arr
    cdef Py_ssize_t n, i
    cdef long long r, e
    cdef bint found
    for n in range(N):
        r = 0
        found = False
        for i in range(E):
            e = O[n, i]
            if e == G[n]:
                found = True
                break
            if not F[n, e]:
                r += 1
        if not found:
            raise ValueError(f"gold entity {G[n]} missing from ordering {n}")
        R[n] = r + 1
    return ranks_arr
