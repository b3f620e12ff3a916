# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled DP kernels: CTC forward-backward in log space and Levenshtein."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double _lse2(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


def ctc_forward_backward(const double[:, ::1] logp, const long long[::1] labels, long long blank):
    """Return (loglik, d loglik / d logp) for one utterance.

    ``logp`` is (T, V) per-frame log-probabilities; ``labels`` has no blanks.
    An unreachable target gives (-inf, zeros).
    """
    cdef Py_ssize_t T = logp.shape[0], V = logp.shape[1]
    cdef Py_ssize_t L = labels.shape[0]
    cdef Py_ssize_t S = 2 * L + 1
    cdef Py_ssize_t t, s
    cdef double v, ll
    grad_np = np.zeros((T, V), dtype=np.float64)
    cdef double[:, ::1] grad = grad_np
    ext_np = np.empty(S, dtype=np.int64)
    cdef long long[::1] ext = ext_np
    for s in range(S):
        ext[s] = blank if s % 2 == 0 else labels[(s - 1) // 2]
    # skip[s]: the transition s-2 -> s is legal
    skip_np = np.zeros(S, dtype=np.uint8)
    cdef unsigned char[::1] skip = skip_np
    for s in range(2, S):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]

    alpha_np = np.full((T, S), -INFINITY)
    beta_np = np.full((T, S), -INFINITY)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np

    with nogil:
        alpha[0, 0] = logp[0, blank]
        if S > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                v = alpha[t - 1, s]
                if s >= 1:
                    v = _lse2(v, alpha[t - 1, s - 1])
                if skip[s]:
                    v = _lse2(v, alpha[t - 1, s - 2])
                if v != -INFINITY:
                    alpha[t, s] = v + logp[t, ext[s]]
        ll = alpha[T - 1, S - 1]
        if S > 1:
            ll = _lse2(ll, alpha[T - 1, S - 2])
    if ll == -INFINITY:
        return -np.inf, grad_np

    with nogil:
        beta[T - 1, S - 1] = 0.0
        if S > 1:
            beta[T - 1, S - 2] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(S):
                v = beta[t + 1, s] + logp[t + 1, ext[s]]
                if s + 1 < S:
                    v = _lse2(v, beta[t + 1, s + 1] + logp[t + 1, ext[s + 1]])
                if s + 2 < S and skip[s + 2]:
                    v = _lse2(v, beta[t + 1, s + 2] + logp[t + 1, ext[s + 2]])
                beta[t, s] = v
        for t in range(T):
            for s in range(S):
                v = alpha[t, s] + beta[t, s]
                if v != -INFINITY:
                    grad[t, ext[s]] += exp(v - ll)
    return ll, grad_np


def edit_ops(const long long[::1] ref, const long long[::1] hyp):
    """Return (substitutions, deletions, insertions) of a minimal edit script.

    Backtrace prefers match/substitution, then deletion, then insertion.
    """
    cdef Py_ssize_t n = ref.shape[0], m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long a, b, c
    cost_np = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef long long[:, ::1] cost = cost_np
    for i in range(n + 1):
        cost[i, 0] = i
    for j in range(m + 1):
        cost[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            a = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            b = cost[i - 1, j] + 1
            c = cost[i, j - 1] + 1
            if b < a:
                a = b
            if c < a:
                a = c
            cost[i, j] = a
    cdef long subs = 0, dels = 0, ins = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins
