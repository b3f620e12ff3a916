"""Pure-Python/numpy versions of the compiled kernels (same signatures)."""
from __future__ import annotations

import numpy as np


def _lse(*xs: np.ndarray) -> np.ndarray:
    stacked = np.stack(xs)
    m = stacked.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(stacked - safe).sum(axis=0))


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left when negative), filling with -inf."""
    out = np.full_like(x, -np.inf)
    if k > 0:
        out[k:] = x[:-k]
    else:
        out[:k] = x[-k:]
    return out


def ctc_forward_backward(logp: np.ndarray, labels: np.ndarray, blank: int):
    logp = np.asarray(logp, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, V = logp.shape
    L = labels.shape[0]
    S = 2 * L + 1
    ext = np.full(S, blank, dtype=np.int64)
    ext[1::2] = labels
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    ninf = -np.inf
    emit = logp[:, ext]  # (T, S)

    alpha = np.full((T, S), ninf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        alpha[t] = _lse(prev, _shift(prev, 1), np.where(skip, _shift(prev, 2), ninf)) + emit[t]
    ends = alpha[T - 1, -2:] if S > 1 else alpha[T - 1, -1:]
    ll = float(_lse(*ends)) if S > 1 else float(ends[0])
    grad = np.zeros((T, V))
    if ll == ninf:
        return -np.inf, grad

    beta = np.full((T, S), ninf)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    skip_next = np.zeros(S, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        beta[t] = _lse(nxt, _shift(nxt, -1), np.where(skip_next, _shift(nxt, -2), ninf))
    with np.errstate(under="ignore"):
        occ = np.exp(alpha + beta - ll)
    for s in range(S):
        grad[:, ext[s]] += occ[:, s]
    return float(ll), grad


def edit_ops(ref, hyp):
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        cost[i][0] = i
    for j in range(m + 1):
        cost[0][j] = j
    for i in range(1, n + 1):
        row, up = cost[i], cost[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j - 1] + (ref[i - 1] != hyp[j - 1]), up[j] + 1, row[j - 1] + 1)
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins
