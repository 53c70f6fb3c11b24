"""
Loop-shaped kernels: edit distance DP, row-wise top-k selection, expert
activation counts.

Each kernel has a compiled loop version (``*_loop``, numba when enabled) and a
vectorized numpy version (``*_numpy``). The public names dispatch on
``reroute._accel.JIT_ENABLED``. All kernels return integers, so both paths
agree exactly.
"""

import numpy as np

from reroute._accel import JIT_ENABLED, njit

__all__ = [
    "JIT_ENABLED",
    "expert_counts",
    "levenshtein",
    "levenshtein_codes",
    "topk_rows",
]


def _codes(s):
    return np.fromiter(map(ord, s), dtype=np.int64, count=len(s))


# -- edit distance ----------------------------------------------------------


@njit
def levenshtein_loop(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1)
    cur = np.empty(m + 1, dtype=prev.dtype)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return prev[m]


def levenshtein_numpy(a, b):
    # Row recurrence cur[j] = min_l (t[l] + j - l) vectorizes through a running minimum.
    n, m = a.shape[0], b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    ramp = np.arange(m + 1)
    prev = ramp.copy()
    for i in range(1, n + 1):
        t = np.empty(m + 1, dtype=np.int64)
        t[0] = i
        t[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i - 1]))
        prev = np.minimum.accumulate(t - ramp) + ramp
    return int(prev[m])


def levenshtein_codes(a, b):
    """Edit distance between two integer code arrays."""
    if JIT_ENABLED:
        return int(levenshtein_loop(a, b))
    return levenshtein_numpy(a, b)


def levenshtein(a: str, b: str) -> int:
    """Character-level Levenshtein distance (unit insert/delete/substitute)."""
    return levenshtein_codes(_codes(a), _codes(b))


# -- top-k ------------------------------------------------------------------


@njit
def topk_rows_loop(values, k):
    rows, cols = values.shape
    out = np.empty((rows, k), dtype=np.int64)
    taken = np.zeros(cols, dtype=np.bool_)
    for r in range(rows):
        taken[:] = False
        for j in range(k):
            best = -1
            for c in range(cols):
                # strict comparison keeps the lower index on ties
                if not taken[c] and (best < 0 or values[r, c] > values[r, best]):
                    best = c
            taken[best] = True
            out[r, j] = best
    return out


def topk_rows_numpy(values, k):
    return np.argsort(-values, axis=-1, kind="stable")[:, :k].astype(np.int64)


def topk_rows(values, k):
    """Indices of the k largest entries per row, descending, lower index first on ties."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {values.shape}")
    if not 1 <= k <= values.shape[1]:
        raise ValueError(f"k={k} out of range for {values.shape[1]} columns")
    if JIT_ENABLED:
        return topk_rows_loop(values, k)
    return topk_rows_numpy(values, k)


# -- utilization ------------------------------------------------------------


@njit
def expert_counts_loop(selected, n_experts):
    # selected: (tokens, layers, k)
    T, L, K = selected.shape
    out = np.zeros((L, n_experts), dtype=np.int64)
    for t in range(T):
        for layer in range(L):
            for j in range(K):
                out[layer, selected[t, layer, j]] += 1
    return out


def expert_counts_numpy(selected, n_experts):
    T, L, K = selected.shape
    flat = selected.transpose(1, 0, 2).reshape(L, T * K)
    offsets = (np.arange(L) * n_experts)[:, None]
    return np.bincount((flat + offsets).ravel(), minlength=L * n_experts).reshape(L, n_experts)


def expert_counts(selected, n_experts):
    """Activation counts [layers x experts] from a (tokens, layers, k) selection array."""
    selected = np.ascontiguousarray(selected, dtype=np.int64)
    if selected.ndim != 3:
        raise ValueError(f"expected (tokens, layers, k), got shape {selected.shape}")
    if selected.size and (selected.min() < 0 or selected.max() >= n_experts):
        raise ValueError("expert index out of range")
    if JIT_ENABLED:
        return expert_counts_loop(selected, n_experts)
    return expert_counts_numpy(selected, n_experts)
