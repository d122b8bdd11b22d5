"""Numba kernels for tree growing and routing.

All in-kernel randomness is an inline splitmix64 stream so tree structure is a
pure function of (data, seed), independent of platform, numpy version quirks,
and thread count. The split criterion maximizes sum over children of
(sum rho*U)^2 / (sum rho), i.e. weighted between-child variance of U.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True, inline="always")
def _next_u64(state):
    state = state + np.uint64(0x9E3779B97F4A7C15)
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True)
def grow_tree(X, rows, U, rho, min_node, mtry, seed):
    """Grow one tree on X[rows] with pseudo-outcomes U and weights rho.

    Returns (feature, threshold, left, right, depth, n_nodes). feature[i] == -1
    marks a leaf. Thresholds t satisfy v1 <= t < v2 for the adjacent sorted
    values they separate, so routing x <= t reproduces the training partition.
    """
    m = rows.shape[0]
    D = X.shape[1]
    cap = 2 * max(m // min_node, 1) + 3
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    depth = np.zeros(cap, np.int64)
    idx = rows.copy()
    stack_node = np.empty(cap, np.int64)
    stack_lo = np.empty(cap, np.int64)
    stack_hi = np.empty(cap, np.int64)
    featbuf = np.empty(D, np.int64)
    vals = np.empty(m, np.float64)
    tmp = np.empty(m, np.int64)
    n_nodes = 1
    stack_node[0] = 0
    stack_lo[0] = 0
    stack_hi[0] = m
    sp = 1
    state = np.uint64(seed) ^ np.uint64(0xD1B54A32D192ED03)
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        lo = stack_lo[sp]
        hi = stack_hi[sp]
        msub = hi - lo
        if msub < 2 * min_node:
            continue
        S = 0.0
        W = 0.0
        for t in range(lo, hi):
            r = rho[idx[t]]
            S += r * U[idx[t]]
            W += r
        if W <= 0.0:
            continue
        parent = S * S / W
        eps = 1e-10 * (parent if parent > 1.0 else 1.0)
        for j in range(D):
            featbuf[j] = j
        k = mtry if mtry < D else D
        best_gain = 0.0
        best_f = -1
        best_thr = 0.0
        for fi in range(k):
            state, z = _next_u64(state)
            pick = fi + np.int64(z % np.uint64(D - fi))
            swap = featbuf[fi]
            featbuf[fi] = featbuf[pick]
            featbuf[pick] = swap
            f = featbuf[fi]
            for t in range(msub):
                vals[t] = X[idx[lo + t], f]
            order = np.argsort(vals[:msub], kind="mergesort")
            cs = 0.0
            cw = 0.0
            for t in range(msub - 1):
                u = idx[lo + order[t]]
                r = rho[u]
                cs += r * U[u]
                cw += r
                nl = t + 1
                if nl < min_node:
                    continue
                if msub - nl < min_node:
                    break
                v1 = vals[order[t]]
                v2 = vals[order[t + 1]]
                if not (v2 > v1):
                    continue
                wr = W - cw
                if cw <= 0.0 or wr <= 0.0:
                    continue
                gain = cs * cs / cw + (S - cs) * (S - cs) / wr - parent
                if gain > eps and gain > best_gain:
                    best_gain = gain
                    best_f = f
                    thr = 0.5 * (v1 + v2)
                    if thr >= v2:
                        thr = v1
                    best_thr = thr
        if best_f < 0:
            continue
        p = 0
        for t in range(lo, hi):
            if X[idx[t], best_f] <= best_thr:
                tmp[p] = idx[t]
                p += 1
        n_left = p
        for t in range(lo, hi):
            if X[idx[t], best_f] > best_thr:
                tmp[p] = idx[t]
                p += 1
        for t in range(msub):
            idx[lo + t] = tmp[t]
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        depth[lid] = depth[node] + 1
        depth[rid] = depth[node] + 1
        stack_node[sp] = rid
        stack_lo[sp] = lo + n_left
        stack_hi[sp] = hi
        sp += 1
        stack_node[sp] = lid
        stack_lo[sp] = lo
        stack_hi[sp] = lo + n_left
        sp += 1
    return (
        feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
        right[:n_nodes], depth[:n_nodes], n_nodes,
    )


@njit(cache=True, nogil=True)
def route_rows(X, rows, feature, threshold, left, right):
    """Leaf node id for each X[rows[i]]."""
    out = np.empty(rows.shape[0], np.int64)
    for i in range(rows.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[rows[i], feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out
