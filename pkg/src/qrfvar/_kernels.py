"""Compiled kernels for tree growth and weighted-quantile prediction.

Trees are stored flat: per node ``feature`` (-1 for a leaf), ``threshold``,
local child ids, and for leaves a ``[leaf_start, leaf_start + leaf_count)``
slice into the tree's member array. Points with ``x[feature] <= threshold``
go left.
"""

import math

import numpy as np
from numba import njit

# a level counts as reached once the cumulative weight is this close to it;
# rounding in the weights stays far below it, real mass steps far above
LEVEL_TOL = 1e-12


@njit(nogil=True, cache=True)
def _partition(idx, lo, hi, X, f, thr):
    i = lo
    j = hi - 1
    while i <= j:
        if X[idx[i], f] <= thr:
            i += 1
        else:
            tmp = idx[i]
            idx[i] = idx[j]
            idx[j] = tmp
            j -= 1
    return i


@njit(nogil=True, cache=True)
def _best_split(X, y, sw, s_lo, s_hi, ew, e_lo, e_hi, honest, feats, min_child, min_node_size):
    n_s = s_hi - s_lo
    n_e = e_hi - e_lo
    yref = y[sw[s_lo]]
    for i in range(s_lo, s_hi):
        if y[sw[i]] < yref:
            yref = y[sw[i]]
    best_gain = -1.0
    best_f = -1
    best_thr = 0.0
    vals = np.empty(n_s)
    ys = np.empty(n_s)
    for fi in range(feats.shape[0]):
        f = feats[fi]
        for i in range(n_s):
            vals[i] = X[sw[s_lo + i], f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        if sv[0] == sv[n_s - 1]:
            continue
        total = 0.0
        for i in range(n_s):
            ys[i] = y[sw[s_lo + order[i]]] - yref
            total += ys[i]
        if honest:
            ev = np.empty(n_e)
            for i in range(n_e):
                ev[i] = X[ew[e_lo + i], f]
            ev.sort()
        else:
            ev = np.empty(0)
        s_left = 0.0
        for i in range(1, n_s):
            s_left += ys[i - 1]
            if sv[i] == sv[i - 1]:
                continue
            n_left = i
            n_right = n_s - i
            if n_left < min_child or n_right < min_child:
                continue
            if not honest and (n_left < min_node_size or n_right < min_node_size):
                continue
            thr = 0.5 * (sv[i - 1] + sv[i])
            if thr >= sv[i] or thr < sv[i - 1]:
                thr = sv[i - 1]
            if honest:
                e_left = np.searchsorted(ev, thr, side="right")
                if e_left < min_node_size or n_e - e_left < min_node_size:
                    continue
            s_right = total - s_left
            gain = s_left * s_left / n_left + s_right * s_right / n_right
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_thr = thr
    return best_f, best_thr


@njit(nogil=True, cache=True)
def build_tree(X, y, sidx, eidx, honest, mtry, min_node_size, min_child_fraction, max_leaf_size, keys):
    """Grow one tree; ``keys[node]`` ranks features for the candidate draw at ``node``."""
    sw = sidx.copy()
    ew = eidx.copy()
    cap = 2 * max(sw.shape[0], 1) + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    s_lo = np.zeros(cap, np.int64)
    s_hi = np.zeros(cap, np.int64)
    e_lo = np.zeros(cap, np.int64)
    e_hi = np.zeros(cap, np.int64)
    s_hi[0] = sw.shape[0]
    e_hi[0] = ew.shape[0]
    n_nodes = 1
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        n_s = s_hi[node] - s_lo[node]
        n_m = e_hi[node] - e_lo[node] if honest else n_s
        if n_s < 2 or n_m < 2 * min_node_size:
            continue
        pure = True
        y0 = y[sw[s_lo[node]]]
        for i in range(s_lo[node] + 1, s_hi[node]):
            if y[sw[i]] != y0:
                pure = False
                break
        if pure:
            continue
        feats = np.sort(np.argsort(keys[node])[:mtry])
        min_child = max(1, int(math.ceil(min_child_fraction * n_s)))
        f, thr = _best_split(X, y, sw, s_lo[node], s_hi[node], ew, e_lo[node], e_hi[node],
                             honest, feats, min_child, min_node_size)
        if f < 0 and n_m > max_leaf_size and min_child > 1:
            # oversized leaf: drop the child-balance requirement before giving up
            f, thr = _best_split(X, y, sw, s_lo[node], s_hi[node], ew, e_lo[node], e_hi[node],
                                 honest, feats, 1, min_node_size)
        if f < 0:
            continue
        s_mid = _partition(sw, s_lo[node], s_hi[node], X, f, thr)
        e_mid = _partition(ew, e_lo[node], e_hi[node], X, f, thr) if honest else 0
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = f
        threshold[node] = thr
        left[node] = lc
        right[node] = rc
        s_lo[lc] = s_lo[node]
        s_hi[lc] = s_mid
        s_lo[rc] = s_mid
        s_hi[rc] = s_hi[node]
        if honest:
            e_lo[lc] = e_lo[node]
            e_hi[lc] = e_mid
            e_lo[rc] = e_mid
            e_hi[rc] = e_hi[node]
        stack[top] = rc
        stack[top + 1] = lc
        top += 2

    leaf_start = np.full(n_nodes, -1, np.int64)
    leaf_count = np.zeros(n_nodes, np.int64)
    total = 0
    for node in range(n_nodes):
        if feature[node] < 0:
            leaf_start[node] = total
            leaf_count[node] = (e_hi[node] - e_lo[node]) if honest else (s_hi[node] - s_lo[node])
            total += leaf_count[node]
    members = np.empty(total, np.int64)
    for node in range(n_nodes):
        if feature[node] < 0:
            src = ew if honest else sw
            lo = e_lo[node] if honest else s_lo[node]
            for k in range(leaf_count[node]):
                members[leaf_start[node] + k] = src[lo + k]
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), leaf_start, leaf_count, members)


@njit(nogil=True, cache=True)
def apply_tree(feature, threshold, left, right, base, x):
    node = 0
    while feature[base + node] >= 0:
        if x[feature[base + node]] <= threshold[base + node]:
            node = left[base + node]
        else:
            node = right[base + node]
    return node


@njit(nogil=True, cache=True)
def _accumulate(x, w, feature, threshold, left, right, leaf_start, leaf_count,
                node_off, members, member_off):
    """Add each tree's leaf weights for ``x`` into ``w``; returns the number of contributing trees."""
    n_trees = node_off.shape[0] - 1
    used = 0
    for b in range(n_trees):
        base = node_off[b]
        leaf = base + apply_tree(feature, threshold, left, right, base, x)
        cnt = leaf_count[leaf]
        if cnt == 0:
            continue
        used += 1
        start = member_off[b] + leaf_start[leaf]
        inv = 1.0 / cnt
        for k in range(cnt):
            w[members[start + k]] += inv
    return used


@njit(nogil=True, cache=True)
def forest_weights(x, n, feature, threshold, left, right, leaf_start, leaf_count,
                   node_off, members, member_off):
    w = np.zeros(n)
    used = _accumulate(x, w, feature, threshold, left, right, leaf_start, leaf_count,
                       node_off, members, member_off)
    if used > 0:
        w /= used
    return w


@njit(nogil=True, cache=True)
def predict_quantiles(Xq, alphas, order, y, feature, threshold, left, right, leaf_start,
                      leaf_count, node_off, members, member_off):
    """Weighted-ECDF quantiles; ``alphas`` must be ascending, ``order`` sorts ``y``."""
    n = y.shape[0]
    q = Xq.shape[0]
    na = alphas.shape[0]
    out = np.empty((q, na))
    w = np.zeros(n)
    for qi in range(q):
        w[:] = 0.0
        used = _accumulate(Xq[qi], w, feature, threshold, left, right, leaf_start, leaf_count,
                           node_off, members, member_off)
        scale = 1.0 / used
        cum = 0.0
        comp = 0.0
        ai = 0
        last = np.nan
        for j in range(n):
            idx = order[j]
            if w[idx] == 0.0:
                continue
            # compensated running sum keeps cum within an ulp of the exact mass
            term = w[idx] * scale - comp
            t = cum + term
            comp = (t - cum) - term
            cum = t
            last = y[idx]
            while ai < na and cum >= alphas[ai] - LEVEL_TOL:
                out[qi, ai] = last
                ai += 1
            if ai == na:
                break
        while ai < na:
            out[qi, ai] = last
            ai += 1
    return out


@njit(nogil=True, cache=True)
def predict_cdf(Xq, yq, order, y, feature, threshold, left, right, leaf_start, leaf_count,
                node_off, members, member_off):
    n = y.shape[0]
    q = Xq.shape[0]
    out = np.empty(q)
    w = np.zeros(n)
    for qi in range(q):
        w[:] = 0.0
        used = _accumulate(Xq[qi], w, feature, threshold, left, right, leaf_start, leaf_count,
                           node_off, members, member_off)
        scale = 1.0 / used
        cum = 0.0
        comp = 0.0
        above = False
        for j in range(n):
            idx = order[j]
            if w[idx] == 0.0:
                continue
            if y[idx] > yq[qi]:
                above = True
                break
            term = w[idx] * scale - comp
            t = cum + term
            comp = (t - cum) - term
            cum = t
        out[qi] = min(cum, 1.0) if above else 1.0
    return out
