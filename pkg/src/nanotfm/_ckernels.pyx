# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``_fallback`` function-for-function.

Row-wise kernels run serially over rows in a fixed order, so results are
reproducible run to run regardless of thread settings.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, INFINITY
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef floating m
    cdef double s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            for j in range(d):
                out[i, j] = x[i, j] - m
    # numpy's SIMD exp beats scalar libm by ~4x
    np.exp(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += out[i, j]
            s = 1.0 / s
            for j in range(d):
                out[i, j] = <floating>(out[i, j] * s)
    return out_arr


def softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += gy[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = <floating>(y[i, j] * (gy[i, j] - dot))
    return out_arr


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dt)
    xhat_arr = np.empty((n, d), dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef floating[:, ::1] y = y_arr
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef double mean, var, r, c
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <floating>r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xhat[i, j] = <floating>c
                y[i, j] = <floating>(c * gain[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(floating[:, ::1] gy, floating[:, ::1] xhat, floating[::1] rstd, floating[::1] gain):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    gx_arr = np.empty((n, d), dtype=dt)
    cdef floating[:, ::1] gx = gx_arr
    cdef double[::1] dgain = np.zeros(d)
    cdef double[::1] dbias = np.zeros(d)
    cdef double m1, m2, dx
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dx = gy[i, j] * gain[j]
                m1 += dx
                m2 += dx * xhat[i, j]
                dgain[j] += gy[i, j] * xhat[i, j]
                dbias[j] += gy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = <floating>((gy[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i])
    return gx_arr, np.asarray(dgain).astype(dt), np.asarray(dbias).astype(dt)


def gelu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef floating v
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = <floating>(GELU_C * (v + GELU_A * v * v * v))
    np.tanh(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            for j in range(d):
                out[i, j] = <floating>(0.5 * x[i, j] * (1.0 + out[i, j]))
    return out_arr


def gelu_bwd(floating[:, ::1] x, floating[:, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    cdef floating v, v2, t
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = <floating>(GELU_C * (v + GELU_A * v * v * v))
    np.tanh(out_arr, out=out_arr)
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                v2 = v * v
                t = out[i, j]
                out[i, j] = <floating>(gy[i, j] * (0.5 * (1.0 + t)
                                       + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2)))
    return out_arr


# --- decision trees -------------------------------------------------------

cdef inline uint64_t splitmix_next(uint64_t* state) noexcept nogil:
    state[0] += <uint64_t>0x9E3779B97F4A7C15
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EB
    return z ^ (z >> 31)


cdef inline double gini_weighted(double* counts, int k, double total) noexcept nogil:
    # total * gini(counts)
    cdef double s = 0.0, p
    cdef int c
    if total <= 0:
        return 0.0
    for c in range(k):
        p = counts[c] / total
        s += p * p
    return total * (1.0 - s)


cdef void best_split_c(const double[:, ::1] x, const int64_t[::1] y, const double[::1] w,
                       int64_t* idx, Py_ssize_t m, int k, int64_t* feats, int nf,
                       double* vals, int64_t* order, double* total, double* left,
                       int* out_f, double* out_thr, double* out_score) noexcept nogil:
    cdef Py_ssize_t j, a, b, f_i
    cdef int64_t f, s
    cdef double n = 0.0, nl, score, thr, tmp_v
    cdef int64_t tmp_o
    cdef int c
    for c in range(k):
        total[c] = 0.0
    for j in range(m):
        total[y[idx[j]]] += w[idx[j]]
    for c in range(k):
        n += total[c]
    for f_i in range(nf):
        f = feats[f_i]
        # stable insertion sort of positions 0..m-1 by x[idx[pos], f]
        for j in range(m):
            order[j] = j
            vals[j] = x[idx[j], f]
        for a in range(1, m):
            tmp_v = vals[a]
            tmp_o = order[a]
            b = a - 1
            while b >= 0 and vals[b] > tmp_v:
                vals[b + 1] = vals[b]
                order[b + 1] = order[b]
                b -= 1
            vals[b + 1] = tmp_v
            order[b + 1] = tmp_o
        for c in range(k):
            left[c] = 0.0
        nl = 0.0
        for j in range(m - 1):
            s = idx[order[j]]
            left[y[s]] += w[s]
            nl += w[s]
            if vals[j + 1] <= vals[j]:
                continue
            score = gini_weighted(left, k, nl)
            for c in range(k):
                left[k + c] = total[c] - left[c]
            score = score + gini_weighted(left + k, k, n - nl)
            if score < out_score[0]:
                thr = 0.5 * (vals[j] + vals[j + 1])
                if thr == vals[j + 1]:
                    thr = vals[j]
                out_f[0] = <int>f
                out_thr[0] = thr
                out_score[0] = score


def best_split(double[:, ::1] x, int64_t[::1] y, double[::1] w, idx_in, int n_classes, features):
    cdef int64_t[::1] idx = np.ascontiguousarray(idx_in, dtype=np.int64)
    cdef int64_t[::1] feats = np.ascontiguousarray(features, dtype=np.int64)
    cdef Py_ssize_t m = idx.shape[0]
    cdef double[::1] vals = np.empty(max(m, 1))
    cdef int64_t[::1] order = np.empty(max(m, 1), dtype=np.int64)
    cdef double[::1] buf = np.empty(3 * n_classes)
    cdef int f = -1
    cdef double thr = 0.0, score = INFINITY
    if m == 0 or feats.shape[0] == 0:
        return (-1, 0.0, INFINITY)
    best_split_c(x, y, w, &idx[0], m, n_classes, &feats[0], <int>feats.shape[0],
                 &vals[0], &order[0], &buf[0], &buf[n_classes], &f, &thr, &score)
    # the Python twin scores with n_l*gini_l + n_r*gini_r too
    return (f, thr, score)


def build_tree(double[:, ::1] x, int64_t[::1] y, double[::1] w, int n_classes,
               int max_features, double min_samples_split, uint64_t seed):
    """Grow an unpruned Gini CART tree on the samples with positive weight.

    Weights act as integer multiplicities (bootstrap counts). Feature
    subsampling draws ``max_features`` candidates per node from a splitmix64
    stream seeded with ``seed``; if all are constant on the node the
    remaining features are tried in the same shuffled order.

    Returns ``(feature, threshold, left, right, value)`` node arrays; leaves
    have ``left == -1`` and ``value`` rows hold class fractions.
    """
    cdef Py_ssize_t n = x.shape[0], n_feat = x.shape[1], i, j, cap, m, nl_cnt
    cdef uint64_t state = seed
    cdef int k = n_classes, f, c, nz, found
    cdef double thr, score, cnt_sum
    cdef int64_t tmp

    # sample indices of every node live in one pool, partitioned in place
    cdef int64_t[::1] pool = np.empty(max(n, 1), dtype=np.int64)
    m = 0
    for i in range(n):
        if w[i] > 0:
            pool[m] = i
            m += 1

    cap = 2 * m + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, k))
    cdef int64_t[::1] feature_v = feature, left_v = left, right_v = right
    cdef double[::1] threshold_v = threshold
    cdef double[:, ::1] value_v = value
    cdef int64_t[::1] st_node = np.empty(cap, dtype=np.int64)
    cdef int64_t[::1] st_lo = np.empty(cap, dtype=np.int64)
    cdef int64_t[::1] st_hi = np.empty(cap, dtype=np.int64)
    cdef int64_t[::1] perm = np.empty(max(n_feat, 1), dtype=np.int64)
    cdef double[::1] vals = np.empty(max(m, 1))
    cdef int64_t[::1] order = np.empty(max(m, 1), dtype=np.int64)
    cdef double[::1] buf = np.empty(3 * k)
    cdef double[::1] counts = np.empty(k)
    cdef int64_t[::1] scratch = np.empty(max(m, 1), dtype=np.int64)
    cdef Py_ssize_t n_nodes = 0, sp = 0, node, lo, hi, a, ln, rn, start

    # root
    for i in range(m):
        value_v[0, y[pool[i]]] += w[pool[i]]
    n_nodes = 1
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = m
    sp = 1

    with nogil:
        while sp > 0:
            sp -= 1
            node = st_node[sp]
            lo = st_lo[sp]
            hi = st_hi[sp]
            # value_v[node] still holds raw weighted counts here
            cnt_sum = 0.0
            nz = 0
            for c in range(k):
                cnt_sum += value_v[node, c]
                if value_v[node, c] > 0:
                    nz += 1
            for c in range(k):
                counts[c] = value_v[node, c]
                value_v[node, c] = value_v[node, c] / cnt_sum
            if cnt_sum < min_samples_split or nz <= 1:
                continue
            for j in range(n_feat):
                perm[j] = j
            for j in range(n_feat - 1, 0, -1):
                a = <Py_ssize_t>(splitmix_next(&state) % <uint64_t>(j + 1))
                tmp = perm[j]
                perm[j] = perm[a]
                perm[a] = tmp
            f = -1
            thr = 0.0
            score = INFINITY
            best_split_c(x, y, w, &pool[lo], hi - lo, k, &perm[0], max_features,
                         &vals[0], &order[0], &buf[0], &buf[k], &f, &thr, &score)
            if f < 0 and max_features < n_feat:
                for j in range(max_features, n_feat):
                    score = INFINITY
                    best_split_c(x, y, w, &pool[lo], hi - lo, k, &perm[j], 1,
                                 &vals[0], &order[0], &buf[0], &buf[k], &f, &thr, &score)
                    if f >= 0:
                        break
            if f < 0:
                continue
            # stable partition of pool[lo:hi] into <= thr | > thr
            nl_cnt = 0
            start = 0
            for j in range(lo, hi):
                if x[pool[j], f] <= thr:
                    pool[lo + nl_cnt] = pool[j]
                    nl_cnt += 1
                else:
                    scratch[start] = pool[j]
                    start += 1
            for j in range(start):
                pool[lo + nl_cnt + j] = scratch[j]
            feature_v[node] = f
            threshold_v[node] = thr
            ln = n_nodes
            rn = n_nodes + 1
            n_nodes += 2
            left_v[node] = ln
            right_v[node] = rn
            for j in range(lo, lo + nl_cnt):
                value_v[ln, y[pool[j]]] += w[pool[j]]
            for j in range(lo + nl_cnt, hi):
                value_v[rn, y[pool[j]]] += w[pool[j]]
            st_node[sp] = rn
            st_lo[sp] = lo + nl_cnt
            st_hi[sp] = hi
            sp += 1
            st_node[sp] = ln
            st_lo[sp] = lo
            st_hi[sp] = lo + nl_cnt
            sp += 1
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes],
            right[:n_nodes], value[:n_nodes])


def tree_apply(double[:, ::1] x, int64_t[::1] feature, double[::1] threshold,
               int64_t[::1] left, int64_t[::1] right):
    cdef Py_ssize_t n = x.shape[0], i
    cdef int64_t node
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out_v = out
    with nogil:
        for i in range(n):
            node = 0
            while left[node] >= 0:
                if x[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out_v[i] = node
    return out
