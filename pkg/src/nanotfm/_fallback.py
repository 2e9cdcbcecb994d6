"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and semantics. All row-wise kernels take C-contiguous 2-D arrays and operate
along the last axis.
"""
import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_MASK64 = (1 << 64) - 1


def softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def layer_norm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].astype(x.dtype, copy=False)


def layer_norm_bwd(gy, xhat, rstd, gain):
    dxhat = gy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    gx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, (gy * xhat).sum(axis=0), gy.sum(axis=0)


def gelu_fwd(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, gy):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return gy * d


# --- decision trees -------------------------------------------------------

class _SplitMix:
    """splitmix64 stream; bit-identical to the C version in _ckernels."""

    def __init__(self, seed):
        self.state = seed & _MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n):
        return self.next() % n


def _gini_from_counts(counts, total):
    if total <= 0:
        return 0.0
    s = 0.0
    for c in counts:
        p = c / total
        s += p * p
    return 1.0 - s


def best_split(x, y, w, idx, n_classes, features):
    """Best Gini split of the samples ``idx`` over the candidate ``features``.

    Returns ``(feature, threshold, score)`` where ``score`` is the weighted
    child impurity sum ``n_l*gini_l + n_r*gini_r`` (lower is better), or
    ``(-1, 0.0, inf)`` when no feature separates the samples.
    """
    best = (-1, 0.0, math.inf)
    wi = w[idx]
    yi = y[idx]
    total = np.bincount(yi, weights=wi, minlength=n_classes)
    n = float(total.sum())
    for f in features:
        xs = x[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        left = np.zeros(n_classes)
        nl = 0.0
        for j in range(len(order) - 1):
            k = order[j]
            left[yi[k]] += wi[k]
            nl += wi[k]
            if xs[j + 1] <= xs[j]:
                continue
            right = total - left
            nr = n - nl
            score = nl * _gini_from_counts(left, nl) + nr * _gini_from_counts(right, nr)
            if score < best[2]:
                thr = 0.5 * (xs[j] + xs[j + 1])
                if thr == xs[j + 1]:
                    thr = xs[j]
                best = (int(f), float(thr), score)
    return best


def build_tree(x, y, w, n_classes, max_features, min_samples_split, seed):
    """Grow an unpruned CART tree; see ``_ckernels.build_tree``."""
    rng = _SplitMix(seed)
    n_features = x.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []
    root_idx = np.flatnonzero(w > 0)

    def new_node(idx):
        counts = np.bincount(y[idx], weights=w[idx], minlength=n_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts / counts.sum())
        return len(feature) - 1

    stack = [(new_node(root_idx), root_idx)]
    while stack:
        node, idx = stack.pop()
        counts = np.bincount(y[idx], weights=w[idx], minlength=n_classes)
        if counts.sum() < min_samples_split or np.count_nonzero(counts) <= 1:
            continue
        perm = list(range(n_features))
        for i in range(n_features - 1, 0, -1):
            j = rng.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        f, thr, _ = best_split(x, y, w, idx, n_classes, perm[:max_features])
        if f < 0 and max_features < n_features:
            # sampled features were all constant; keep looking like CART does
            for extra in perm[max_features:]:
                f, thr, _ = best_split(x, y, w, idx, n_classes, [extra])
                if f >= 0:
                    break
        if f < 0:
            continue
        mask = x[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = thr
        ln, rn = new_node(li), new_node(ri)
        left[node], right[node] = ln, rn
        stack.append((rn, ri))
        stack.append((ln, li))
    return (
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64).reshape(len(feature), n_classes),
    )


def tree_apply(x, feature, threshold, left, right):
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(x.shape[0]):
        node = 0
        while left[node] >= 0:
            node = left[node] if x[i, feature[node]] <= threshold[node] else right[node]
        out[i] = node
    return out
