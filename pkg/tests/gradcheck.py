"""Central finite-difference oracle for autodiff gradients (64-bit)."""
import numpy as np

from nanotfm import tensor as T


def numeric_grad(fn, arrays, h=1e-5):
    """d fn / d arrays[i] by central differences; ``fn`` maps Tensors to a scalar Tensor."""
    grads = []
    with T.no_grad():
        for i, a in enumerate(arrays):
            g = np.zeros_like(a)
            for j in np.ndindex(a.shape):
                old = a[j]
                a[j] = old + h
                fp = float(fn(*[T.Tensor(b) for b in arrays]).item())
                a[j] = old - h
                fm = float(fn(*[T.Tensor(b) for b in arrays]).item())
                a[j] = old
                g[j] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def autodiff_grad(fn, arrays):
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    fn(*leaves).backward()
    return [np.zeros_like(a) if t.grad is None else t.grad for t, a in zip(leaves, arrays)]


def max_rel_error(fn, *arrays, h=1e-5, floor=1e-6):
    """Largest elementwise |auto - numeric| / max(|auto|, |numeric|, floor)."""
    with T.precision("float64"):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        auto = autodiff_grad(fn, arrays)
        num = numeric_grad(fn, arrays, h)
    worst = 0.0
    for a, n in zip(auto, num):
        if a.size:
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def model_loss_error(cfg, x, y, split, seed=0, prune_last=True):
    """Finite-difference check of a full model loss over every parameter and the input cells."""
    from nanotfm.model import TableBatch, forward, init_parameters

    with T.precision("float64"):
        base = init_parameters(cfg, seed=seed, dtype=np.float64)
        names = list(base)
        # break the symmetric init so biases and gains carry non-trivial gradients
        rng = np.random.default_rng(seed + 1)
        arrays = [p.data + 0.1 * rng.standard_normal(p.shape) for p in base.values()]

        def loss(xt, *ps):
            params = dict(zip(names, ps))
            logits = forward(TableBatch(xt, y, split), params, cfg, prune_last=prune_last)
            return T.cross_entropy(logits, y[:, split:])

        return max_rel_error(loss, np.asarray(x, dtype=np.float64), *arrays)
