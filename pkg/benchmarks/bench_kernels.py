"""Compiled vs pure-numpy kernel timings, plus one full training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 8]
"""
import argparse
import time

import numpy as np

from nanotfm import _backend
from nanotfm.eval.baselines import RandomForest
from nanotfm.model import NanoTabPFNModel, TableBatch
from nanotfm.prior import SyntheticPriorConfig, dataset_rng, generate_dataset
from nanotfm.train import TrainConfig, batch_loss, make_optimizer


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    # shapes seen in a default-size forward pass: 32 tables x 150 rows x 6 cells, width 96
    x = rng.standard_normal((32 * 150 * 6, 96)).astype(np.float32)
    gy = rng.standard_normal(x.shape).astype(np.float32)
    att = rng.standard_normal((32 * 6 * 4 * 150, 150)).astype(np.float32)
    gain, bias = np.ones(96, np.float32), np.zeros(96, np.float32)

    def cases(K):
        sm = K.softmax_fwd(att)
        _, xhat, rstd = K.layer_norm_fwd(x, gain, bias, 1e-5)
        return {
            "softmax_fwd": lambda: K.softmax_fwd(att),
            "softmax_bwd": lambda: K.softmax_bwd(sm, att),
            "layer_norm_fwd": lambda: K.layer_norm_fwd(x, gain, bias, 1e-5),
            "layer_norm_bwd": lambda: K.layer_norm_bwd(gy, xhat, rstd, gain),
            "gelu_fwd": lambda: K.gelu_fwd(x),
            "gelu_bwd": lambda: K.gelu_bwd(x, gy),
        }

    return cases


def forest_case():
    x, y = generate_dataset(SyntheticPriorConfig(), dataset_rng(0, 0))
    return lambda: RandomForest(n_estimators=100, seed=0).fit(x[:120], y[:120])


def train_step_case(batch_size):
    cfg = SyntheticPriorConfig()
    xs, ys = zip(*(generate_dataset(cfg, dataset_rng(1, i)) for i in range(batch_size)))
    batch = TableBatch(np.stack(xs), np.stack(ys).astype(np.int64), 75)
    model = NanoTabPFNModel(seed=0)
    opt = make_optimizer(model, TrainConfig())

    def step():
        model.zero_grad()
        batch_loss(model, batch)
        opt.step()

    return step


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--batch", type=int, default=8, help="tables per training step")
    args = p.parse_args()

    backends = _backend.available()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    cases = kernel_cases(np.random.default_rng(0))
    results = {}
    for name in backends:
        _backend.use(name)
        for kernel, fn in cases(_backend.K).items():
            results[kernel, name] = best_of(fn, args.repeat)
        results["forest_fit(100 trees)", name] = best_of(forest_case(), max(1, args.repeat // 5))
        results[f"train_step(batch={args.batch})", name] = best_of(train_step_case(args.batch), max(1, args.repeat // 5))

    rows = list(dict.fromkeys(k for k, _ in results))
    print(f"{'kernel':<24}" + "".join(f"{b + ' ms':>14}" for b in backends) + (f"{'speedup':>10}" if len(backends) > 1 else ""))
    for k in rows:
        ms = [results[k, b] * 1e3 for b in backends]
        line = f"{k:<24}" + "".join(f"{v:>14.2f}" for v in ms)
        if len(backends) > 1:
            line += f"{results[k, 'python'] / results[k, 'compiled']:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
