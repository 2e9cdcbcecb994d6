"""Schedule-free AdamW.

Three sequences per parameter: ``z`` takes Adam-style steps, ``x`` is a
weighted running average of ``z`` (weights gamma_t^2), and gradients are
taken at the interpolation ``y = (1 - beta1) z + beta1 x``. The model's
parameter arrays hold ``y`` during training; ``x`` is what you deploy.
"""
from __future__ import annotations

import math

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step, name):
        super().__init__(f"non-finite gradient for {name!r} at step {step}")
        self.step = step
        self.name = name


class ScheduleFreeAdamW:
    def __init__(self, params, lr=4e-3, beta1=0.9, beta2=0.999, eps=1e-8, warmup_steps=100, weight_decay=0.0):
        if not lr >= 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if isinstance(params, dict):
            params = list(params.values())
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.weight_decay = weight_decay
        self.t = 0
        self.gamma_sq_sum = 0.0
        self.z = {p.name: p.data.copy() for p in params}
        self.x = {p.name: p.data.copy() for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def gamma(self, t):
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, t / self.warmup_steps)

    def step(self):
        """One update from the gradients currently stored in ``p.grad``."""
        t = self.t + 1
        for p in self.params:
            if p.grad is None or not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(t, p.name)
        self.t = t
        gamma = self.gamma(t)
        bias2 = 1.0 - self.beta2**t
        self.gamma_sq_sum += gamma * gamma
        c = gamma * gamma / self.gamma_sq_sum if self.gamma_sq_sum > 0 else 0.0
        for p in self.params:
            g = p.grad
            z, x, v = self.z[p.name], self.x[p.name], self.v[p.name]
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                z -= (gamma * self.weight_decay) * p.data
            z -= gamma * g / (np.sqrt(v / bias2) + self.eps)
            x *= 1.0 - c
            x += c * z
            p.data = self.eval_point(p.name)

    def eval_point(self, name):
        return (1.0 - self.beta1) * self.z[name] + self.beta1 * self.x[name]

    def averaged(self):
        """The ``x`` iterate of every parameter (copies)."""
        return {k: v.copy() for k, v in self.x.items()}

    def state_dict(self):
        return {
            "t": self.t,
            "gamma_sq_sum": self.gamma_sq_sum,
            "z": {k: v.copy() for k, v in self.z.items()},
            "x": self.averaged(),
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        names = {p.name for p in self.params}
        for key in ("z", "x", "v"):
            if set(state[key]) != names:
                raise ValueError(f"optimizer state '{key}' does not cover the parameter set")
        self.t = int(state["t"])
        self.gamma_sq_sum = float(state["gamma_sq_sum"])
        for p in self.params:
            dt = p.data.dtype
            self.z[p.name] = np.array(state["z"][p.name], dtype=dt)
            self.x[p.name] = np.array(state["x"][p.name], dtype=dt)
            self.v[p.name] = np.array(state["v"][p.name], dtype=dt)
            p.data = self.eval_point(p.name)


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total
