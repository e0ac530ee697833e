"""Adam with a global-norm gradient clip applied before the moment updates."""

from __future__ import annotations

import math

import numpy as np

from .tensor import NumericsError, Parameter


class Adam:
    """Standard Adam with bias correction.

    clip_norm <= 0 disables clipping. The clip rescales all gradients by
    clip_norm / ||g|| before they enter the moments, so the moments track the
    clipped gradient stream. Gradient reads, the norm reduction, and the
    per-parameter updates all run in the fixed order of the params list.
    """

    def __init__(self, params, lr, beta1=0.9, beta2=0.99, eps=1e-8, clip_norm=0.5):
        self.params: list[Parameter] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise NumericsError("duplicate parameter names")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.clip_norm = float(clip_norm)
        self.step_count = 0
        self.moments = {
            p.name: (np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        }

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = np.zeros_like(p.data)

    def step(self):
        grads = []
        for p in self.params:
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {p.name}")
            grads.append(g)
        if self.clip_norm > 0.0:
            total = 0.0
            for g in grads:
                total += float((g.astype(np.float64) ** 2).sum())
            norm = math.sqrt(total)
            if norm > self.clip_norm:
                s = np.asarray(self.clip_norm / norm, dtype=grads[0].dtype) if grads else 1.0
                grads = [g * s for g in grads]
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g in zip(self.params, grads):
            m, v = self.moments[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data[...] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
