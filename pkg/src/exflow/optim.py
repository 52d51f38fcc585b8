"""Adam with bias correction over named Parameter leaves."""

from __future__ import annotations

import numpy as np

from exflow.autodiff import Parameter
from exflow.errors import DivergenceError


class Adam:
    """First/second-moment adaptive steps, one state pair per parameter.

    Moment buffers are keyed by parameter identity so the parameter list
    may grow between construction and stepping (a new task registers new
    embeddings mid-run). A parameter whose gradient stayed exactly zero
    for its whole history is left bit-identical: both moments stay zero
    and the update is 0/(0+eps).
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {}
        self._v = {}

    def add_param(self, p: Parameter) -> None:
        self.params.append(p)

    def step(self) -> None:
        """Apply one update from the gradients currently in the buffers."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p in self.params:
            g = p.grad
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter {p.name!r}")
            key = id(p)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p.data)
                self._v[key] = np.zeros_like(p.data)
            v = self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
