"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class OptimizerError(RuntimeError):
    pass


class AdamW:
    """Adam with weight decay applied directly to parameters.

    Per step: theta <- theta - lr*wd*theta (decay first, decoupled from
    the moments), then the bias-corrected moment update
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise OptimizerError(f"betas must be in [0, 1), got {beta1}, {beta2}")
        if lr < 0.0 or weight_decay < 0.0 or eps <= 0.0:
            raise OptimizerError(
                f"invalid settings lr={lr} weight_decay={weight_decay} eps={eps}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for parameter '{name}'")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment buffers keyed for checkpointing."""
        out = {}
        for name in self._m:
            out[f"opt.m.{name}"] = self._m[name]
            out[f"opt.v.{name}"] = self._v[name]
        return out
