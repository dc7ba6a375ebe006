"""SGD with momentum and Adam over a named parameter set."""
from __future__ import annotations

import numpy as np

from ..errors import ConfigError, PreconditionError

# reference hyper-settings from the image benchmarks the method was tuned on
SGD_DEFAULTS = {"lr": 1e-3, "momentum": 0.9}
ADAM_DEFAULTS = {"lr": 1e-4, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


class Optimizer:
    def __init__(self, params, lr):
        if not np.isfinite(lr) or lr < 0:
            raise ConfigError(f"learning rate must be finite and >= 0, got {lr}")
        self.params = dict(params)
        self.lr = float(lr)

    def _grads(self):
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise PreconditionError(f"no gradient for parameter {name!r}")
            grads[name] = p.grad
        return grads

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class SGD(Optimizer):
    def __init__(self, params, lr=SGD_DEFAULTS["lr"], momentum=SGD_DEFAULTS["momentum"]):
        super().__init__(params, lr)
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self._velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, g in self._grads().items():
            v = self.momentum * self._velocity[name] + g
            self._velocity[name] = v
            self.params[name].data -= self.lr * v


class Adam(Optimizer):
    def __init__(self, params, lr=ADAM_DEFAULTS["lr"], beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self):
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            m_hat = self._m[name] / c1
            v_hat = self._v[name] / c2
            self.params[name].data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, params, **hyper):
    """Build an optimizer by name: ``"sgd_momentum"`` or ``"adam"``."""
    if kind == "sgd_momentum":
        return SGD(params, **hyper)
    if kind == "adam":
        return Adam(params, **hyper)
    raise ConfigError(f"unknown optimizer {kind!r}")
