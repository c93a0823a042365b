"""Named trainable parameters and the Adam update."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor
from .errors import NumericError


class Parameter:
    """A named weight with its Adam moment buffers."""

    __slots__ = ("name", "tensor", "adam_m", "adam_v", "step_count")

    def __init__(self, name: str, tensor: Tensor):
        if not tensor.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self.name = name
        self.tensor = tensor
        self.adam_m = np.zeros_like(tensor.data)
        self.adam_v = np.zeros_like(tensor.data)
        self.step_count = 0

    @property
    def data(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


class ParamStore:
    """Creates and registers parameters in a fixed, reproducible order."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Parameter] = {}

    def _register(self, name, data):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(data, requires_grad=True))
        self.params[name] = p
        return p

    def uniform(self, name, shape, fan_in):
        # centered uniform with fan-in scaling: variance 1/fan_in
        bound = np.sqrt(3.0 / fan_in)
        return self._register(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape))

    def ordered(self):
        return list(self.params.values())


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam on every parameter; zeroes grads afterward."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ValueError(f"parameter {p.name!r} has no gradient buffer")
        p.step_count += 1
        t = p.step_count
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(p.tensor.data).all():
            raise NumericError(f"non-finite weights in {p.name!r} after Adam step")
        p.tensor.zero_grad()
