"""SGD with momentum and weight decay, plus the temperature clamp."""

import numpy as np

from .tensor import Parameter

TEMPERATURE_FLOOR = 0.05


class SGD:
    """Classic momentum SGD: v = mu*v - lr*(g + wd*w); w += v.

    Frozen parameters and parameters without a gradient are skipped.
    `clamp_min` keeps temperatures positive after every step.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clamp_min: float = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clamp_min = clamp_min
        self._velocity = {id(p): np.zeros_like(p.tensor.data) for p in self.params}

    def step(self):
        for p in self.params:
            if p.frozen or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.tensor.data
            v = self._velocity[id(p)]
            v *= self.momentum
            v -= self.lr * g
            p.tensor.data += v
            if self.clamp_min is not None:
                np.maximum(p.tensor.data, self.clamp_min, out=p.tensor.data)

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None


def init_param(rng: np.random.Generator, name: str, shape, scheme: str, dtype=np.float32) -> Parameter:
    """Weight init: 'he' for conv/ReLU stacks, 'xavier' fan-balanced uniform, 'zeros'."""
    from .tensor import Tensor

    if scheme == "zeros":
        data = np.zeros(shape, dtype=dtype)
    elif scheme == "he":
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    elif scheme == "xavier":
        fan_out = shape[0]
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Parameter(Tensor(data, requires_grad=True), name=name)
