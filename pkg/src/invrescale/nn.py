"""Parameter containers and the few layer types the networks are built from."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Var
from .numerics import FLOAT


def param(data, name=None) -> Var:
    return Var(np.asarray(data, dtype=FLOAT), requires_grad=True, name=name)


def frozen(data) -> Var:
    return Var(np.asarray(data, dtype=FLOAT))


class Module:
    """Anything holding trainable ``Var`` leaves, directly or in child modules.

    Parameters are discovered by walking instance attributes in definition
    order, so names and ordering are stable across runs.
    """

    def named_parameters(self, prefix: str = ""):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Var):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Var) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter in place (float64 is used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, rng=None, zero=False, bias=True):
        self.stride = stride
        self.padding = k // 2
        shape = (c_out, c_in, k, k)
        if zero or rng is None:
            w = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (c_in * k * k))  # He-uniform for ReLU nets
            w = rng.uniform(-bound, bound, size=shape)
        self.weight = param(w)
        self.bias = param(np.zeros(c_out)) if bias else None

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Dense(Module):
    def __init__(self, d_in, d_out, rng=None, zero=False):
        if zero or rng is None:
            w = np.zeros((d_out, d_in))
        else:
            bound = np.sqrt(6.0 / d_in)
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x):
        return ag.linear(x, self.weight, self.bias)
