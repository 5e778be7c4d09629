"""Dense layers over :mod:`procplan.autodiff` with named parameters."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


class Dense:
    def __init__(self, rng, n_in, n_out, zero=False, bias=True):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.W)
        return y if self.b is None else ad.add(y, self.b)

    def named_parameters(self, prefix):
        out = {f"{prefix}.W": self.W}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class MLP:
    """tanh hidden layers, linear output. ``zero_last`` zero-initialises the head."""

    def __init__(self, rng, sizes, zero_last=False):
        self.layers = [
            Dense(rng, a, b, zero=zero_last and i == len(sizes) - 2)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x):
        for layer in self.layers[:-1]:
            x = ad.tanh(layer(x))
        return self.layers[-1](x)

    def named_parameters(self, prefix):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out


def load_into(params: dict, arrays: dict, prefix=""):
    """Copy arrays (by name) into parameter tensors, checking shapes."""
    for name, p in params.items():
        key = prefix + name
        if key not in arrays:
            raise KeyError(f"missing parameter array {key!r}")
        a = np.asarray(arrays[key], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"parameter {key!r}: shape {a.shape} does not match {p.shape}")
        p.data[...] = a
