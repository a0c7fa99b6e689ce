"""Parameter containers and the small layers everything is built from.

Weights are drawn from ``U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`` with
``gain = sqrt(3)`` (unit fan-in variance; smaller gains let features
collapse to per-cloud constants through the deep stack, larger ones blow up
the un-normalised seed up-sampler). Biases use ``gain = 1``. Creation order is fixed, so a
seed fully determines the initial parameters.
"""
import dataclasses
import math

import numpy as np

from . import tensor as T

GAIN = math.sqrt(3.0)
BIAS_GAIN = 1.0


def uniform(rng, shape, fan_in, gain=None):
    bound = (GAIN if gain is None else gain) / math.sqrt(fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclasses.dataclass
class Linear:
    weight: T.Tensor
    bias: T.Tensor | None = None

    @classmethod
    def init(cls, rng, n_in, n_out, bias=True, zero=False):
        if zero:
            w = T.Tensor(np.zeros((n_in, n_out)), requires_grad=True)
            b = T.Tensor(np.zeros(n_out), requires_grad=True) if bias else None
            return cls(w, b)
        w = uniform(rng, (n_in, n_out), n_in)
        b = uniform(rng, (n_out,), n_in, gain=BIAS_GAIN) if bias else None
        return cls(w, b)

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


@dataclasses.dataclass
class MLP:
    """Linear layers with relu between them (none after the last)."""

    layers: list

    @classmethod
    def init(cls, rng, dims, zero_last=False):
        layers = [
            Linear.init(rng, a, b, zero=zero_last and i == len(dims) - 2)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]
        return cls(layers)

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            if i:
                x = T.relu(x)
            x = layer(x)
        return x


def named_parameters(obj, prefix=""):
    """Yield ``(dotted_name, Tensor)`` for every parameter reachable from ``obj``."""
    if isinstance(obj, T.Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            if f.metadata.get("static"):
                continue
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, item in obj.items():
            yield from named_parameters(item, f"{prefix}.{key}" if prefix else str(key))


def parameters(obj):
    return [t for _, t in named_parameters(obj)]


def count_parameters(obj):
    return int(sum(t.size for t in parameters(obj)))
