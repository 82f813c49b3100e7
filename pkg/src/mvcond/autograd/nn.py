"""Parameter containers and a handful of standard layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Walks its attributes for ``Parameter``s and sub-``Module``s (also inside lists)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Parameter]:
        params = dict(self.named_parameters())
        for name, p in params.items():
            p.name = name
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters().values():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(state)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
                p.data = arr.astype(p.dtype).copy()


def _init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        w = np.zeros((din, dout), np.float32) if zero else _init(rng, (din, dout), din)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(dout, np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, zero: bool = False):
        shape = (cout, cin, k, k)
        w = np.zeros(shape, np.float32) if zero else _init(rng, shape, cin * k * k)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout, np.float32))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, n: int, axis: int = -1):
        self.gain = Parameter(np.ones(n, np.float32))
        self.bias = Parameter(np.zeros(n, np.float32))
        self.axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, axis=self.axis)
