"""Parameter containers and the standard layers used by the pose model."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Attribute-registered tree of parameters, buffers and child modules."""

    def __init__(self):
        self.training = True
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            else:
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters/buffers in place; return the names that were loaded."""
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        unknown = [k for k in state if k not in own and k not in bufs]
        if strict and unknown:
            raise KeyError(f"unknown parameter names: {unknown[:5]}")
        if strict:
            missing = [k for k in list(own) + list(bufs) if k not in state]
            if missing:
                raise KeyError(f"missing parameter names: {missing[:5]}")
        loaded = []
        for name, value in state.items():
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                continue
            value = np.asarray(value)
            if value.shape != target.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape} vs model {target.shape}")
            target[...] = value
            loaded.append(name)
        return loaded

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for k in m._buffers:
                m._buffers[k] = m._buffers[k].astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan), size=shape)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = False, init_std: float | None = None):
        super().__init__()
        self.stride, self.padding = stride, padding
        shape = (cout, cin, kernel, kernel)
        if init_std is None:
            w = kaiming_normal(rng, shape, fan=cout * kernel * kernel)
        else:
            w = rng.normal(0.0, init_std, size=shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, stride: int = 1,
                 padding: int = 0, bias: bool = False, init_std: float = 0.001):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter(rng.normal(0.0, init_std, size=(cin, cout, kernel, kernel)))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.weight, self.bias, self._buffers["running_mean"],
                              self._buffers["running_var"], self.training, self.eps, self.momentum)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(xavier_uniform(rng, fin, fout))
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)
