"""Parameter containers and the convolutional building blocks."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Minimal module tree; parameters and children are discovered by attribute order."""

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_params", OrderedDict())[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        elif isinstance(value, ModuleList):
            self.__dict__.setdefault("_children", OrderedDict())[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy arrays into parameters; returns names that were loaded."""
        params = dict(self.named_parameters())
        if strict:
            missing = set(params) - set(state)
            unexpected = set(state) - set(params)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        loaded = []
        for name, arr in state.items():
            if name not in params:
                continue
            p = params[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)
            loaded.append(name)
        return loaded

    def cast(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList:
    def __init__(self, modules=()) -> None:
        self._items = list(modules)

    def append(self, module) -> None:
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def small_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = False) -> None:
        self.weight = parameter(small_uniform(rng, (d_in, d_out), d_in))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, axis=-1, eps=self.eps)


class InstanceNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5) -> None:
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return T.instance_norm(x, self.weight, self.bias, eps=self.eps)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1,
                 bias: bool = False) -> None:
        kernel = T._triple(kernel)
        self.stride = T._triple(stride)
        self.padding = tuple(k // 2 for k in kernel)
        fan_in = c_in * math.prod(kernel)
        self.weight = parameter(he_normal(rng, (c_out, c_in) + kernel, fan_in))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x):
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    """Upsampling by transposed convolution with kernel == stride."""

    def __init__(self, c_in: int, c_out: int, stride, rng: np.random.Generator) -> None:
        self.stride = T._triple(stride)
        fan_in = c_in * math.prod(self.stride)
        self.weight = parameter(he_normal(rng, (c_in, c_out) + self.stride, fan_in))

    def forward(self, x):
        return T.conv_transpose3d(x, self.weight, None, self.stride, 0)


class ConvNormAct(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng, stride=1, act: bool = True) -> None:
        self.conv = Conv3d(c_in, c_out, kernel, rng, stride)
        self.norm = InstanceNorm3d(c_out)
        self.act = act

    def forward(self, x):
        x = self.norm(self.conv(x))
        return T.leaky_relu(x, 0.01) if self.act else x


class ResidualBlock(Module):
    """``x + norm(conv(lrelu(norm(conv(x)))))``; 1x1x1 projection when channels change."""

    def __init__(self, c_in: int, c_out: int, kernel, rng) -> None:
        self.conv1 = ConvNormAct(c_in, c_out, kernel, rng)
        self.conv2 = ConvNormAct(c_out, c_out, kernel, rng, act=False)
        self.shortcut = Conv3d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x):
        branch = self.conv2(self.conv1(x))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return skip + branch
