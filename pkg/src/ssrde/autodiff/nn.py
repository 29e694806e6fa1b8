"""Parameter containers: a tiny Module system plus conv / PReLU layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Base class; parameters and submodules are discovered from instance attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # bound 1/sqrt(fan_in): kaiming-uniform with negative slope sqrt(5)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Convolution layer; holds the kernel, bias, stride, padding and padding mode."""

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: Optional[int] = None,
        padding_mode: str = "zeros",
        bias: bool = True,
    ):
        if padding is None:
            padding = kernel // 2
        fan_in = in_ch * kernel * kernel
        self.weight = parameter(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = parameter(kaiming_uniform(rng, (out_ch,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding
        self.padding_mode = padding_mode

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode)

    def output_size(self, size: int) -> int:
        k = self.weight.shape[2]
        return (size + 2 * self.padding - k) // self.stride + 1


class ConvTranspose2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ):
        fan_in = out_ch * kernel * kernel
        self.weight = parameter(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = parameter(kaiming_uniform(rng, (out_ch,), fan_in)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_size(self, size: int) -> int:
        k = self.weight.shape[2]
        return (size - 1) * self.stride + k - 2 * self.padding


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25, learnable: bool = True):
        alpha = np.full(channels, init, dtype=get_default_dtype())
        self.alpha = parameter(alpha) if learnable else Tensor(alpha)

    def forward(self, x: Tensor) -> Tensor:
        return ops.prelu(x, self.alpha)
