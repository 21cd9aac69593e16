"""Layer building blocks on top of :mod:`invpt.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as tn
from .tensor import Buffer, Parameter, Rng, Tensor


class Module:
    """Container that discovers parameters, buffers and submodules by attribute order."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        yield from vars(self).items()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, val in self._children():
            if isinstance(val, Buffer):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters()}
        out.update({n: b.data for n, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        for name, arr in state.items():
            if name not in own:
                raise KeyError(f"unknown parameter {name!r}")
            if own[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {own[name].shape} vs {arr.shape}")
            own[name].data = np.array(arr, dtype=own[name].dtype)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        self.items = list(items)

    def _children(self):
        for i, m in enumerate(self.items):
            yield str(i), m

    def __getitem__(self, i):
        return self.items[i]

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


class ModuleDict(Module):
    def __init__(self, items=None):
        self.items = dict(items or {})

    def _children(self):
        yield from self.items.items()

    def __getitem__(self, key):
        return self.items[key]

    def __contains__(self, key):
        return key in self.items

    def keys(self):
        return self.items.keys()

    def values(self):
        return self.items.values()


def _zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=tn.default_dtype())


class Linear(Module):
    """Token-wise projection ``x @ W + b`` on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.weight = Parameter(rng.normal((d_in, d_out), math.sqrt(2.0 / (d_in + d_out))))
        self.bias = Parameter(_zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = tn.matmul(x, self.weight)
        return y if self.bias is None else tn.add(y, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng, stride: int = 1, pad: int | None = None, bias=True):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.weight = Parameter(rng.normal((c_out, c_in, k, k), math.sqrt(2.0 / (c_in * k * k))))
        self.bias = Parameter(_zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return tn.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class TransposedConv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: Rng):
        self.k = k
        self.weight = Parameter(rng.normal((c_in, c_out, k, k), math.sqrt(1.0 / c_in)))
        self.bias = Parameter(_zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return tn.transposed_conv2d(x, self.weight, self.bias, stride=self.k)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Parameter(np.ones(c, dtype=tn.default_dtype()))
        self.beta = Parameter(_zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(c, dtype=tn.default_dtype()))
        self.beta = Parameter(_zeros(c))
        self.running_mean = Buffer(_zeros(c))
        self.running_var = Buffer(np.ones(c, dtype=tn.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return tn.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class ConvBNReLU(Module):
    """3x3 conv (pad 1) -> batch norm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, k: int = 3):
        self.conv = Conv2d(c_in, c_out, k, rng, bias=False)  # BN cancels any conv bias
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return tn.relu(self.bn(self.conv(x)))

    def zero_(self) -> None:
        """Zero the conv and BN affine terms so the block outputs exactly zero."""
        for p in (self.conv.weight, self.bn.gamma, self.bn.beta):
            p.data[...] = 0


def conv_bn_relu(x: Tensor, block: ConvBNReLU) -> Tensor:
    return block(x)
