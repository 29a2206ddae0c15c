"""Layers and parameter bookkeeping."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    """Container that discovers parameters and submodules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """Convolution with He-normal weights and zero bias."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = k // 2
        std = np.sqrt(2.0 / (cin * k * k))
        w = np.zeros((cout, cin, k, k)) if zero_init else rng.normal(0.0, std, size=(cout, cin, k, k))
        self.weight = Parameter(w, "weight")
        self.bias = Parameter(np.zeros(cout), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvAct(Conv2d):
    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(super().forward(x))


def assign_names(module: Module) -> None:
    for name, p in module.named_parameters():
        p.name = name
