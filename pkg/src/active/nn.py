"""Parameter containers and the conv layers the networks are assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, activation, conv2d, depthwise_conv2d


class Module:
    """Minimal parameter registry: attributes that are Tensors or Modules are walked by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.size != p.data.size:
                raise ValueError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.reshape(p.shape).astype(p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _walk(value, name: str):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key in sorted(value):
            yield from _walk(value[key], f"{name}.{key}")


def init_weight(rng: np.random.Generator, shape, dtype=np.float64, std: float | None = None) -> Tensor:
    """Normal with He scale ``sqrt(2 / fan_in)`` unless ``std`` is given."""
    if std is None:
        std = np.sqrt(2.0 / int(np.prod(shape[1:])))
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Conv(Module):
    """Conv + bias + activation."""

    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1,
                 act: str = "leaky_relu", dtype=np.float64):
        self.weight = init_weight(rng, (cout, cin, k, k), dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self._stride = stride
        self._pad = k // 2
        self._act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)
        return activation(y, self._act)


class DepthwiseConv(Module):
    def __init__(self, rng, channels: int, k: int = 3, stride: int = 1,
                 act: str = "silu", dtype=np.float64):
        self.weight = init_weight(rng, (channels, 1, k, k), dtype)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._stride = stride
        self._pad = k // 2
        self._act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = depthwise_conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)
        return activation(y, self._act)
