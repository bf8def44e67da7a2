from __future__ import annotations

from typing import Iterator, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError

Activation = Literal["relu", "softplus", "tanh", "leaky_relu", "none"]


class Module:
    """Parameter container; attributes that are Tensors, Modules or lists of Modules are walked."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{k}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing tensor {key!r} in state")
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"load {key}", p.shape, value.shape)
            p.data = value.copy()
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, *, zero: bool = False) -> None:
        bound = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.uniform(-bound, bound, size=(n_in, n_out))
        b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, size=n_out)
        self.weight = ad.parameter(w)
        self.bias = ad.parameter(b)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def activate(z: Tensor, kind: Activation) -> Tensor:
    if kind == "relu":
        return ad.relu(z)
    if kind == "softplus":
        return ad.softplus(z)
    if kind == "tanh":
        return ad.tanh(z)
    if kind == "leaky_relu":
        return ad.leaky_relu(z)
    return z


def activation_slope(z: Tensor, kind: Activation) -> Tensor:
    """d act / dz as a differentiable tensor (used by forward-mode tangents)."""

    if kind == "softplus":
        return ad.sigmoid(z)
    if kind == "tanh":
        t = ad.tanh(z)
        return 1.0 - t * t
    if kind == "relu":
        return Tensor(z.data > 0)
    if kind == "leaky_relu":
        return Tensor(np.where(z.data > 0, 1.0, 0.2))
    return Tensor(np.ones_like(z.data))


class MLP(Module):
    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator,
        *,
        activation: Activation = "relu",
        zero_last: bool = False,
    ) -> None:
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        n = len(sizes) - 1
        self.layers = [
            Linear(sizes[k], sizes[k + 1], rng, zero=zero_last and k == n - 1) for k in range(n)
        ]
        self.activation: Activation = activation
        self.sizes = tuple(sizes)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for k, layer in enumerate(self.layers):
            h = layer(h)
            if k < len(self.layers) - 1:
                h = activate(h, self.activation)
        return h

    def jvp(self, x: Tensor, tangents: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
        """Output and directional derivatives along each tangent of ``x``.

        Tangents are carried through the graph, so the returned derivatives are
        themselves differentiable with respect to the weights and ``x``.
        """

        h = x
        dh = list(tangents)
        for k, layer in enumerate(self.layers):
            z = layer(h)
            dz = [t @ layer.weight for t in dh]
            if k < len(self.layers) - 1:
                slope = activation_slope(z, self.activation)
                h = activate(z, self.activation)
                dh = [slope * t for t in dz]
            else:
                h, dh = z, dz
        return h, dh


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        rng: np.random.Generator,
        *,
        kernel: int = 4,
        stride: int = 2,
        padding: int = 1,
    ) -> None:
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(c_out, c_in, kernel, kernel)))
        self.bias = ad.parameter(rng.uniform(-bound, bound, size=c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
