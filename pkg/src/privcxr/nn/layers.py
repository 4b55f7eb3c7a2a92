"""Layers with explicit forward/backward and per-sample parameter gradients.

Every ``backward`` returns the gradient w.r.t. the layer input and stores,
for each parameter, a ``grad_sample`` array of shape ``(B, *param.shape)``
whose row ``i`` depends on sample ``i`` only. All arrays are float64.

Batched products go through ``np.matmul`` on stacked 3-d operands so that
each sample is its own GEMM; a sample's result does not depend on what else
is in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from privcxr import kernels


class NumericalError(FloatingPointError):
    """A non-finite value appeared inside the network."""


@dataclass
class Parameter:
    data: np.ndarray
    grad_sample: np.ndarray | None = None
    grad: np.ndarray | None = None  # batch-summed, set only when per-sample mode is off
    # optional (B, ...) destination inside a caller-owned (B, P) matrix
    sample_out: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.data.size)


class Module:
    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Parameter:
        p = Parameter(np.ascontiguousarray(value, dtype=np.float64))
        self._params[name] = p
        return p

    def add_child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix.rstrip("."), self
        for cname, child in self._children.items():
            yield from child.named_modules(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    __call__ = forward


def kaiming_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
        rng: np.random.Generator | None = None,
    ) -> None:
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.k, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        init = kaiming_normal(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.weight = self.add_param("weight", init)
        self.bias = self.add_param("bias", np.zeros(out_channels)) if bias else None
        self.per_sample = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"Conv2d expects (B, {self.in_channels}, H, W) input, got {x.shape}"
            )
        B, _, H, W = x.shape
        k, s, p = self.k, self.stride, self.padding
        self._x_shape = x.shape
        self._cols = kernels.im2col(np.ascontiguousarray(x), k, k, s, p)
        self._Ho = (H + 2 * p - k) // s + 1
        self._Wo = (W + 2 * p - k) // s + 1
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = np.matmul(wmat, self._cols.transpose(0, 2, 1))  # (B, out, L)
        if self.bias is not None:
            out = out + self.bias.data[:, None]
        return out.reshape(B, self.out_channels, self._Ho, self._Wo)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B = dy.shape[0]
        dyr = np.ascontiguousarray(dy).reshape(B, self.out_channels, -1)  # (B, out, L)
        if self.per_sample:
            dest = self.weight.sample_out
            if dest is not None and dest.shape[0] == B:
                gw = np.matmul(dyr, self._cols, out=dest.reshape(B, self.out_channels, -1))
            else:
                gw = np.matmul(dyr, self._cols)  # (B, out, K)
            self.weight.grad_sample = gw.reshape((B,) + self.weight.data.shape)
        else:
            # one GEMM over the whole batch; only the batch sum is kept
            gw = np.tensordot(dyr, self._cols, axes=([0, 2], [0, 1]))
            self.weight.grad_sample = None
            self.weight.grad = gw.reshape(self.weight.data.shape)
        if self.bias is not None:
            self.bias.grad_sample = dyr.sum(axis=2)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        dcols = np.ascontiguousarray(np.matmul(dyr.transpose(0, 2, 1), wmat))
        self._cols = None
        return kernels.col2im(dcols, tuple(self._x_shape), self.k, self.k, self.stride, self.padding)


class Linear(Module):
    def __init__(
        self, in_features: int, out_features: int, rng: np.random.Generator | None = None
    ) -> None:
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / np.sqrt(in_features)
        w = rng.uniform(-bound, bound, size=(out_features, in_features)) if rng is not None else np.zeros((out_features, in_features))
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(out_features))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"Linear expects (B, {self.in_features}) input, got {x.shape}")
        self._x = x
        return np.matmul(x[:, None, :], self.weight.data.T)[:, 0, :] + self.bias.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.weight.grad_sample = dy[:, :, None] * self._x[:, None, :]
        self.bias.grad_sample = dy.copy()
        return np.matmul(dy[:, None, :], self.weight.data)[:, 0, :]


class GroupNorm(Module):
    """Normalises each sample over channel groups, then applies a per-channel affine map."""

    def __init__(self, num_groups: int, num_channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        if num_channels % num_groups:
            raise ValueError(
                f"GroupNorm: {num_channels} channels not divisible into {num_groups} groups"
            )
        self.groups, self.channels, self.eps = num_groups, num_channels, eps
        self.gamma = self.add_param("weight", np.ones(num_channels))
        self.beta = self.add_param("bias", np.zeros(num_channels))

    def forward(self, x: np.ndarray) -> np.ndarray:
        B, C, H, W = x.shape
        if C != self.channels:
            raise ValueError(f"GroupNorm expects {self.channels} channels, got {C}")
        xg = x.reshape(B, self.groups, -1)
        mean = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mean) * inv_std).reshape(B, C, H, W)
        self._xhat, self._inv_std = xhat, inv_std
        return xhat * self.gamma.data[None, :, None, None] + self.beta.data[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, C, H, W = dy.shape
        xhat = self._xhat
        self.gamma.grad_sample = (dy * xhat).sum(axis=(2, 3))
        self.beta.grad_sample = dy.sum(axis=(2, 3))
        dxhat = (dy * self.gamma.data[None, :, None, None]).reshape(B, self.groups, -1)
        xh = xhat.reshape(B, self.groups, -1)
        dx = self._inv_std * (
            dxhat
            - dxhat.mean(axis=2, keepdims=True)
            - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        return dx.reshape(B, C, H, W)


class ReLU(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


def mish(x: np.ndarray) -> np.ndarray:
    """x * tanh(softplus(x)), overflow-safe for any finite x."""
    x = np.asarray(x, dtype=np.float64)
    y, _ = kernels.mish_forward(np.ascontiguousarray(x).ravel())
    return y.reshape(x.shape)


def mish_grad(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    flat = x.ravel()
    _, aux = kernels.mish_forward(flat)
    return kernels.mish_backward(flat, aux, np.ones_like(flat)).reshape(x.shape)


class Mish(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = np.ascontiguousarray(x).ravel()
        y, self._aux = kernels.mish_forward(self._x)
        return y.reshape(x.shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        g = kernels.mish_backward(self._x, self._aux, np.ascontiguousarray(dy).ravel())
        return g.reshape(dy.shape)


class MaxPool2d(Module):
    def __init__(self, kernel_size: int, stride: int, padding: int = 0) -> None:
        super().__init__()
        self.k, self.stride, self.padding = kernel_size, stride, padding

    def forward(self, x: np.ndarray) -> np.ndarray:
        B, C, H, W = x.shape
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
        self._padded_shape = (B * C, 1) + xp.shape[2:]
        cols = kernels.im2col(np.ascontiguousarray(xp.reshape(self._padded_shape)), self.k, self.k, self.stride, 0)
        self._arg = cols.argmax(axis=2)
        self._L = cols.shape[1]
        Ho = (xp.shape[2] - self.k) // self.stride + 1
        Wo = (xp.shape[3] - self.k) // self.stride + 1
        self._shape = (B, C, H, W)
        out = np.take_along_axis(cols, self._arg[:, :, None], axis=2)[:, :, 0]
        return out.reshape(B, C, Ho, Wo)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, C, H, W = self._shape
        cols = np.zeros((B * C, self._L, self.k * self.k))
        np.put_along_axis(cols, self._arg[:, :, None], dy.reshape(B * C, self._L, 1), axis=2)
        dxp = kernels.col2im(cols, self._padded_shape, self.k, self.k, self.stride, 0)
        dxp = dxp.reshape(B, C, *self._padded_shape[2:])
        p = self.padding
        return dxp[:, :, p : p + H, p : p + W] if p else dxp


class GlobalAvgPool(Module):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        B, C, H, W = self._shape
        return np.broadcast_to(dy[:, :, None, None] / (H * W), self._shape).copy()


class Sequential(Module):
    def __init__(self, *layers: Module) -> None:
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


def make_activation(name: str) -> Module:
    if name == "relu":
        return ReLU()
    if name == "mish":
        return Mish()
    raise ValueError(f"unknown activation {name!r}; expected 'relu' or 'mish'")


class BasicBlock(Module):
    """conv3x3-GN-act-conv3x3-GN plus (projected) shortcut, then act."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        stride: int,
        groups: int,
        activation: str,
        rng: np.random.Generator | None,
    ) -> None:
        super().__init__()
        self.main = self.add_child(
            "main",
            Sequential(
                Conv2d(in_channels, out_channels, 3, stride, 1, rng=rng),
                GroupNorm(groups, out_channels),
                make_activation(activation),
                Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng),
                GroupNorm(groups, out_channels),
            ),
        )
        if stride != 1 or in_channels != out_channels:
            self.shortcut: Module | None = self.add_child(
                "shortcut",
                Sequential(
                    Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng),
                    GroupNorm(groups, out_channels),
                ),
            )
        else:
            self.shortcut = None
        self.act = self.add_child("act", make_activation(activation))

    def forward(self, x: np.ndarray) -> np.ndarray:
        skip = x if self.shortcut is None else self.shortcut.forward(x)
        return self.act.forward(self.main.forward(x) + skip)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.act.backward(dy)
        dx = self.main.backward(d)
        if self.shortcut is None:
            return dx + d
        return dx + self.shortcut.backward(d)
