"""Configurable ResNet9 family with a sigmoid multi-label head.

Layout: stem conv (+ optional max-pool), four single-block residual stages,
global average pooling, linear classifier. Nine weight layers sit on the
main path (stem + 2 per stage) before the classifier.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from privcxr.nn.layers import (
    BasicBlock,
    Conv2d,
    GlobalAvgPool,
    GroupNorm,
    Linear,
    MaxPool2d,
    Module,
    NumericalError,
    Sequential,
    make_activation,
)


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    groups_per_norm: int = 4
    activation: str = "mish"
    num_labels: int = 8
    in_channels: int = 1
    image_size: int = 32
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    stage_strides: tuple[int, int, int, int] = (1, 2, 2, 2)

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if len(self.widths) != 4 or len(self.stage_strides) != 4:
            raise ValueError("ResNet9 needs exactly four stage widths and strides")
        if self.num_labels < 1:
            raise ValueError(f"num_labels must be >= 1, got {self.num_labels}")
        if self.activation not in ("relu", "mish"):
            raise ValueError(f"activation must be 'relu' or 'mish', got {self.activation!r}")
        for w in self.widths:
            if w % self.groups_per_norm:
                raise ValueError(
                    f"channel width {w} is not divisible by groups_per_norm={self.groups_per_norm}"
                )

    @classmethod
    def full_scale(cls, activation: str = "mish") -> ModelConfig:
        """512x512 RGB input, 32-group norms, 64..512 channels."""
        return cls(
            widths=(64, 128, 256, 512),
            groups_per_norm=32,
            activation=activation,
            num_labels=8,
            in_channels=3,
            image_size=512,
            stem_kernel=7,
            stem_stride=2,
            stem_pool=True,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["stage_strides"] = list(self.stage_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(eq=False)
class ResNet9(Module):
    config: ModelConfig = field(default_factory=ModelConfig)
    rng: np.random.Generator | None = None

    def __post_init__(self) -> None:
        Module.__init__(self)
        c, rng = self.config, self.rng
        w0 = c.widths[0]
        stem: list[Module] = [
            Conv2d(c.in_channels, w0, c.stem_kernel, c.stem_stride, c.stem_kernel // 2, rng=rng),
            GroupNorm(c.groups_per_norm, w0),
            make_activation(c.activation),
        ]
        if c.stem_pool:
            stem.append(MaxPool2d(3, 2, 1))
        self.stem = self.add_child("stem", Sequential(*stem))
        blocks = []
        prev = w0
        for i, (w, s) in enumerate(zip(c.widths, c.stage_strides)):
            blocks.append(self.add_child(f"stage{i + 1}", BasicBlock(prev, w, s, c.groups_per_norm, c.activation, rng)))
            prev = w
        self.stages = blocks
        self.pool = self.add_child("pool", GlobalAvgPool())
        self.head = self.add_child("head", Linear(prev, c.num_labels, rng=rng))
        self._shapes = [p.data.shape for p in self.parameters()]

    # -- forward / backward -------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        c = self.config
        expected = (c.in_channels, c.image_size, c.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"input must have shape (B, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits of shape (B, num_labels)."""
        self._check_input(x)
        h = np.asarray(x, dtype=np.float64)
        for name, block in [("stem", self.stem), *((f"stage{i + 1}", b) for i, b in enumerate(self.stages)), ("pool", self.pool), ("head", self.head)]:
            h = block.forward(h)
            if not np.isfinite(h).all():
                raise NumericalError(f"non-finite activation after layer {name!r}")
        return h

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return sigmoid(self.forward(x))

    def backward(self, dlogits: np.ndarray, sample_matrix: np.ndarray | None = None) -> None:
        """Backpropagate per-sample logit gradients; fills every ``grad_sample``.

        If ``sample_matrix`` (B, P) is given, conv weight gradients are written
        straight into their column blocks of it, saving a copy.
        """
        if sample_matrix is not None:
            for (_, sl), p in zip(self.param_slices(), self.parameters()):
                p.sample_out = sample_matrix[:, sl]
        try:
            self._backward(dlogits)
        finally:
            if sample_matrix is not None:
                for p in self.parameters():
                    p.sample_out = None

    def _backward(self, dlogits: np.ndarray) -> None:
        d = self.head.backward(dlogits)
        d = self.pool.backward(d)
        for block in reversed(self.stages):
            d = block.backward(d)
        self.stem.backward(d)

    # -- flat parameter views -----------------------------------------------

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.num_parameters,):
            raise ValueError(f"expected {self.num_parameters} parameters, got {flat.shape}")
        offset = 0
        for p in self.parameters():
            n = p.size
            p.data = flat[offset : offset + n].reshape(p.data.shape).copy()
            offset += n

    def set_per_sample(self, enabled: bool) -> None:
        """Toggle per-sample weight gradients in the conv layers (off = batch-summed, faster)."""
        for _, m in self.named_modules():
            if isinstance(m, Conv2d):
                m.per_sample = enabled

    def param_slices(self) -> list[tuple[str, slice]]:
        out, offset = [], 0
        for name, p in self.named_parameters():
            out.append((name, slice(offset, offset + p.size)))
            offset += p.size
        return out

    def per_sample_grad_matrix(self, out: np.ndarray | None = None) -> np.ndarray:
        """Collect ``grad_sample`` of all parameters into a (B, P) matrix.

        Pass the matrix given to ``backward`` as ``out``; blocks already
        written there are not copied. Finiteness is checked later, on the
        row norms during clipping.
        """
        named = list(self.named_parameters())
        first = named[0][1].grad_sample
        if first is None:
            raise RuntimeError(f"no per-sample gradient for {named[0][0]}; run backward first")
        if out is None:
            out = np.empty((first.shape[0], self.num_parameters))
        offset = 0
        for name, p in named:
            g = p.grad_sample
            if g is None:
                raise RuntimeError(f"no per-sample gradient for {name}; run backward first")
            block = out[:, offset : offset + p.size]
            if not np.shares_memory(g, block):
                block[...] = g.reshape(g.shape[0], -1)
            offset += p.size
            p.grad_sample = None
        return out

    def summed_grad(self) -> np.ndarray:
        """Batch-summed flat gradient after a backward pass in either mode."""
        parts = []
        for name, p in self.named_parameters():
            if p.grad is not None:
                parts.append(p.grad.ravel())
            elif p.grad_sample is not None:
                parts.append(p.grad_sample.sum(axis=0).ravel())
            else:
                raise RuntimeError(f"no gradient for {name}; run backward first")
            p.grad, p.grad_sample = None, None
        flat = np.concatenate(parts)
        if not np.isfinite(flat).all():
            raise NumericalError("non-finite gradient")
        return flat

    def locate(self, column: int) -> str:
        for name, sl in self.param_slices():
            if sl.start <= column < sl.stop:
                return name
        raise IndexError(column)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def build_model(config: ModelConfig, seed: int | None = 0) -> ResNet9:
    """Instantiate with Kaiming-normal convs; ``seed=None`` gives all-zero weights."""
    rng = None if seed is None else np.random.default_rng(seed)
    return ResNet9(config, rng)


def count_parameters(config: ModelConfig) -> int:
    return ResNet9(config, None).num_parameters
