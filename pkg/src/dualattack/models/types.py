from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, PolicyError


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 32
    head_dim: int = 16
    num_heads: int = 2
    depth: int = 3
    mlp_hidden: int = 64
    num_classes: int = 10
    use_class_token: bool = True

    def __post_init__(self):
        for name in ("image_h", "image_w", "channels", "patch_size", "embed_dim",
                     "head_dim", "num_heads", "depth", "mlp_hidden", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image {self.image_h}x{self.image_w}"
            )
        if self.num_heads * self.head_dim != self.embed_dim:
            raise ConfigError("num_heads * head_dim must equal embed_dim")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.use_class_token)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_h, self.image_w, self.channels)


@dataclass(frozen=True)
class CNNConfig:
    image_h: int = 32
    image_w: int = 32
    channels: int = 3
    conv_channels: tuple = (16, 32)
    kernel_size: int = 3
    pools: tuple = (2, 2)
    num_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        object.__setattr__(self, "pools", tuple(int(p) for p in self.pools))
        if len(self.conv_channels) != len(self.pools) or not self.conv_channels:
            raise ConfigError("conv_channels and pools must be non-empty and equally long")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        h, w = self.image_h, self.image_w
        for p in self.pools:
            if p < 1 or h % p or w % p:
                raise ConfigError(f"pool {p} does not divide feature map {h}x{w}")
            h, w = h // p, w // p

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_h, self.image_w, self.channels)


@dataclass(frozen=True)
class GradRoutingPolicy:
    """Per-block backward switches for the ViT.

    ``attention_grad_enabled[l] = False`` treats block l's attention weights
    as constants (stop-gradient through softmax, Q and K). ``mlp_grad_decay[l]``
    scales the gradient entering block l's MLP residual branch.
    """

    attention_grad_enabled: tuple
    mlp_grad_decay: tuple

    def __post_init__(self):
        object.__setattr__(self, "attention_grad_enabled",
                           tuple(bool(v) for v in self.attention_grad_enabled))
        object.__setattr__(self, "mlp_grad_decay", tuple(float(v) for v in self.mlp_grad_decay))
        if len(self.attention_grad_enabled) != len(self.mlp_grad_decay):
            raise PolicyError("attention and MLP policy lists differ in length")
        if any(not (0.0 < g <= 1.0) for g in self.mlp_grad_decay):
            raise PolicyError("mlp_grad_decay factors must lie in (0, 1]")

    @property
    def depth(self) -> int:
        return len(self.attention_grad_enabled)

    @classmethod
    def full(cls, depth: int) -> "GradRoutingPolicy":
        return cls((True,) * depth, (1.0,) * depth)

    @classmethod
    def pna(cls, depth: int, mlp_decay: float = 1.0) -> "GradRoutingPolicy":
        return cls((False,) * depth, (mlp_decay,) * depth)

    @classmethod
    def chunked(cls, depth: int, chunk_enabled: Sequence[bool], mlp_decay: float = 1.0):
        """Gate attention gradients over equal contiguous chunks of blocks."""
        n = len(chunk_enabled)
        if n == 0 or depth % n:
            raise PolicyError(f"depth {depth} is not divisible into {n} chunks")
        size = depth // n
        enabled = tuple(bool(chunk_enabled[l // size]) for l in range(depth))
        return cls(enabled, (mlp_decay,) * depth)

    @property
    def frozen_blocks(self) -> frozenset:
        return frozenset(l for l, on in enumerate(self.attention_grad_enabled) if not on)


@dataclass
class ModelHandle:
    kind: str
    config: object
    params: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("vit", "cnn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for arr in self.params.values():
            arr.flags.writeable = False

    @property
    def image_shape(self):
        return self.config.image_shape

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.kind.encode())
        h.update(repr(self.config).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]
