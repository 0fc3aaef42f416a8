"""ViT building blocks on the autodiff engine.

Backbone pieces are created frozen; only modules built with
``frozen=False`` (heads, norms added on top of the backbone) train.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Parameter, Tensor

ATTACH_POINTS = ("qkv", "attn_proj", "mlp_fc1", "mlp_fc2", "embed", "head", "other")

_ADAPTERS = {"enabled": True}


@contextlib.contextmanager
def adapters_disabled() -> Iterator[None]:
    """Run forwards with every LoRA path skipped (the pure frozen network)."""
    prev = _ADAPTERS["enabled"]
    _ADAPTERS["enabled"] = False
    try:
        yield
    finally:
        _ADAPTERS["enabled"] = prev


def adapters_enabled() -> bool:
    return _ADAPTERS["enabled"]


class Init:
    """Parameter factory. ``meta=True`` builds zero-stride placeholders so
    full-size geometries can be censused without allocating memory."""

    def __init__(self, rng: np.random.Generator | None = None, std: float = 0.02, meta: bool = False, dtype=None):
        self.rng = rng
        self.std = std
        self.meta = meta
        self.dtype = np.dtype(dtype or T.get_default_dtype())

    def _placeholder(self, shape):
        return np.broadcast_to(np.zeros((), dtype=self.dtype), shape)

    def normal(self, shape, std: float | None = None) -> np.ndarray:
        if self.meta:
            return self._placeholder(shape)
        return self.rng.normal(0.0, self.std if std is None else std, size=shape).astype(self.dtype)

    def zeros(self, shape) -> np.ndarray:
        return self._placeholder(shape) if self.meta else np.zeros(shape, dtype=self.dtype)

    def ones(self, shape) -> np.ndarray:
        if self.meta:
            return np.broadcast_to(np.ones((), dtype=self.dtype), shape)
        return np.ones(shape, dtype=self.dtype)

    def eye(self, n: int) -> np.ndarray:
        return self._placeholder((n, n)) if self.meta else np.eye(n, dtype=self.dtype)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            yield from _walk_value(name, value, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_frozen(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = not frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)


def _walk_value(name, value, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        if id(value) not in seen:
            seen.add(id(value))
            yield from value._walk(name + ".", seen)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk_value(f"{name}.{i}", v, seen)
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk_value(f"{name}.{k}", v, seen)


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4
    channels: int = 3

    def __post_init__(self):
        for key in ("image_size", "patch_size", "dim", "depth", "heads", "mlp_ratio", "num_classes", "channels"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.dim * self.mlp_ratio

    @classmethod
    def vit_base(cls, num_classes: int = 1000) -> "ViTConfig":
        return cls(image_size=224, patch_size=16, dim=768, depth=12, heads=12, mlp_ratio=4, num_classes=num_classes)


class LinearLayer(Module):
    def __init__(self, in_features: int, out_features: int, attach_point: str, init: Init, frozen: bool = True):
        if attach_point not in ATTACH_POINTS:
            raise ConfigError(f"unknown attach point {attach_point!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.attach_point = attach_point
        self.weight = Parameter(init.normal((out_features, in_features)), requires_grad=not frozen)
        self.bias = Parameter(init.zeros((out_features,)), requires_grad=not frozen)
        self.adapter = None

    @property
    def frozen(self) -> bool:
        return self.weight.frozen and self.bias.frozen

    def base(self, x) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def forward(self, x) -> Tensor:
        h = self.base(x)
        if self.adapter is not None and adapters_enabled():
            h = h + self.adapter.delta(x)
        return h


class LayerNorm(Module):
    def __init__(self, dim: int, init: Init, frozen: bool = True, eps: float = 1e-5):
        self.gamma = Parameter(init.ones((dim,)), requires_grad=not frozen)
        self.beta = Parameter(init.zeros((dim,)), requires_grad=not frozen)
        self.eps = eps

    def forward(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class PatchEmbed(Module):
    def __init__(self, cfg: ViTConfig, init: Init, frozen: bool = True):
        self.cfg = cfg
        self.proj = LinearLayer(cfg.patch_dim, cfg.dim, "embed", init, frozen)
        self.cls_token = Parameter(init.normal((cfg.dim,)), requires_grad=not frozen)
        self.pos_embed = Parameter(init.normal((cfg.token_count, cfg.dim)), requires_grad=not frozen)

    def forward(self, images) -> Tensor:
        cfg = self.cfg
        images = images if isinstance(images, Tensor) else Tensor(images)
        *lead, h, w, ch = images.shape
        if h != cfg.image_size or w != cfg.image_size or ch != cfg.channels:
            raise ShapeError(
                f"patch_embed: image {(h, w, ch)} does not match config "
                f"{(cfg.image_size, cfg.image_size, cfg.channels)}"
            )
        g, p, nl = cfg.grid, cfg.patch_size, len(lead)
        x = T.reshape(images, (*lead, g, p, g, p, ch))
        axes = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 1, 3, 4))
        x = T.reshape(T.transpose(x, axes), (*lead, g * g, cfg.patch_dim))
        tokens = self.proj(x)
        cls = T.broadcast_to(self.cls_token, (*lead, 1, cfg.dim))
        return T.concat([cls, tokens], axis=-2) + self.pos_embed


class Attention(Module):
    def __init__(self, cfg: ViTConfig, init: Init, frozen: bool = True):
        self.heads = cfg.heads
        self.qkv = LinearLayer(cfg.dim, 3 * cfg.dim, "qkv", init, frozen)
        self.proj = LinearLayer(cfg.dim, cfg.dim, "attn_proj", init, frozen)
        self.last_weights: np.ndarray | None = None

    def forward(self, x) -> Tensor:
        *lead, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.reshape(self.qkv(x), (*lead, n, 3, h, dh))
        q, k, v = (T.swapaxes(qkv[..., i, :, :], -2, -3) for i in range(3))
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = T.swapaxes(T.matmul(weights, v), -2, -3)
        return self.proj(T.reshape(out, (*lead, n, d)))


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, cfg: ViTConfig, init: Init, frozen: bool = True):
        self.norm1 = LayerNorm(cfg.dim, init, frozen)
        self.attn = Attention(cfg, init, frozen)
        self.norm2 = LayerNorm(cfg.dim, init, frozen)
        self.mlp_fc1 = LinearLayer(cfg.dim, cfg.mlp_hidden, "mlp_fc1", init, frozen)
        self.mlp_fc2 = LinearLayer(cfg.mlp_hidden, cfg.dim, "mlp_fc2", init, frozen)

    def linears(self) -> dict[str, LinearLayer]:
        return {
            "qkv": self.attn.qkv,
            "attn_proj": self.attn.proj,
            "mlp_fc1": self.mlp_fc1,
            "mlp_fc2": self.mlp_fc2,
        }

    @property
    def adapters(self) -> dict:
        return {k: lin.adapter for k, lin in self.linears().items() if lin.adapter is not None}

    def forward(self, x) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp_fc2(T.gelu(self.mlp_fc1(self.norm2(x))))


class ViTBackbone(Module):
    def __init__(self, cfg: ViTConfig, init: Init, frozen: bool = True):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, init, frozen)
        self.blocks = [TransformerBlock(cfg, init, frozen) for _ in range(cfg.depth)]

    def forward(self, images, upto: int | None = None) -> Tensor:
        x = self.embed(images)
        for block in self.blocks[:upto]:
            x = block(x)
        return x


# functional surface -------------------------------------------------------


def patch_embed(image, cfg: ViTConfig, params: PatchEmbed) -> Tensor:
    if params.cfg != cfg:
        raise ConfigError("patch_embed: params built for a different config")
    return params(image)


def mhsa(tokens, block: TransformerBlock) -> Tensor:
    return block.attn(tokens)


def transformer_block(tokens, block: TransformerBlock) -> Tensor:
    return block(tokens)


def classification_head(features, head: LinearLayer) -> Tensor:
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.shape[-1] != head.in_features:
        raise ShapeError(f"classification_head: features width {features.shape[-1]} != {head.in_features}")
    return head(features)


def backbone_param_count(cfg: ViTConfig) -> int:
    """Closed-form parameter count of one backbone (no final norm, no head)."""
    d, hid = cfg.dim, cfg.mlp_hidden
    embed = cfg.patch_dim * d + d + d + cfg.token_count * d
    block = (d * 3 * d + 3 * d) + (d * d + d) + (d * hid + hid) + (hid * d + d) + 4 * d
    return embed + cfg.depth * block
