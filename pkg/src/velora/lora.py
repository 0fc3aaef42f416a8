"""Low-rank adapters for frozen linear layers.

An adapter contributes ``scale * B @ A @ x`` on top of the wrapped layer's
frozen output. ``B`` starts at zero, so a freshly attached adapter never
changes the network. Variants:

* ``lora``          A and B trainable.
* ``lora_fa``       A frozen, only B trains.
* ``lora_fa_plus``  A frozen, a trainable r x r matrix (identity init) between A and B.
* ``dylora``        forward uses only the leading ``current_rank`` rows/columns.
* ``moe_lora``      several (A, B) experts mixed by a softmax router.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .nn import Init, LinearLayer, Module, TransformerBlock
from .tensor import Parameter, Tensor

VARIANTS = ("lora", "lora_fa", "lora_fa_plus", "dylora", "moe_lora")
LOCATIONS = {"qkv": ("qkv",), "mlp": ("mlp_fc1", "mlp_fc2"), "qkv_mlp": ("qkv", "mlp_fc1", "mlp_fc2")}


class LoRAAdapter(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rank: int = 4,
        variant: str = "lora",
        init: Init | None = None,
        scale: float = 1.0,
        num_experts: int = 4,
    ):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown LoRA variant {variant!r}; expected one of {VARIANTS}")
        if not 0 < rank < min(in_features, out_features):
            raise ConfigError(f"rank {rank} must satisfy 0 < r < min({in_features}, {out_features})")
        if variant == "moe_lora" and num_experts < 1:
            raise ConfigError("moe_lora needs at least one expert")
        init = init or Init(np.random.default_rng(0))
        self.in_features = in_features
        self.out_features = out_features
        self.rank = rank
        self.variant = variant
        self.scale = float(scale)
        freeze_a = variant in ("lora_fa", "lora_fa_plus")
        if variant == "moe_lora":
            self.experts = [
                (
                    Parameter(init.normal((rank, in_features))),
                    Parameter(init.zeros((out_features, rank))),
                )
                for _ in range(num_experts)
            ]
            self.router = Parameter(init.zeros((num_experts, in_features)))
        else:
            self.A = Parameter(init.normal((rank, in_features)), requires_grad=not freeze_a)
            self.B = Parameter(init.zeros((out_features, rank)))
        if variant == "lora_fa_plus":
            self.mid = Parameter(init.eye(rank))
        self.max_rank = rank
        self.current_rank = rank

    def delta(self, x) -> Tensor:
        """The adapter's additive update ``scale * dW x`` for x of shape [..., in]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"adapter expects width {self.in_features}, got {x.shape[-1]}")
        v = self.variant
        if v == "moe_lora":
            gates = moe_gate(x, self.router)
            out = None
            for e, (a, b) in enumerate(self.experts):
                term = T.linear(T.linear(x, a), b) * gates[..., e : e + 1]
                out = term if out is None else out + term
        elif v == "dylora":
            r = self.current_rank
            if not 1 <= r <= self.max_rank:
                raise ContractError(f"dylora current_rank {r} outside [1, {self.max_rank}]")
            a = self.A if r == self.max_rank else self.A[:r]
            b = self.B if r == self.max_rank else self.B[:, :r]
            out = T.linear(T.linear(x, a), b)
        elif v == "lora_fa_plus":
            out = T.linear(T.linear(T.linear(x, self.A), self.mid), self.B)
        else:
            out = T.linear(T.linear(x, self.A), self.B)
        return out if self.scale == 1.0 else T.scale(out, self.scale)

    def forward(self, x) -> Tensor:
        return self.delta(x)

    def dense_delta(self) -> np.ndarray:
        """Assembled ``scale * B @ A`` for non-routed variants."""
        if self.variant == "moe_lora":
            raise ContractError("moe_lora has an input-dependent update")
        r = self.current_rank if self.variant == "dylora" else self.rank
        a, b = self.A.data[:r], self.B.data[:, :r]
        if self.variant == "lora_fa_plus":
            return self.scale * b @ self.mid.data @ a
        return self.scale * b @ a


def adapter_forward(x, layer: LinearLayer, adapter: LoRAAdapter) -> Tensor:
    """``h = W0 x + b + scale * dW x`` without attaching the adapter."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"input width {x.shape[-1]} != layer in_features {layer.in_features}")
    if (adapter.in_features, adapter.out_features) != (layer.in_features, layer.out_features):
        raise ShapeError("adapter geometry does not match the wrapped layer")
    return layer.base(x) + adapter.delta(x)


def moe_gate(x, router) -> Tensor:
    """Softmax routing weights over experts, shape [..., E]."""
    return T.softmax(T.linear(x, router), axis=-1)


@dataclass
class InjectionPolicy:
    locations: frozenset = field(default_factory=lambda: frozenset({"mlp"}))
    block_range: tuple | None = None
    rank: int = 4
    variant: str = "lora"
    scale: float = 1.0
    num_experts: int = 4

    def __post_init__(self):
        if isinstance(self.locations, str):
            if self.locations not in LOCATIONS:
                raise ConfigError(f"unknown location {self.locations!r}; expected one of {tuple(LOCATIONS)}")
            self.locations = frozenset({"qkv", "mlp"} if self.locations == "qkv_mlp" else {self.locations})
        self.locations = frozenset(self.locations)
        unknown = self.locations - {"qkv", "mlp"}
        if unknown:
            raise ConfigError(f"unknown location(s) {sorted(unknown)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown LoRA variant {self.variant!r}")

    @property
    def attach_points(self) -> tuple:
        points = []
        if "qkv" in self.locations:
            points.append("qkv")
        if "mlp" in self.locations:
            points += ["mlp_fc1", "mlp_fc2"]
        return tuple(points)

    def make_adapter(self, layer: LinearLayer, init: Init) -> LoRAAdapter:
        return LoRAAdapter(
            layer.in_features,
            layer.out_features,
            rank=self.rank,
            variant=self.variant,
            init=init,
            scale=self.scale,
            num_experts=self.num_experts,
        )


def inject(blocks: list[TransformerBlock], policy: InjectionPolicy, init: Init) -> int:
    """Attach adapters per ``policy``; returns how many were attached."""
    indices = range(len(blocks)) if policy.block_range is None else policy.block_range
    count = 0
    for i in indices:
        linears = blocks[i].linears()
        for point in policy.attach_points:
            layer = linears[point]
            if layer.adapter is not None:
                raise ContractError(f"block {i} already has an adapter at {point}")
            layer.adapter = policy.make_adapter(layer, init)
            count += 1
    return count


def iter_adapters(module: Module):
    seen = set()
    stack = [module]
    while stack:
        m = stack.pop()
        if id(m) in seen:
            continue
        seen.add(id(m))
        if isinstance(m, LoRAAdapter):
            yield m
            continue
        for v in vars(m).values():
            for item in v if isinstance(v, (list, tuple)) else (v.values() if isinstance(v, dict) else (v,)):
                if isinstance(item, Module):
                    stack.append(item)


def trainable_param_count(model: Module) -> tuple[int, int]:
    """Exact ``(trainable, frozen)`` element counts by ``requires_grad``."""
    trainable = frozen = 0
    for p in model.parameters():
        n = int(np.prod(p.shape, dtype=np.int64))
        if p.requires_grad:
            trainable += n
        else:
            frozen += n
    return trainable, frozen


def lora_param_count(in_features: int, out_features: int, rank: int) -> int:
    """Trainable elements of one vanilla adapter: r*in + out*r."""
    return rank * in_features + out_features * rank


def dylora_sample_rank(adapter: LoRAAdapter, rng: np.random.Generator) -> int:
    if adapter.variant != "dylora":
        raise ContractError(f"dylora_sample_rank on a {adapter.variant} adapter")
    adapter.current_rank = int(rng.integers(1, adapter.max_rank + 1))
    return adapter.current_rank


def sample_dylora_ranks(model: Module, rng: np.random.Generator) -> int | None:
    """Draw one rank and apply it to every dylora adapter in ``model``."""
    adapters = [a for a in iter_adapters(model) if a.variant == "dylora"]
    if not adapters:
        return None
    rank = dylora_sample_rank(adapters[0], rng)
    for a in adapters[1:]:
        a.current_rank = min(rank, a.max_rank)
    return rank


def reset_dylora_ranks(model: Module) -> None:
    for a in iter_adapters(model):
        a.current_rank = a.max_rank
