"""The three-branch RGB / event / frame-difference model.

Each branch is a frozen ViT. Blocks ``0..L-2`` carry modality-specific
adapters; the last block's attention is reused as the shared fusion stage
over the token-concatenated features, whose LoRA-refined output re-enters
the RGB and event streams before the classification head. Two adapted
transformer layers predict each modality's features from the other and
feed the reconstruction losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .events import Clip, diff_image, event_images
from .lora import InjectionPolicy, LoRAAdapter, inject
from .nn import Init, LayerNorm, LinearLayer, Module, TransformerBlock, ViTBackbone, ViTConfig, adapters_enabled
from .rng import make_rng
from .tensor import Tensor

MODES = ("velora", "full_finetune")
DIFF_SOURCES = ("both", "rgb")

# Component-analysis rows: (frame_diff, reconstruction, lora_specific, lora_shared)
COMPONENT_ROWS = {
    1: (True, False, False, False),
    2: (False, True, False, False),
    3: (True, True, False, False),
    4: (True, True, True, False),
    5: (True, True, False, True),
    6: (True, True, True, True),
}


@dataclass
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    frames: int = 8
    rank: int = 4
    variant: str = "lora"
    locations: str = "mlp"
    scale: float = 1.0
    num_experts: int = 4
    frame_diff: bool = True
    reconstruction: bool = True
    lora_specific: bool = True
    lora_shared: bool = True
    mode: str = "velora"
    diff_source: str = "both"
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.vit.depth < 2:
            raise ConfigError("depth must be >= 2 (low-level blocks plus one high-level block)")
        if self.frames < 2:
            raise ConfigError("frames must be >= 2 for the frame difference")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.diff_source not in DIFF_SOURCES:
            raise ConfigError(f"unknown diff_source {self.diff_source!r}")
        self.policy()

    def policy(self, block_range=None) -> InjectionPolicy:
        return InjectionPolicy(
            locations=self.locations,
            block_range=block_range,
            rank=self.rank,
            variant=self.variant,
            scale=self.scale,
            num_experts=self.num_experts,
        )


def component_toggles(config: ModelConfig, row: int) -> ModelConfig:
    """Config for one component-analysis row (1..6)."""
    try:
        fd, rec, spe, share = COMPONENT_ROWS[row]
    except KeyError:
        raise ConfigError(f"component row must be 1..6, got {row}") from None
    return replace(config, frame_diff=fd, reconstruction=rec, lora_specific=spe, lora_shared=share)


@dataclass
class Batch:
    rgb: np.ndarray  # [B, C, H, W, 3]
    event: np.ndarray  # [B, C, H, W, 3]
    diff: np.ndarray  # [B, H, W, 3]
    labels: np.ndarray | None  # [B]

    def __len__(self) -> int:
        return len(self.rgb)

    def take(self, idx) -> "Batch":
        return Batch(self.rgb[idx], self.event[idx], self.diff[idx], None if self.labels is None else self.labels[idx])


def prepare(clips: list[Clip], diff_source: str = "both") -> Batch:
    """Rasterize events and compute difference images for a list of clips."""
    rgb, ev, diff = [], [], []
    for clip in clips:
        r = np.asarray(clip.rgb_frames, dtype=np.float32)
        e = event_images(clip)
        rgb.append(r)
        ev.append(e)
        diff.append(diff_image(r, e, diff_source))
    labels = np.array([c.label for c in clips], dtype=np.int64)
    return Batch(np.stack(rgb), np.stack(ev), np.stack(diff), labels)


@dataclass
class VeloraOutput:
    logits: Tensor
    F_v: Tensor
    F_e: Tensor
    F_d: Tensor
    recon_rgb: Tensor | None
    recon_event: Tensor | None
    losses: dict = field(default_factory=dict)


def encode_modality(frames, branch: ViTBackbone, upto: int | None = None) -> Tensor:
    """Per-frame low-level encoding, mean-pooled over the frame axis.

    ``frames`` is [..., C, H, W, ch]; the result is [..., tokens, dim].
    """
    if upto is None:
        upto = branch.cfg.depth - 1
    tokens = branch(frames, upto=upto)
    return T.mean(tokens, axis=-3)


def reconstruction_losses(F_v: Tensor, F_e: Tensor, pred_event: Tensor, pred_rgb: Tensor) -> tuple[Tensor, Tensor]:
    """(RGB->event, event->RGB) mean squared errors over patch tokens only."""
    rte = T.mse(pred_event[..., 1:, :], F_e[..., 1:, :])
    etr = T.mse(pred_rgb[..., 1:, :], F_v[..., 1:, :])
    return rte, etr


class VeloraModel(Module):
    def __init__(self, config: ModelConfig, meta: bool = False):
        self.config = config
        cfg, vit = config, config.vit
        seed = cfg.seed

        def init(*names):
            return Init(None if meta else make_rng(seed, *names), std=cfg.init_std, meta=meta)

        low = tuple(range(vit.depth - 1))
        self.branch_rgb = ViTBackbone(vit, init("backbone", "rgb"))
        self.branch_event = ViTBackbone(vit, init("backbone", "event"))
        self.branch_diff = ViTBackbone(vit, init("backbone", "diff"))
        if cfg.lora_specific:
            for name in ("rgb", "event", "diff"):
                inject(self.branch(name).blocks, cfg.policy(low), init("adapter", name))

        self.recon_r2e = self.recon_e2r = None
        if cfg.reconstruction:
            self.recon_r2e = TransformerBlock(vit, init("recon", "r2e"))
            self.recon_e2r = TransformerBlock(vit, init("recon", "e2r"))
            inject([self.recon_r2e], cfg.policy(), init("adapter", "r2e"))
            inject([self.recon_e2r], cfg.policy(), init("adapter", "e2r"))

        high = self.branch_rgb.blocks[-1]
        self.fuse_norm = high.norm1
        self.fuse_attn = high.attn
        self.fuse_adapter = self.refine_rgb = self.refine_event = None
        if cfg.lora_shared:
            d = vit.dim
            self.fuse_adapter = self._shared_adapter(d, init("fusion", "fuse"))
            self.refine_rgb = self._shared_adapter(d, init("fusion", "rgb"))
            self.refine_event = self._shared_adapter(d, init("fusion", "event"))
        self.refine_norm_rgb = LayerNorm(vit.dim, init("norm"), frozen=False)
        self.refine_norm_event = LayerNorm(vit.dim, init("norm"), frozen=False)
        self.head = LinearLayer(2 * vit.dim, vit.num_classes, "head", init("head"), frozen=False)
        if cfg.mode == "full_finetune":
            self.set_frozen(False)

    def _shared_adapter(self, d: int, init: Init) -> LoRAAdapter:
        c = self.config
        return LoRAAdapter(d, d, rank=c.rank, variant=c.variant, init=init, scale=c.scale, num_experts=c.num_experts)

    def branch(self, name: str) -> ViTBackbone:
        return {"rgb": self.branch_rgb, "event": self.branch_event, "diff": self.branch_diff}[name]

    # -- stages ---------------------------------------------------------
    def reconstruct(self, F_v: Tensor, F_e: Tensor) -> tuple[Tensor, Tensor]:
        """(event features predicted from RGB, RGB features predicted from events)."""
        return self.recon_r2e(F_v), self.recon_e2r(F_e)

    def fuse_shared(self, F_v: Tensor, F_e: Tensor, F_d: Tensor) -> tuple[Tensor, Tensor, Tensor | None]:
        if F_v.shape != F_e.shape or F_v.shape != F_d.shape:
            raise ContractError(f"fusion inputs differ in shape: {F_v.shape}, {F_e.shape}, {F_d.shape}")
        if not (self.config.lora_shared and adapters_enabled()):
            return self.refine_norm_rgb(F_v), self.refine_norm_event(F_e), None
        n = F_v.shape[-2]
        x = T.concat([F_v, F_e, F_d], axis=-2)
        m = x + self.fuse_attn(self.fuse_norm(x))
        fused = m + self.fuse_adapter.delta(m)
        bar_v = self.refine_norm_rgb(F_v + self.refine_rgb.delta(fused[..., :n, :]))
        bar_e = self.refine_norm_event(F_e + self.refine_event.delta(fused[..., n : 2 * n, :]))
        return bar_v, bar_e, fused

    def forward(self, batch: Batch, with_loss: bool = True) -> VeloraOutput:
        cfg = self.config
        if batch.rgb.shape[-4] != cfg.frames or batch.event.shape[-4] != cfg.frames:
            raise ContractError(f"expected {cfg.frames} frames, got {batch.rgb.shape[-4]}")
        F_v = encode_modality(batch.rgb, self.branch_rgb)
        F_e = encode_modality(batch.event, self.branch_event)
        if cfg.frame_diff:
            F_d = self.branch_diff(batch.diff, upto=cfg.vit.depth - 1)
        else:
            F_d = Tensor(np.zeros(F_v.shape, dtype=F_v.dtype))
        recon_e = recon_r = None
        if cfg.reconstruction:
            recon_e, recon_r = self.reconstruct(F_v, F_e)
        bar_v, bar_e, _ = self.fuse_shared(F_v, F_e, F_d)
        feats = T.concat([bar_v[..., 0, :], bar_e[..., 0, :]], axis=-1)
        logits = self.head(feats)
        out = VeloraOutput(logits, F_v, F_e, F_d, recon_r, recon_e)
        if with_loss and batch.labels is not None:
            ce = T.cross_entropy(logits, batch.labels)
            if cfg.reconstruction:
                rte, etr = reconstruction_losses(F_v, F_e, recon_e, recon_r)
            else:
                zero = Tensor(np.zeros((), dtype=ce.dtype))
                rte, etr = zero, zero
            out.losses = {"ce": ce, "rte": rte, "etr": etr, "total": ce + rte + etr}
        return out

    def forward_clip(self, clip: Clip) -> VeloraOutput:
        """Single-clip forward; logits come back with shape [num_classes]."""
        out = self.forward(prepare([clip], self.config.diff_source))
        out.logits = out.logits[0]
        return out


def build_model(config: ModelConfig, dtype=None) -> VeloraModel:
    if dtype is None:
        return VeloraModel(config)
    with T.default_dtype(dtype):
        return VeloraModel(config)
