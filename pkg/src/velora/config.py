"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .nn import ViTConfig


@dataclass
class RunConfig:
    # geometry
    image: int = 32
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    classes: int = 4
    frames: int = 8
    # adapters
    rank: int = 4
    variant: str = "lora"
    locations: str = "mlp"
    scale: float = 1.0
    experts: int = 4
    # component toggles
    frame_diff: bool = True
    reconstruction: bool = True
    lora_specific: bool = True
    lora_shared: bool = True
    diff_source: str = "both"
    init_std: float = 0.02
    # optimisation
    mode: str = "velora"
    lr: float = 1e-4
    weight_decay: float = 0.01
    min_lr: float = 0.0
    warmup: int = 0
    epochs: int = 50
    batch: int = 4
    max_steps: int = 0
    early_stop: float = 0.99
    grad_clip: float = 0.0
    seed: int = 0
    # data / io
    clips: int = 200
    data_dir: str = ""
    out_dir: str = "runs"

    def model_config(self) -> ModelConfig:
        vit = ViTConfig(
            image_size=self.image,
            patch_size=self.patch,
            dim=self.dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=self.classes,
        )
        return ModelConfig(
            vit=vit,
            frames=self.frames,
            rank=self.rank,
            variant=self.variant,
            locations=self.locations,
            scale=self.scale,
            num_experts=self.experts,
            frame_diff=self.frame_diff,
            reconstruction=self.reconstruction,
            lora_specific=self.lora_specific,
            lora_shared=self.lora_shared,
            mode=self.mode,
            diff_source=self.diff_source,
            init_std=self.init_std,
            seed=self.seed,
        )

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def updated(self, **changes) -> "RunConfig":
        return parse_pairs({**{k: _fmt(v) for k, v in asdict(self).items()}, **{k: _fmt(v) for k, v in changes.items()}})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        return parse_pairs(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_bool(key: str, value: str) -> bool:
    v = value.lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_pairs(pairs: dict) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for key, value in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kind = known[key].type
        value = str(value)
        try:
            if kind == "bool":
                values[key] = _parse_bool(key, value)
            elif kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    cfg = RunConfig(**values)
    cfg.model_config()  # validates geometry and names
    if cfg.batch < 1 or cfg.epochs < 0:
        raise ConfigError("batch must be >= 1 and epochs >= 0")
    return cfg
