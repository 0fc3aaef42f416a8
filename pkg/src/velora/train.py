"""Optimization loop, metrics, efficiency accounting and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ContractError, FormatError, TrainingError
from .lora import reset_dylora_ranks, sample_dylora_ranks, trainable_param_count
from .model import Batch, ModelConfig, VeloraModel
from .nn import ViTConfig
from .rng import make_rng, restore_rng, rng_state

HISTORY_FIELDS = ("epoch", "ce", "rte", "etr", "total", "top1", "lr")


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Only parameters with ``requires_grad`` get moments, so frozen weights are
    never touched even if something left a gradient on them.
    """

    def __init__(self, named_params, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        if lr < 0:
            raise ContractError("learning rate must be non-negative")
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in {name}")
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            c = p.data.dtype.type
            if not p.data.flags.writeable:
                p.data = np.array(p.data)
            if self.weight_decay:
                p.data *= c(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= c(b1)
            m += c(1.0 - b1) * g
            v *= c(b2)
            v += c(1.0 - b2) * g * g
            m_hat = m / c(1.0 - b1**self.t)
            v_hat = v / c(1.0 - b2**self.t)
            p.data -= c(lr) * m_hat / (np.sqrt(v_hat) + c(self.eps))

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"m:{name}"] = self.m[name]
            out[f"v:{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params:
            self.m[name] = np.array(tensors[f"m:{name}"], dtype=p.data.dtype).reshape(p.shape)
            self.v[name] = np.array(tensors[f"v:{name}"], dtype=p.data.dtype).reshape(p.shape)
        self.t = int(t)


def optimizer_step(optimizer: AdamW, lr: float) -> None:
    optimizer.step(lr)


@dataclass
class Schedule:
    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0


def cosine_lr(step: int, sched: Schedule) -> float:
    """Linear warmup, then cosine decay from base_lr to min_lr at total_steps."""
    if not 0 <= step <= sched.total_steps:
        raise ContractError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    span = sched.total_steps - sched.warmup_steps
    if span <= 0:
        return sched.min_lr
    progress = (step - sched.warmup_steps) / span
    return sched.min_lr + 0.5 * (sched.base_lr - sched.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= g.dtype.type(factor)
    return norm


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def predict_logits(model: VeloraModel, data: Batch, batch_size: int = 16) -> np.ndarray:
    if len(data) == 0:
        raise ContractError("empty dataset")
    out = []
    with T.no_grad():
        for i in range(0, len(data), batch_size):
            out.append(model.forward(data.take(slice(i, i + batch_size)), with_loss=False).logits.data)
    return np.concatenate(out)


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction with argmax == label; ties go to the lowest class index."""
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_top1(model: VeloraModel, data: Batch, batch_size: int = 16) -> float:
    if len(data) == 0:
        raise ContractError("empty dataset")
    return top1(predict_logits(model, data, batch_size), data.labels)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    epoch_times: list = field(default_factory=list)


class Trainer:
    """Mini-batch loop: forward, composite loss, backward, AdamW step.

    All randomness (shuffling, dylora ranks) comes from one stream whose
    state is checkpointed, so a resumed run replays the uninterrupted one.
    """

    def __init__(self, model: VeloraModel, run: RunConfig, train_data: Batch):
        if len(train_data) == 0:
            raise ContractError("empty dataset")
        self.model = model
        self.run = run
        self.data = train_data
        self.steps_per_epoch = math.ceil(len(train_data) / run.batch)
        total = run.epochs * self.steps_per_epoch
        if run.max_steps > 0:
            total = min(total, run.max_steps)
        self.schedule = Schedule(run.lr, max(total, 1), run.warmup, run.min_lr)
        self.optimizer = AdamW(model.named_parameters(), weight_decay=run.weight_decay)
        self.rng = make_rng(run.seed, "train")
        self.state = TrainState()

    @property
    def total_steps(self) -> int:
        return self.schedule.total_steps

    def _done(self) -> bool:
        st, run = self.state, self.run
        if st.epoch >= run.epochs or st.step >= self.total_steps:
            return True
        return bool(run.early_stop > 0 and st.history and st.history[-1]["top1"] >= run.early_stop)

    def run_epoch(self) -> dict:
        model, run, st = self.model, self.run, self.state
        trainable = model.trainable_parameters()
        order = self.rng.permutation(len(self.data))
        sums = dict.fromkeys(("ce", "rte", "etr", "total"), 0.0)
        correct = seen = 0
        lr = 0.0
        t0 = time.perf_counter()
        for start in range(0, len(order), run.batch):
            if st.step >= self.total_steps:
                break
            batch = self.data.take(order[start : start + run.batch])
            lr = cosine_lr(st.step, self.schedule)
            sample_dylora_ranks(model, self.rng)
            out = model.forward(batch)
            T.backward(out.losses["total"])
            if run.grad_clip > 0:
                clip_grad_norm(trainable, run.grad_clip)
            self.optimizer.step(lr)
            model.zero_grad()
            st.step += 1
            n = len(batch)
            for k in sums:
                sums[k] += out.losses[k].item() * n
            correct += int((np.argmax(out.logits.data, axis=1) == batch.labels).sum())
            seen += n
        reset_dylora_ranks(model)
        st.epoch += 1
        st.epoch_times.append(time.perf_counter() - t0)
        row = {"epoch": st.epoch, **{k: v / max(seen, 1) for k, v in sums.items()}}
        row["top1"] = correct / max(seen, 1)
        row["lr"] = lr
        st.history.append(row)
        return row

    def fit(self, epochs: int | None = None, callback=None) -> list[dict]:
        """Train until ``epochs`` (default: config) or the step budget or early stop."""
        target = self.run.epochs if epochs is None else epochs
        while not self._done() and self.state.epoch < target:
            row = self.run_epoch()
            if callback is not None:
                callback(self, row)
        return self.state.history


def train(model: VeloraModel, data: Batch, run: RunConfig) -> list[dict]:
    """Convenience wrapper; ``run.mode`` must match how ``model`` was built."""
    return Trainer(model, run, data).fit()


def write_history(history: list[dict], path) -> None:
    lines = [",".join(HISTORY_FIELDS)]
    for row in history:
        lines.append(",".join(repr(row[k]) if k != "epoch" else str(row[k]) for k in HISTORY_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


def read_history(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in zip(head, line.split(","))} for line in lines[1:]]


# ---------------------------------------------------------------------------
# efficiency accounting
# ---------------------------------------------------------------------------


@dataclass
class EfficiencyReport:
    trainable_params: int
    frozen_params: int
    est_flops_per_forward: int
    wall_time_per_epoch: float
    peak_resident_estimate: int

    @property
    def total_params(self) -> int:
        return self.trainable_params + self.frozen_params

    @property
    def trainable_ratio(self) -> float:
        return self.trainable_params / self.total_params

    @property
    def trainable_mb(self) -> float:
        return self.trainable_params * 4 / 2**20

    @property
    def total_mb(self) -> float:
        return self.total_params * 4 / 2**20

    def to_text(self) -> str:
        rows = [
            ("trainable_params", self.trainable_params),
            ("frozen_params", self.frozen_params),
            ("total_params", self.total_params),
            ("trainable_ratio", f"{self.trainable_ratio:.6f}"),
            ("trainable_mb", f"{self.trainable_mb:.4f}"),
            ("total_mb", f"{self.total_mb:.4f}"),
            ("est_flops_per_forward", self.est_flops_per_forward),
            ("wall_time_per_epoch_s", f"{self.wall_time_per_epoch:.3f}"),
            ("peak_resident_estimate_mb", f"{self.peak_resident_estimate / 2**20:.2f}"),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)


def _adapter_macs(n: int, d_in: int, d_out: int, cfg: ModelConfig) -> int:
    r = cfg.rank
    base = n * (r * d_in + d_out * r)
    if cfg.variant == "lora_fa_plus":
        return base + n * r * r
    if cfg.variant == "moe_lora":
        return cfg.num_experts * base + n * cfg.num_experts * d_in
    return base


def _block_macs(n: int, vit: ViTConfig, cfg: ModelConfig | None) -> int:
    d, hid = vit.dim, vit.mlp_hidden
    macs = n * d * 3 * d + 2 * n * n * d + n * d * d + 2 * n * d * hid
    if cfg is not None:
        pts = cfg.policy().attach_points
        if "qkv" in pts:
            macs += _adapter_macs(n, d, 3 * d, cfg)
        if "mlp_fc1" in pts:
            macs += _adapter_macs(n, d, hid, cfg) + _adapter_macs(n, hid, d, cfg)
    return macs


def estimate_forward_flops(cfg: ModelConfig) -> int:
    """Closed-form FLOPs (2 x multiply-adds) of one single-clip forward."""
    vit = cfg.vit
    n, d = vit.token_count, vit.dim
    embed = (n - 1) * vit.patch_dim * d
    spec = cfg if cfg.lora_specific else None
    branch = embed + (vit.depth - 1) * _block_macs(n, vit, spec)
    macs = 2 * cfg.frames * branch
    if cfg.frame_diff:
        macs += branch
    if cfg.reconstruction:
        macs += 2 * _block_macs(n, vit, cfg)
    if cfg.lora_shared:
        m = 3 * n
        macs += m * d * 3 * d + 2 * m * m * d + m * d * d
        macs += _adapter_macs(m, d, d, cfg) + 2 * _adapter_macs(n, d, d, cfg)
    macs += 2 * d * vit.num_classes
    return 2 * macs


def measure_forward_flops(model: VeloraModel, data: Batch) -> int:
    """Instrumented FLOP count of a forward over the first clip of ``data``."""
    with T.no_grad(), T.count_flops() as box:
        model.forward(data.take(slice(0, 1)), with_loss=False)
    return box[0]


def efficiency_report(model: VeloraModel, epoch_times=()) -> EfficiencyReport:
    trainable, frozen = trainable_param_count(model)
    times = list(epoch_times)
    wall = float(np.mean(times)) if times else 0.0
    # weights + (grad, m, v) for every trainable element, float32
    resident = 4 * (trainable + frozen) + 4 * 3 * trainable
    return EfficiencyReport(trainable, frozen, estimate_forward_flops(model.config), wall, resident)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"VLRA"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(self.u32()):
            name = self.string()
            ndim = self.u32()
            shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return out


@dataclass
class Checkpoint:
    config: RunConfig
    model: VeloraModel
    trainer_state: dict
    optimizer_tensors: dict
    rng: np.random.Generator


def save_checkpoint(path, trainer: Trainer) -> None:
    model, st = trainer.model, trainer.state
    meta = {
        "epoch": st.epoch,
        "step": st.step,
        "optimizer_t": trainer.optimizer.t,
        "history": st.history,
        "epoch_times": st.epoch_times,
    }
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            _pack_str(trainer.run.to_text()),
            _pack_tensors(model.state_dict()),
            _pack_tensors(trainer.optimizer.state_tensors()),
            _pack_str(rng_state(trainer.rng)),
            _pack_str(json.dumps(meta, sort_keys=True)),
        ]
    )
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint completely before building anything."""
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        config = RunConfig.from_text(r.string())
        params = r.tensors()
        opt = r.tensors()
        rng_text = r.string()
        meta = json.loads(r.string())
    except (UnicodeDecodeError, ValueError, struct.error) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after checkpoint payload")
    model = VeloraModel(config.model_config())
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: parameters do not match config ({exc})") from None
    return Checkpoint(config, model, meta, opt, restore_rng(rng_text))


def resume_trainer(ckpt: Checkpoint, train_data: Batch) -> Trainer:
    trainer = Trainer(ckpt.model, ckpt.config, train_data)
    trainer.optimizer.load_state_tensors(ckpt.optimizer_tensors, ckpt.trainer_state["optimizer_t"])
    trainer.rng = ckpt.rng
    st = ckpt.trainer_state
    trainer.state = TrainState(st["epoch"], st["step"], list(st["history"]), list(st["epoch_times"]))
    return trainer

