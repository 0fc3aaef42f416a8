"""End-to-end runs: dataset loading, training into an output directory,
model-level gradient checks and the ablation sweeps."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ConfigError, DataError
from .events import Clip, gen_synthetic, load_dataset, read_manifest
from .lora import VARIANTS, trainable_param_count
from .model import COMPONENT_ROWS, Batch, VeloraModel, prepare
from .rng import make_rng
from .train import (
    Trainer,
    efficiency_report,
    evaluate_top1,
    load_checkpoint,
    resume_trainer,
    save_checkpoint,
    write_history,
)

SWEEP_AXES = {
    "frames": (4, 5, 6, 8, 10),
    "rank": (4, 6, 8, 12),
    "location": ("qkv", "mlp", "qkv_mlp"),
    "variant": VARIANTS,
    "components": tuple(COMPONENT_ROWS),
}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def split_indices(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    order = make_rng(seed, "split").permutation(n)
    k = int(round(train_frac * n))
    return np.sort(order[:k]), np.sort(order[k:])


def synthetic_clips(run: RunConfig) -> list[Clip]:
    return gen_synthetic(run.clips, run.classes, run.image, run.image, run.frames, make_rng(run.seed, "data"))


def check_geometry(clips: list[Clip], run: RunConfig) -> None:
    for i, clip in enumerate(clips):
        if clip.size != (run.image, run.image):
            raise DataError(f"clip {i} is {clip.size[0]}x{clip.size[1]}, config expects {run.image}x{run.image}")
        if clip.num_frames != run.frames:
            raise DataError(f"clip {i} has {clip.num_frames} frames, config expects {run.frames}")
        if not 0 <= clip.label < run.classes:
            raise DataError(f"clip {i} has label {clip.label}, config has {run.classes} classes")


def load_split(run: RunConfig, split: str) -> list[Clip]:
    """Clips of ``split`` ('train', 'test' or 'all').

    With an empty ``data_dir`` the synthetic set is generated in memory and
    split 80/20 by the seeded shuffle that ``gen-data`` uses.
    """
    if run.data_dir:
        if not Path(run.data_dir, "manifest.csv").exists():
            raise DataError(f"no dataset at {run.data_dir!r} (manifest.csv missing)")
        clips = load_dataset(run.data_dir, split)
    else:
        clips = synthetic_clips(run)
        tr, te = split_indices(len(clips), run.seed)
        pick = {"train": tr, "test": te, "all": np.arange(len(clips))}[split]
        clips = [clips[i] for i in pick]
    if not clips:
        raise DataError(f"split {split!r} is empty")
    check_geometry(clips, run)
    return clips


def load_batch(run: RunConfig, split: str) -> Batch:
    return prepare(load_split(run, split), run.diff_source)


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: Path
    history: list
    train_top1: float
    test_top1: float
    trainable_params: int
    wall_time: float


def run_training(run: RunConfig, out_dir, resume=None, callback=None) -> RunResult:
    """Train per ``run`` (or continue from checkpoint ``resume``) and write
    ``config.txt``, ``history.csv``, ``final.ckpt`` and ``efficiency.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if resume is not None:
        ckpt = load_checkpoint(resume)
        run = ckpt.config
        train_data = load_batch(run, "train")
        trainer = resume_trainer(ckpt, train_data)
    else:
        train_data = load_batch(run, "train")
        trainer = Trainer(VeloraModel(run.model_config()), run, train_data)
    run.save(out / "config.txt")
    trainer.fit(callback=callback)
    model = trainer.model
    write_history(trainer.state.history, out / "history.csv")
    save_checkpoint(out / "final.ckpt", trainer)
    (out / "efficiency.txt").write_text(efficiency_report(model, trainer.state.epoch_times).to_text())
    test_data = load_batch(run, "test")
    trainable, _ = trainable_param_count(model)
    return RunResult(
        out,
        trainer.state.history,
        evaluate_top1(model, train_data),
        evaluate_top1(model, test_data),
        trainable,
        time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def gradcheck_model(run: RunConfig, eps: float = 1e-3, clips: int = 2, coords: int = 3, jitter: float = 0.02) -> dict:
    """Worst central-difference relative error per trainable parameter group.

    Runs in float64 on ``clips`` synthetic clips. Trainable parameters are
    first jittered by N(0, jitter) so zero-initialized B matrices do not
    leave the A gradients identically zero. For each group the ``coords``
    largest-magnitude gradient entries are probed.
    """
    with T.default_dtype(np.float64):
        model = VeloraModel(run.model_config())
        small = replace(run, clips=max(clips, run.classes), data_dir="")
        batch = prepare(synthetic_clips(small)[:clips], run.diff_source)
        rng = make_rng(run.seed, "gradcheck")
        named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        for _, p in named:
            p.data = p.data + rng.normal(0.0, jitter, p.shape)

        def loss(_):
            return model.forward(batch).losses["total"]

        T.backward(loss(None))
        grads = {n: np.abs(p.grad).reshape(-1) for n, p in named}
        model.zero_grad()
        errors = {}
        for name, p in named:
            idx = [int(i) for i in np.argsort(-grads[name], kind="stable")[:coords]]
            errors[name] = T.finite_diff_check(loss, p, eps=eps, indices=idx)
            model.zero_grad()
    return errors


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

COMPONENTS_NOTE = "classification head and refinement norms stay trainable in every row"


@dataclass
class SweepRow:
    value: str
    top1: float
    train_top1: float
    trainable_params: int
    wall_time: float


@dataclass
class SweepReport:
    axis: str
    rows: list = field(default_factory=list)

    def csv_text(self) -> str:
        lines = ["value,top1,train_top1,trainable_params,wall_time"]
        for r in self.rows:
            lines.append(f"{r.value},{r.top1!r},{r.train_top1!r},{r.trainable_params},{r.wall_time:.3f}")
        return "\n".join(lines) + "\n"

    def table_text(self) -> str:
        head = f"# sweep axis: {self.axis}\n"
        if self.axis == "components":
            head += f"# {COMPONENTS_NOTE}\n"
            head += "# row = (frame_diff, reconstruction, lora_specific, lora_shared)\n"
        cells = [("value", "top1", "train_top1", "trainable_params", "wall_time")]
        for r in self.rows:
            cells.append((r.value, f"{r.top1:.4f}", f"{r.train_top1:.4f}", str(r.trainable_params), f"{r.wall_time:.1f}"))
        widths = [max(len(c[i]) for c in cells) for i in range(5)]
        body = "\n".join("  ".join(c[i].rjust(widths[i]) for i in range(5)) for c in cells)
        return head + body + "\n"

    def values(self) -> list[str]:
        return [r.value for r in self.rows]


def sweep_config(run: RunConfig, axis: str, value) -> RunConfig:
    if axis == "frames":
        return run.updated(frames=value)
    if axis == "rank":
        return run.updated(rank=value)
    if axis == "location":
        return run.updated(locations=value)
    if axis == "variant":
        return run.updated(variant=value)
    if axis == "components":
        fd, rec, spe, share = COMPONENT_ROWS[value]
        return run.updated(frame_diff=fd, reconstruction=rec, lora_specific=spe, lora_shared=share)
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


def run_sweep(run: RunConfig, axis: str, out_dir=None, log=None) -> SweepReport:
    """Retrain from scratch (shared seed) for each value of ``axis``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    if axis == "frames" and run.data_dir:
        raise ConfigError("the frames sweep regenerates data per value; leave data_dir empty")
    root = Path(out_dir if out_dir is not None else run.out_dir) / axis
    report = SweepReport(axis)
    for value in SWEEP_AXES[axis]:
        cfg = sweep_config(run, axis, value)
        res = run_training(cfg, root / str(value))
        row = SweepRow(str(value), res.test_top1, res.train_top1, res.trainable_params, res.wall_time)
        report.rows.append(row)
        if log is not None:
            log(row)
    (root / "report.csv").write_text(report.csv_text())
    (root / "report.txt").write_text(report.table_text())
    return report


def manifest_counts(data_dir) -> dict:
    counts: dict = {}
    for _, _, split in read_manifest(data_dir):
        counts[split] = counts.get(split, 0) + 1
    return counts
