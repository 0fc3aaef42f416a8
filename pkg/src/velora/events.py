"""Event streams: rasterization, alignment to RGB frames, frame differences,
a synthetic RGB+event clip generator, and the on-disk clip format."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DataError, FormatError

EVENT_DTYPE = np.dtype([("x", np.int64), ("y", np.int64), ("t", np.uint64), ("p", np.int8)])
FRAME_INTERVAL_US = 10_000


class EventPoint(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventFrame:
    pixels: np.ndarray
    window: tuple[int, int]


@dataclass
class Clip:
    rgb_frames: np.ndarray  # [C, H, W, 3] in [0, 1]
    events: np.ndarray  # structured EVENT_DTYPE, sorted by t
    frame_timestamps: np.ndarray  # [C] uint64 microseconds
    label: int

    @property
    def num_frames(self) -> int:
        return len(self.rgb_frames)

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb_frames.shape[1], self.rgb_frames.shape[2]


@dataclass
class FrameDiffImage:
    pixels: np.ndarray
    source: str


def as_event_array(events) -> np.ndarray:
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    arr = np.zeros(len(events), dtype=EVENT_DTYPE)
    for i, e in enumerate(events):
        arr[i] = (e[0], e[1], e[2], e[3])
    return arr


def _normalize(acc: np.ndarray) -> np.ndarray:
    lo, hi = acc.min(), acc.max()
    if hi == lo:
        return np.zeros_like(acc)
    return (acc - lo) / (hi - lo)


def _check_bounds(ev: np.ndarray, height: int, width: int) -> None:
    bad = (ev["x"] < 0) | (ev["x"] >= width) | (ev["y"] < 0) | (ev["y"] >= height)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"event {i} at (x={ev['x'][i]}, y={ev['y'][i]}) outside {width}x{height} sensor")


def rasterize(events, t_start: int, t_end: int, height: int, width: int) -> EventFrame:
    """Signed polarity sum over ``[t_start, t_end)``, min-max normalized to [0, 1]."""
    if not t_start < t_end:
        raise ContractError(f"empty window [{t_start}, {t_end})")
    ev = as_event_array(events)
    _check_bounds(ev, height, width)
    t = ev["t"]
    sel = ev[(t >= np.uint64(t_start)) & (t < np.uint64(t_end))]
    acc = np.zeros((height, width), dtype=np.float64)
    np.add.at(acc, (sel["y"], sel["x"]), sel["p"].astype(np.float64))
    return EventFrame(_normalize(acc), (int(t_start), int(t_end)))


def rasterize_loop(events, t_start: int, t_end: int, height: int, width: int) -> EventFrame:
    """Per-event reference accumulation; same contract as :func:`rasterize`."""
    if not t_start < t_end:
        raise ContractError(f"empty window [{t_start}, {t_end})")
    acc = np.zeros((height, width), dtype=np.float64)
    for i, (x, y, t, p) in enumerate(as_event_array(events).tolist()):
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(f"event {i} at (x={x}, y={y}) outside {width}x{height} sensor")
        if t_start <= t < t_end:
            acc[y, x] += p
    return EventFrame(_normalize(acc), (int(t_start), int(t_end)))


def frame_windows(timestamps: Sequence[int]) -> list[tuple[int, int]]:
    """Midpoint windows around each timestamp; the two outer windows extend
    half an interval beyond the first/last stamp (clamped at 0)."""
    ts = [int(t) for t in timestamps]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise DataError("frame timestamps must be strictly increasing")
    if len(ts) == 1:
        return [(0, ts[0] + FRAME_INTERVAL_US // 2)]
    # ceiling midpoints keep every stamp inside its own window
    mids = [(a + b + 1) // 2 for a, b in zip(ts, ts[1:])]
    start = max(0, ts[0] - (mids[0] - ts[0]))
    end = ts[-1] + max(ts[-1] - mids[-1], 1)
    bounds = [start, *mids, end]
    return list(zip(bounds[:-1], bounds[1:]))


def align_to_frames(clip: Clip) -> list[EventFrame]:
    h, w = clip.size
    return [rasterize(clip.events, a, b, h, w) for a, b in frame_windows(clip.frame_timestamps)]


def frame_difference(frames, source: str = "rgb") -> FrameDiffImage:
    """Mean of consecutive differences ``frames[i+1] - frames[i]``."""
    stack = np.asarray(frames, dtype=np.float64)
    if stack.shape[0] < 2:
        raise ContractError(f"frame_difference needs at least 2 frames, got {stack.shape[0]}")
    return FrameDiffImage(np.diff(stack, axis=0).mean(axis=0), source)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _coverage(lo: float, size: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1) covered by [lo, lo+size)."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(i + 1, lo + size) - np.maximum(i, lo), 0.0, 1.0)


def _render(bg: np.ndarray, color: np.ndarray, x0: float, y0: float, size: float) -> np.ndarray:
    h, w = bg.shape[:2]
    mask = np.outer(_coverage(y0, size, h), _coverage(x0, size, w))[..., None]
    return bg * (1.0 - mask) + color * mask


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _brightness(img: np.ndarray) -> np.ndarray:
    return img.mean(axis=-1)


def gen_clip(
    label: int,
    classes: int,
    height: int,
    width: int,
    frames: int,
    rng: np.random.Generator,
    threshold: float = 0.15,
    substeps: int = 4,
    speed: float = 1.5,
) -> Clip:
    """One clip: a bright square drifting in a class-specific direction over
    a static textured background. ``speed=0`` gives a static control clip."""
    angle = 2.0 * np.pi * label / classes
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    size = float(rng.uniform(0.2, 0.3) * min(height, width))
    base = rng.uniform(0.05, 0.3, size=(height // 4 + 1, width // 4 + 1, 3))
    bg = np.kron(base, np.ones((4, 4, 1)))[:height, :width]
    bg = bg + rng.uniform(-0.03, 0.03, size=bg.shape)
    color = rng.uniform(0.8, 1.0, size=3)
    travel_x, travel_y = vx * frames, vy * frames
    cx = rng.uniform(-1.0, 1.0) + (width - size - travel_x) / 2.0
    cy = rng.uniform(-1.0, 1.0) + (height - size - travel_y) / 2.0

    dt = FRAME_INTERVAL_US / substeps
    stamps = np.array([FRAME_INTERVAL_US // 2 + i * FRAME_INTERVAL_US for i in range(frames)], dtype=np.uint64)

    def at(time_us: float) -> np.ndarray:
        f = time_us / FRAME_INTERVAL_US
        return _quantize(_render(bg, color, cx + vx * f, cy + vy * f, size))

    rgb = np.stack([at(float(t)) for t in stamps])
    chunks = []
    prev = _brightness(at(0.0))
    for k in range(1, substeps * frames):
        cur = _brightness(at(k * dt))
        change = cur - prev
        ys, xs = np.nonzero(np.abs(change) > threshold)
        if len(xs):
            ev = np.zeros(len(xs), dtype=EVENT_DTYPE)
            ev["x"], ev["y"] = xs, ys
            ev["t"] = np.uint64(round(k * dt))
            ev["p"] = np.sign(change[ys, xs]).astype(np.int8)
            chunks.append(ev)
        prev = cur
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    return Clip(rgb, events, stamps, int(label))


def gen_synthetic(
    num_clips: int,
    classes: int,
    height: int,
    width: int,
    frames: int,
    rng: np.random.Generator,
    threshold: float = 0.15,
    substeps: int = 4,
    speed: float = 1.5,
) -> list[Clip]:
    """Class-balanced synthetic dataset; labels are shuffled deterministically."""
    if not 2 <= classes <= 16:
        raise ContractError(f"classes must be in [2, 16], got {classes}")
    if frames < 2:
        raise ContractError("need at least 2 frames per clip")
    labels = rng.permutation(np.arange(num_clips) % classes)
    return [
        gen_clip(int(y), classes, height, width, frames, rng, threshold=threshold, substeps=substeps, speed=speed)
        for y in labels
    ]


# ---------------------------------------------------------------------------
# model inputs
# ---------------------------------------------------------------------------


def event_images(clip: Clip) -> np.ndarray:
    """Aligned event frames replicated to 3 channels, [C, H, W, 3]."""
    frames = np.stack([f.pixels for f in align_to_frames(clip)]).astype(np.float32)
    return np.repeat(frames[..., None], 3, axis=-1)


def diff_image(rgb: np.ndarray, events: np.ndarray, source: str = "both") -> np.ndarray:
    """Motion image for the difference branch.

    ``both`` averages the RGB and event frame differences; ``rgb`` uses the
    RGB difference alone.
    """
    d_rgb = frame_difference(rgb, "rgb").pixels
    if source == "rgb":
        return d_rgb.astype(np.float32)
    if source != "both":
        raise ContractError(f"unknown diff source {source!r}")
    d_ev = frame_difference(events, "event").pixels
    return (0.5 * (d_rgb + d_ev)).astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    raw = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit binary PPM")
    w, h = int(fields[1]), int(fields[2])
    raw = np.frombuffer(data[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    if raw.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return (raw.reshape(h, w, 3) / 255.0).astype(np.float32)


def save_clip(clip: Clip, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.rgb_frames):
        write_ppm(d / f"rgb_{i:02d}.ppm", frame)
    with open(d / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "t_us", "p"])
        for x, y, t, p in clip.events.tolist():
            w.writerow([x, y, t, p])
    stamps = ",".join(str(int(t)) for t in clip.frame_timestamps)
    (d / "meta.txt").write_text(f"label={clip.label}\ntimestamps={stamps}\n")


def load_clip(directory) -> Clip:
    d = Path(directory)
    meta = {}
    for line in (d / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    try:
        label = int(meta["label"])
        stamps = np.array([int(s) for s in meta["timestamps"].split(",")], dtype=np.uint64)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{d}/meta.txt: {exc}") from None
    frames = np.stack([read_ppm(d / f"rgb_{i:02d}.ppm") for i in range(len(stamps))])
    with open(d / "events.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "t_us", "p"]:
            raise FormatError(f"{d}/events.csv: bad header {header}")
        rows = [tuple(int(v) for v in r) for r in reader if r]
    events = np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, dtype=EVENT_DTYPE)
    return Clip(frames, events, stamps, label)


def write_dataset(clips: Sequence[Clip], out_dir, split_rng: np.random.Generator, train_frac: float = 0.8) -> Path:
    """Write clips plus ``manifest.csv`` (clip,label,split) with a seeded 80/20 split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = split_rng.permutation(len(clips))
    n_train = int(round(train_frac * len(clips)))
    split = np.empty(len(clips), dtype=object)
    split[order[:n_train]] = "train"
    split[order[n_train:]] = "test"
    rows = []
    for i, clip in enumerate(clips):
        name = f"clip_{i:04d}"
        save_clip(clip, out / name)
        rows.append((name, clip.label, split[i]))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip", "label", "split"])
        w.writerows(rows)
    return out / "manifest.csv"


def read_manifest(data_dir) -> list[tuple[str, int, str]]:
    path = Path(data_dir) / "manifest.csv"
    if not path.exists():
        raise FormatError(f"no manifest.csv in {data_dir}")
    with open(path, newline="") as fh:
        return [(r["clip"], int(r["label"]), r["split"]) for r in csv.DictReader(fh)]


def load_dataset(data_dir, split: str | None = None) -> list[Clip]:
    rows = read_manifest(data_dir)
    return [load_clip(os.path.join(data_dir, name)) for name, _, s in rows if split in (None, "all", s)]
