"""scikit-learn style wrappers around the model and the event pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .errors import DataError
from .events import Clip, diff_image, event_images
from .lora import trainable_param_count
from .model import VeloraModel, prepare
from .train import Trainer, efficiency_report, predict_logits


def check_clips(X, frames: int | None = None, size: tuple | None = None) -> list[Clip]:
    """Validate a sequence of clips sharing one geometry and return it as a list."""
    if isinstance(X, Clip):
        raise DataError("expected a sequence of clips, got a single Clip")
    clips = list(X)
    if not clips:
        raise DataError("empty dataset")
    for i, c in enumerate(clips):
        if not isinstance(c, Clip):
            raise DataError(f"item {i} is {type(c).__name__}, expected Clip")
    ref_frames = clips[0].num_frames if frames is None else frames
    ref_size = clips[0].size if size is None else tuple(size)
    for i, c in enumerate(clips):
        if c.num_frames != ref_frames or c.size != ref_size:
            raise DataError(
                f"clip {i} has {c.num_frames} frames of {c.size}, expected {ref_frames} frames of {ref_size}"
            )
    return clips


class EventFrameEncoder(BaseEstimator, TransformerMixin):
    """Clips -> aligned event frames, shape [n, C, H, W, 3]."""

    def fit(self, X, y=None):
        clips = check_clips(X)
        self.n_frames_ = clips[0].num_frames
        self.frame_size_ = clips[0].size
        return self

    def transform(self, X):
        check_is_fitted(self, "n_frames_")
        clips = check_clips(X, self.n_frames_, self.frame_size_)
        return np.stack([event_images(c) for c in clips])


class FrameDifference(BaseEstimator, TransformerMixin):
    """Clips -> motion images (mean consecutive difference), shape [n, H, W, 3]."""

    def __init__(self, source: str = "both"):
        self.source = source

    def fit(self, X, y=None):
        clips = check_clips(X)
        self.frame_size_ = clips[0].size
        return self

    def transform(self, X):
        check_is_fitted(self, "frame_size_")
        clips = check_clips(X, size=self.frame_size_)
        out = []
        for c in clips:
            rgb = np.asarray(c.rgb_frames, dtype=np.float32)
            out.append(diff_image(rgb, event_images(c), self.source))
        return np.stack(out)


class VeloraClassifier(BaseEstimator, ClassifierMixin):
    """Frozen three-branch ViT with LoRA adapters, trained on RGB+event clips.

    Image size and frame count are taken from the training clips; labels
    may be any hashable values and are encoded internally.
    """

    def __init__(
        self,
        patch=4,
        dim=64,
        depth=4,
        heads=4,
        mlp_ratio=4,
        rank=4,
        variant="lora",
        locations="mlp",
        scale=1.0,
        experts=4,
        frame_diff=True,
        reconstruction=True,
        lora_specific=True,
        lora_shared=True,
        diff_source="both",
        init_std=0.02,
        mode="velora",
        lr=1e-4,
        weight_decay=0.01,
        epochs=50,
        batch=4,
        max_steps=0,
        early_stop=0.99,
        seed=0,
    ):
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.rank = rank
        self.variant = variant
        self.locations = locations
        self.scale = scale
        self.experts = experts
        self.frame_diff = frame_diff
        self.reconstruction = reconstruction
        self.lora_specific = lora_specific
        self.lora_shared = lora_shared
        self.diff_source = diff_source
        self.init_std = init_std
        self.mode = mode
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch = batch
        self.max_steps = max_steps
        self.early_stop = early_stop
        self.seed = seed

    def _run_config(self, image: int, frames: int, classes: int) -> RunConfig:
        params = self.get_params()
        return RunConfig(image=image, frames=frames, classes=classes, **params).updated()

    def fit(self, X, y=None):
        clips = check_clips(X)
        h, w = clips[0].size
        if h != w:
            raise DataError(f"clips must be square, got {h}x{w}")
        labels = np.array([c.label for c in clips]) if y is None else np.asarray(y)
        if len(labels) != len(clips):
            raise DataError(f"{len(clips)} clips but {len(labels)} labels")
        self._encoder = LabelEncoder().fit(labels)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        self.run_config_ = self._run_config(h, clips[0].num_frames, len(self.classes_))
        data = prepare(clips, self.diff_source)
        data.labels = self._encoder.transform(labels).astype(np.int64)
        self.model_ = VeloraModel(self.run_config_.model_config())
        trainer = Trainer(self.model_, self.run_config_, data)
        self.history_ = trainer.fit()
        self.n_trainable_params_, self.n_frozen_params_ = trainable_param_count(self.model_)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        rc = self.run_config_
        clips = check_clips(X, rc.frames, (rc.image, rc.image))
        return predict_logits(self.model_, prepare(clips, self.diff_source))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def score(self, X, y=None, sample_weight=None):
        clips = list(X)
        if y is None:
            y = [c.label for c in clips]
        return super().score(clips, y, sample_weight=sample_weight)

    def efficiency(self):
        check_is_fitted(self, "model_")
        return efficiency_report(self.model_)

