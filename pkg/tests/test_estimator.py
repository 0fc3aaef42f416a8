import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from velora import EventFrameEncoder, FrameDifference, VeloraClassifier, check_clips
from velora.errors import DataError
from velora.events import event_images, frame_difference, gen_synthetic
from velora.rng import make_rng

SMALL = dict(dim=16, depth=2, heads=2, mlp_ratio=2, max_steps=4, batch=4, seed=1)


@pytest.fixture(scope="module")
def clips():
    return gen_synthetic(12, 3, 16, 16, 4, make_rng(2, "est"))


def test_get_params_and_clone():
    clf = VeloraClassifier(rank=6, variant="lora_fa")
    params = clf.get_params()
    assert params["rank"] == 6 and params["variant"] == "lora_fa" and params["lr"] == 1e-4
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    clf.set_params(rank=8)
    assert clf.rank == 8


def test_fit_predict_with_string_labels(clips):
    names = np.array(["left", "up", "down"])
    y = names[[c.label for c in clips]]
    clf = VeloraClassifier(**SMALL).fit(clips, y)
    assert list(clf.classes_) == sorted(names)
    pred = clf.predict(clips)
    assert pred.shape == (12,) and set(pred) <= set(names)
    proba = clf.predict_proba(clips)
    assert proba.shape == (12, 3)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-12)
    assert np.array_equal(clf.classes_[proba.argmax(1)], pred)
    assert 0.0 <= clf.score(clips, y) <= 1.0
    assert len(clf.history_) >= 1
    assert clf.n_trainable_params_ > 0 and clf.n_frozen_params_ > clf.n_trainable_params_


def test_fit_uses_clip_labels_by_default(clips):
    clf = VeloraClassifier(**SMALL).fit(clips)
    assert list(clf.classes_) == [0, 1, 2]
    assert 0.0 <= clf.score(clips) <= 1.0
    rep = clf.efficiency()
    assert rep.trainable_params == clf.n_trainable_params_


def test_fit_is_deterministic(clips):
    a = VeloraClassifier(**SMALL).fit(clips).decision_function(clips)
    b = VeloraClassifier(**SMALL).fit(clips).decision_function(clips)
    assert np.array_equal(a, b)


def test_unfitted_and_geometry_errors(clips):
    with pytest.raises(NotFittedError):
        VeloraClassifier().predict(clips)
    clf = VeloraClassifier(**SMALL).fit(clips)
    other = gen_synthetic(3, 3, 8, 8, 4, make_rng(0))
    with pytest.raises(DataError):
        clf.predict(other)
    with pytest.raises(DataError):
        VeloraClassifier(**SMALL).fit(clips, [0] * 3)
    with pytest.raises(DataError):
        VeloraClassifier(**SMALL).fit(clips, [0] * 12)


def test_check_clips():
    c = gen_synthetic(3, 3, 8, 8, 3, make_rng(0))
    assert check_clips(c) == c
    with pytest.raises(DataError):
        check_clips([])
    with pytest.raises(DataError):
        check_clips(c[0])
    with pytest.raises(DataError):
        check_clips([c[0], "clip"])
    with pytest.raises(DataError):
        check_clips(c, frames=4)


def test_event_frame_encoder(clips):
    enc = EventFrameEncoder().fit(clips)
    out = enc.transform(clips[:2])
    assert out.shape == (2, 4, 16, 16, 3)
    np.testing.assert_array_equal(out[1], event_images(clips[1]))


def test_frame_difference_transformer(clips):
    rgb_only = FrameDifference(source="rgb").fit_transform(clips[:3])
    np.testing.assert_allclose(rgb_only[0], frame_difference(clips[0].rgb_frames).pixels, atol=1e-6)
    both = FrameDifference().fit(clips).transform(clips[:3])
    assert both.shape == (3, 16, 16, 3)
    with pytest.raises(NotFittedError):
        FrameDifference().transform(clips)


def test_transformers_compose_in_pipeline(clips):
    pipe = make_pipeline(FrameDifference(source="rgb"))
    assert pipe.fit_transform(clips).shape == (12, 16, 16, 3)
