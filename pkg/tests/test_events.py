import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from velora.errors import ContractError, DataError, FormatError
from velora.events import (
    EVENT_DTYPE,
    FRAME_INTERVAL_US,
    align_to_frames,
    diff_image,
    event_images,
    frame_difference,
    frame_windows,
    gen_clip,
    gen_synthetic,
    load_clip,
    load_dataset,
    rasterize,
    rasterize_loop,
    read_manifest,
    read_ppm,
    save_clip,
    write_dataset,
    write_ppm,
)
from velora.rng import make_rng


def random_events(rng, n, h, w, t_max=40_000):
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    ev["x"] = rng.integers(0, w, n)
    ev["y"] = rng.integers(0, h, n)
    ev["t"] = np.sort(rng.integers(0, t_max, n)).astype(np.uint64)
    ev["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), n)
    return ev


def test_rasterize_hand_example():
    ev = [(0, 0, 10, 1), (0, 0, 20, 1), (1, 0, 30, -1), (1, 1, 99, 1)]
    f = rasterize(ev, 0, 50, 2, 2)
    # sums: (0,0)=+2, (0,1)=-1, rest 0 -> min-max to [0,1]
    np.testing.assert_allclose(f.pixels, [[1.0, 0.0], [1 / 3, 1 / 3]])
    assert f.window == (0, 50)


def test_rasterize_window_is_half_open():
    ev = [(0, 0, 100, 1), (1, 0, 200, 1)]
    f = rasterize(ev, 100, 200, 1, 2)
    np.testing.assert_allclose(f.pixels, [[1.0, 0.0]])


def test_rasterize_empty_window_is_zero():
    f = rasterize(np.zeros(0, dtype=EVENT_DTYPE), 0, 10, 3, 4)
    assert f.pixels.shape == (3, 4) and not f.pixels.any()


def test_rasterize_contract_errors():
    with pytest.raises(ContractError):
        rasterize([], 10, 10, 2, 2)
    with pytest.raises(DataError, match="event 1"):
        rasterize([(0, 0, 1, 1), (5, 0, 2, 1)], 0, 10, 2, 2)
    with pytest.raises(DataError):
        rasterize_loop([(0, -1, 1, 1)], 0, 10, 2, 2)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 400), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31), st.data())
def test_vectorized_equals_scalar_loop(n, h, w, seed, data):
    rng = np.random.default_rng(seed)
    ev = random_events(rng, n, h, w)
    a = data.draw(st.integers(0, 39_999))
    b = data.draw(st.integers(a + 1, 40_000))
    fast = rasterize(ev, a, b, h, w).pixels
    slow = rasterize_loop(ev, a, b, h, w).pixels
    assert np.array_equal(fast, slow)
    assert fast.min() >= 0 and fast.max() <= 1


def test_frame_windows_midpoints():
    assert frame_windows([5000, 15000, 25000]) == [(0, 10000), (10000, 20000), (20000, 30000)]
    assert frame_windows([100, 300]) == [(0, 200), (200, 400)]
    with pytest.raises(DataError):
        frame_windows([10, 10])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 50_000), min_size=2, max_size=12, unique=True))
def test_frame_windows_tile_the_span(stamps):
    stamps = sorted(stamps)
    wins = frame_windows(stamps)
    assert len(wins) == len(stamps)
    for (a0, b0), (a1, _) in zip(wins, wins[1:]):
        assert b0 == a1
    for (a, b), t in zip(wins, stamps):
        assert a <= t < b


def test_frame_difference_hand_example():
    frames = np.array([[[0.0]], [[1.0]], [[3.0]], [[2.0]]])
    # diffs 1, 2, -1 -> mean 2/3 == (2 - 0) / 3
    np.testing.assert_allclose(frame_difference(frames).pixels, [[2 / 3]])
    with pytest.raises(ContractError):
        frame_difference(frames[:1])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_frame_difference_telescopes(c, seed):
    frames = np.random.default_rng(seed).random((c, 5, 6, 3))
    got = frame_difference(frames).pixels
    np.testing.assert_allclose(got, (frames[-1] - frames[0]) / (c - 1), atol=1e-6)


def test_static_frames_have_zero_difference():
    clip = gen_clip(0, 4, 16, 16, 5, make_rng(0, "s"), speed=0.0)
    assert len(clip.events) == 0
    assert not frame_difference(clip.rgb_frames).pixels.any()
    assert not event_images(clip).any()


def test_generated_clip_structure():
    clip = gen_clip(1, 4, 16, 20, 6, make_rng(0, "c"))
    assert clip.rgb_frames.shape == (6, 16, 20, 3)
    assert clip.rgb_frames.min() >= 0 and clip.rgb_frames.max() <= 1
    np.testing.assert_array_equal(clip.frame_timestamps, 5000 + FRAME_INTERVAL_US * np.arange(6))
    assert np.all(np.diff(clip.events["t"].astype(np.int64)) >= 0)
    assert set(np.unique(clip.events["p"])) <= {-1, 1}
    assert len(clip.events) > 0
    assert len(align_to_frames(clip)) == 6


def test_motion_direction_shows_in_events():
    # class 0 moves toward +x: positive events sit to the right of negative ones
    clip = gen_clip(0, 4, 32, 32, 8, make_rng(0, "d"))
    ev = clip.events
    pos = ev["x"][ev["p"] > 0].mean()
    neg = ev["x"][ev["p"] < 0].mean()
    assert pos > neg


def test_generator_balanced_and_deterministic():
    a = gen_synthetic(40, 4, 16, 16, 4, make_rng(3, "g"))
    b = gen_synthetic(40, 4, 16, 16, 4, make_rng(3, "g"))
    assert np.bincount([c.label for c in a]).tolist() == [10, 10, 10, 10]
    assert all(np.array_equal(x.rgb_frames, y.rgb_frames) and np.array_equal(x.events, y.events) for x, y in zip(a, b))
    with pytest.raises(ContractError):
        gen_synthetic(4, 1, 16, 16, 4, make_rng(0))


def test_diff_image_sources():
    clip = gen_clip(2, 4, 16, 16, 4, make_rng(1, "x"))
    rgb = clip.rgb_frames
    ev = event_images(clip)
    d_rgb = diff_image(rgb, ev, "rgb")
    d_both = diff_image(rgb, ev, "both")
    np.testing.assert_allclose(d_rgb, frame_difference(rgb).pixels, atol=1e-6)
    np.testing.assert_allclose(d_both, 0.5 * (frame_difference(rgb).pixels + frame_difference(ev).pixels), atol=1e-6)
    with pytest.raises(ContractError):
        diff_image(rgb, ev, "depth")


def test_ppm_round_trip(tmp_path, rng):
    img = np.round(rng.random((5, 7, 3)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-6)
    (tmp_path / "b.ppm").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "b.ppm")
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n2 2\n255\n\x00\x00")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "c.ppm")


def test_clip_round_trip(tmp_path):
    clip = gen_clip(3, 4, 12, 12, 3, make_rng(0, "io"))
    save_clip(clip, tmp_path / "c")
    assert (tmp_path / "c" / "events.csv").read_text().splitlines()[0] == "x,y,t_us,p"
    back = load_clip(tmp_path / "c")
    assert back.label == 3
    np.testing.assert_array_equal(back.rgb_frames, clip.rgb_frames)
    np.testing.assert_array_equal(back.events, clip.events)
    np.testing.assert_array_equal(back.frame_timestamps, clip.frame_timestamps)


def test_clip_bad_header(tmp_path):
    clip = gen_clip(0, 4, 8, 8, 2, make_rng(0, "h"))
    save_clip(clip, tmp_path / "c")
    (tmp_path / "c" / "events.csv").write_text("a,b,c,d\n")
    with pytest.raises(FormatError):
        load_clip(tmp_path / "c")


def test_dataset_split(tmp_path):
    clips = gen_synthetic(20, 4, 8, 8, 2, make_rng(0, "ds"))
    write_dataset(clips, tmp_path, make_rng(0, "split"))
    rows = read_manifest(tmp_path)
    assert [r[2] for r in rows].count("train") == 16
    assert len(load_dataset(tmp_path, "test")) == 4
    assert [c.label for c in load_dataset(tmp_path)] == [c.label for c in clips]
