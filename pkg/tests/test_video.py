import numpy as np
import pytest
from scipy import ndimage

from mmcla import video


def test_sample_indices_30fps():
    idx = video.sample_indices(180, 30.0)
    np.testing.assert_array_equal(idx, np.arange(0, 180, 6))


def test_sample_indices_identity_at_5fps():
    np.testing.assert_array_equal(video.sample_indices(30, 5.0), np.arange(30))


def test_short_clip_repeats_last_frame():
    idx = video.sample_indices(20, 5.0)
    assert len(idx) == 30
    np.testing.assert_array_equal(idx[:20], np.arange(20))
    assert (idx[20:] == 19).all()


def test_sample_indices_match_nearest_timestamp():
    # independent oracle: nearest native frame to each 0.2 s instant, ties rounding up
    native = 7.5
    idx = video.sample_indices(45, native)
    stamps = np.arange(30) * 0.2
    frame_times = np.arange(45) / native
    for k, t in enumerate(stamps):
        d = np.abs(frame_times - t)
        best = np.flatnonzero(d <= d.min() + 1e-12)
        assert idx[k] == best.max()


def test_sample_frames_errors():
    with pytest.raises(ValueError):
        video.sample_indices(0, 30.0)
    with pytest.raises(ValueError):
        video.sample_indices(10, 0.0)


def test_resize_identity(np_rng):
    frame = np_rng.uniform(size=(168, 224, 3))
    np.testing.assert_allclose(video.resize(frame), frame, atol=1e-12)


def test_resize_constant_stays_constant():
    frame = np.full((336, 448, 3), 0.37)
    out = video.resize(frame)
    assert out.shape == (168, 224, 3)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_resize_checkerboard_corners():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = video.resize(board, (8, 8))
    assert out[0, 0] == 0.0 and out[0, -1] == 1.0 and out[-1, 0] == 1.0 and out[-1, -1] == 0.0
    # centre of a corner-aligned 2x2 upscale is the mean of all four
    np.testing.assert_allclose(video.resize(board, (3, 3))[1, 1], 0.5)


@pytest.mark.parametrize("shape,size", [((60, 80), (168, 224)), ((200, 150), (17, 31)), ((5, 9), (5, 4))])
def test_resize_matches_map_coordinates(np_rng, shape, size):
    frame = np_rng.uniform(size=shape)
    rows = np.linspace(0, shape[0] - 1, size[0])
    cols = np.linspace(0, shape[1] - 1, size[1])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    expected = ndimage.map_coordinates(frame, [rr, cc], order=1)
    np.testing.assert_allclose(video.resize(frame, size), expected, atol=1e-12)


def test_resize_frames_equals_per_frame(np_rng):
    frames = np_rng.uniform(size=(4, 30, 40, 3))
    stacked = video.resize_frames(frames, (20, 50))
    for i in range(4):
        np.testing.assert_array_equal(stacked[i], video.resize(frames[i], (20, 50)))


def test_center_crop_offsets():
    yy, xx = np.mgrid[0:168, 0:224]
    frame = np.stack([yy, xx], axis=-1)
    out = video.center_crop(frame)
    assert out.shape == (148, 144, 2)
    assert tuple(out[0, 0]) == (10, 40)
    np.testing.assert_array_equal(video.center_crop(frame, (168, 224)), frame)
    with pytest.raises(ValueError):
        video.center_crop(frame, (169, 10))


def test_grayscale_examples():
    assert video.grayscale(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.299, abs=1e-15)
    assert video.grayscale(np.array([0.5, 0.25, 0.75])) == pytest.approx(0.38175, abs=1e-15)
    assert video.grayscale(np.array([0.6, 0.6, 0.6])) == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        video.grayscale(np.zeros((2, 2, 4)))


def test_grayscale_range(np_rng):
    g = video.grayscale(np_rng.uniform(size=(50, 50, 3)))
    assert g.min() >= 0.0 and g.max() <= 1.0


def test_normalize_examples_and_roundtrip(np_rng):
    np.testing.assert_array_equal(video.normalize(np.array([0.5, 1.0, 0.0])), [0.0, 1.0, -1.0])
    x = np_rng.uniform(size=10_000)
    np.testing.assert_allclose(video.denormalize(video.normalize(x)), x, atol=1e-7)


def test_normalized_uniform_mean_near_zero(np_rng):
    vol = video.normalize(np_rng.uniform(size=(10, 100, 1000)))
    assert abs(vol.mean()) < 0.01


def test_clip_container_roundtrip(tmp_path, np_rng):
    frames = np_rng.integers(0, 256, size=(7, 9, 11, 3), dtype=np.uint8)
    video.write_clip(tmp_path / "c.mmv", frames)
    raw = (tmp_path / "c.mmv").read_bytes()
    assert raw[:4] == b"MMV1"
    assert int.from_bytes(raw[4:6], "little") == 7
    np.testing.assert_array_equal(video.read_clip(tmp_path / "c.mmv"), frames)


def test_clip_container_rejects_truncation(tmp_path):
    video.write_clip(tmp_path / "c.mmv", np.zeros((2, 3, 4, 3), dtype=np.uint8))
    data = (tmp_path / "c.mmv").read_bytes()
    (tmp_path / "t.mmv").write_bytes(data[:-1])
    with pytest.raises(ValueError):
        video.read_clip(tmp_path / "t.mmv")
    (tmp_path / "b.mmv").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        video.read_clip(tmp_path / "b.mmv")


@pytest.mark.parametrize("n,fps,hw", [(180, 30.0, (60, 80)), (60, 10.0, (200, 300)), (24, 4.0, (168, 224))])
def test_pipeline_shape(np_rng, n, fps, hw):
    frames = np_rng.integers(0, 256, size=(n,) + hw + (3,), dtype=np.uint8)
    vol = video.preprocess_video(frames, fps, "x")
    assert vol.values.shape == (30, 148, 144)
    assert vol.values.dtype == np.float32
    assert vol.values.min() >= -1.0 and vol.values.max() <= 1.0
    assert vol.clip_id == "x" and vol.fps == 5
