"""Video frontend: raw-frame container I/O and the grayscale volume pipeline."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

CLIP_MAGIC = b"MMV1"
TARGET_FPS = 5
TARGET_DEPTH = 30
RESIZE_HW = (168, 224)
CROP_HW = (148, 144)
LUMA = np.array([0.299, 0.587, 0.114])
NORM_MEAN = 0.5
NORM_STD = 0.5


@dataclass
class FrameVolume:
    values: np.ndarray  # (depth, height, width), normalised to [-1, 1]
    fps: float = TARGET_FPS
    clip_id: Optional[str] = None


def write_clip(path: Union[str, os.PathLike], frames: np.ndarray) -> None:
    """Store (N, H, W, C) uint8 frames in the MMV1 container."""
    frames = np.asarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 4:
        raise ValueError(f"expected (N, H, W, C) uint8 frames, got {frames.dtype} {frames.shape}")
    n, h, w, c = frames.shape
    header = CLIP_MAGIC + struct.pack("<HHHB", n, h, w, c)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_clip(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CLIP_MAGIC:
        raise ValueError(f"{path}: not an MMV1 clip")
    n, h, w, c = struct.unpack_from("<HHHB", buf, 4)
    body = np.frombuffer(buf, dtype=np.uint8, offset=11)
    if body.size != n * h * w * c:
        raise ValueError(f"{path}: payload holds {body.size} bytes, header promises {n * h * w * c}")
    return body.reshape(n, h, w, c)


def sample_indices(n_frames: int, native_fps: float, target_fps: float = TARGET_FPS, depth: int = TARGET_DEPTH) -> np.ndarray:
    """Nearest-timestamp source index for each output slot; past-the-end slots repeat the last frame."""
    if n_frames <= 0:
        raise ValueError("clip has no frames")
    if native_fps <= 0:
        raise ValueError(f"native fps must be positive, got {native_fps}")
    stamps = np.arange(depth) / target_fps
    idx = np.floor(stamps * native_fps + 0.5).astype(np.int64)
    return np.minimum(idx, n_frames - 1)


def sample_frames(frames: np.ndarray, native_fps: float, target_fps: float = TARGET_FPS, depth: int = TARGET_DEPTH) -> np.ndarray:
    frames = np.asarray(frames)
    return frames[sample_indices(len(frames), native_fps, target_fps, depth)]


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def _resize_at(arr: np.ndarray, size, h_axis: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    h_in, w_in = arr.shape[h_axis], arr.shape[h_axis + 1]
    if h_in == 0 or w_in == 0:
        raise ValueError("cannot resize an empty frame")
    r0, r1, rf = _axis_weights(h_in, size[0])
    c0, c1, cf = _axis_weights(w_in, size[1])
    trail = (1,) * (arr.ndim - h_axis - 2)
    rf = rf.reshape((-1, 1) + trail)
    cf = cf.reshape((-1,) + trail)
    lead = (slice(None),) * h_axis
    rows = arr[lead + (r0,)] * (1 - rf) + arr[lead + (r1,)] * rf
    return rows[lead + (slice(None), c0)] * (1 - cf) + rows[lead + (slice(None), c1)] * cf


def resize(frame: np.ndarray, size=RESIZE_HW) -> np.ndarray:
    """Bilinear, corner-aligned resize of one (H, W) or (H, W, C) frame."""
    return _resize_at(frame, size, 0)


def resize_frames(frames: np.ndarray, size=RESIZE_HW) -> np.ndarray:
    """:func:`resize` applied to every frame of an (N, H, W[, C]) stack."""
    return _resize_at(frames, size, 1)


def _crop_at(arr: np.ndarray, size, h_axis: int) -> np.ndarray:
    h, w = arr.shape[h_axis], arr.shape[h_axis + 1]
    ch, cw = size
    if ch > h or cw > w:
        raise ValueError(f"crop {tuple(size)} larger than frame {(h, w)}")
    top, left = (h - ch) // 2, (w - cw) // 2
    lead = (slice(None),) * h_axis
    return arr[lead + (slice(top, top + ch), slice(left, left + cw))]


def center_crop(frame: np.ndarray, size=CROP_HW) -> np.ndarray:
    """Centred crop of one frame; offsets are floor((in - out) / 2)."""
    return _crop_at(np.asarray(frame), size, 0)


def center_crop_frames(frames: np.ndarray, size=CROP_HW) -> np.ndarray:
    return _crop_at(np.asarray(frames), size, 1)


def grayscale(frame: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma of RGB values in [0, 1] (channel axis last)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != 3:
        raise ValueError(f"grayscale needs 3 channels, got {frame.shape[-1]}")
    return frame @ LUMA


def normalize(x: np.ndarray, mean: float = NORM_MEAN, std: float = NORM_STD) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize(x: np.ndarray, mean: float = NORM_MEAN, std: float = NORM_STD) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * std + mean


def frames_to_unit(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64) / 255.0


def sample_and_resize(
    frames_u8: np.ndarray,
    native_fps: float,
    target_fps: float = TARGET_FPS,
    depth: int = TARGET_DEPTH,
    size=RESIZE_HW,
) -> np.ndarray:
    """Temporal sampling then spatial resize: (30, 168, 224, 3) floats in [0, 1] by default."""
    return resize_frames(frames_to_unit(sample_frames(frames_u8, native_fps, target_fps, depth)), size)


def finish_volume(rgb: np.ndarray, clip_id: Optional[str] = None, crop=CROP_HW, fps: float = TARGET_FPS) -> FrameVolume:
    """Crop, grayscale and normalise resized RGB frames into the model volume."""
    vol = normalize(grayscale(center_crop_frames(rgb, crop)))
    return FrameVolume(vol.astype(np.float32), fps, clip_id)


def preprocess_video(
    frames_u8: np.ndarray,
    native_fps: float,
    clip_id: Optional[str] = None,
    target_fps: float = TARGET_FPS,
    depth: int = TARGET_DEPTH,
    size=RESIZE_HW,
    crop=CROP_HW,
) -> FrameVolume:
    """Deterministic eval pipeline producing a (30, 148, 144) volume by default."""
    rgb = sample_and_resize(frames_u8, native_fps, target_fps, depth, size)
    return finish_volume(rgb, clip_id, crop, target_fps)
