"""Train-time audio and visual augmentations.

Every transform is a pure function of its input, its parameters and an
:class:`~mmcla.tensor.Rng`. Visual transforms draw once per clip and apply
the same crop, flip, jitter and cutout to every frame.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .audio import MelSpec, Waveform
from .tensor import Rng
from .video import LUMA, resize_frames


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class AudioPolicy(_Strict):
    volume_jitter: float = Field(0.2, ge=0.0, lt=1.0)
    time_mask_max: int = Field(50, ge=0)
    time_mask_num: int = Field(2, ge=0)
    freq_mask_max: int = Field(50, ge=0)
    freq_mask_num: int = Field(2, ge=0)
    crop_range: Tuple[float, float] = (0.6, 1.5)
    crop_scale: Tuple[float, float] = (1.0, 1.5)

    @model_validator(mode="after")
    def _ordered(self):
        for name in ("crop_range", "crop_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        return self


class VisualPolicy(_Strict):
    min_area: float = Field(0.2, gt=0.0, le=1.0)
    hflip_p: float = Field(0.5, ge=0.0, le=1.0)
    brightness: float = Field(1.0, ge=0.0)
    contrast: float = Field(1.0, ge=0.0)
    saturation: float = Field(1.0, ge=0.0)
    hue: float = Field(0.5, ge=0.0, le=0.5)
    grayscale_p: float = Field(0.2, ge=0.0, le=1.0)
    cutout_max: int = Field(50, ge=0)
    cutout_num: int = Field(1, ge=0)


class AugmentPolicy(_Strict):
    enabled: bool = True
    audio: AudioPolicy = AudioPolicy()
    visual: VisualPolicy = VisualPolicy()

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(
            audio=AudioPolicy(
                volume_jitter=0.0,
                time_mask_max=0,
                freq_mask_max=0,
                crop_range=(1.0, 1.0),
                crop_scale=(1.0, 1.0),
            ),
            visual=VisualPolicy(
                min_area=1.0,
                hflip_p=0.0,
                brightness=0.0,
                contrast=0.0,
                saturation=0.0,
                hue=0.0,
                grayscale_p=0.0,
                cutout_max=0,
            ),
        )


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------


def draw_gain(rng: Rng, jitter: float) -> float:
    return float(rng.uniform(1.0 - jitter, 1.0 + jitter))


def volume_jitter(x, rng: Rng, jitter: float = 0.2):
    """Scale amplitude by g ~ U[1 - jitter, 1 + jitter].

    A :class:`Waveform` is multiplied by g; a dB :class:`MelSpec` (power
    domain) is shifted by 20*log10(g) and held at its floor.
    """
    g = draw_gain(rng, jitter)
    if isinstance(x, Waveform):
        return Waveform(x.samples * g, x.sample_rate)
    if isinstance(x, MelSpec):
        if g == 1.0:
            return MelSpec(x.values.copy(), x.n_fft, x.hop, x.n_mels, x.sample_rate, x.floor_db)
        shifted = np.maximum(x.values + np.float32(20.0 * math.log10(g)), np.float32(x.floor_db))
        return MelSpec(shifted.astype(np.float32), x.n_fft, x.hop, x.n_mels, x.sample_rate, x.floor_db)
    return np.asarray(x) * g


def mask_bands(extent: int, max_size: int, num: int, rng: Rng):
    """Draw ``num`` (start, stop) bands with width ~ U{0..max_size}, clipped to the axis."""
    bands = []
    for _ in range(num):
        width = int(rng.integers(0, max_size + 1))
        start = int(rng.integers(0, extent))
        bands.append((start, min(extent, start + width)))
    return bands


def time_freq_mask(spec: MelSpec, axis: str, rng: Rng, max_size: int = 50, num: int = 2) -> MelSpec:
    """Set ``num`` random contiguous time or frequency bands to the floor value."""
    if axis not in ("time", "freq"):
        raise ValueError(f"axis must be 'time' or 'freq', got {axis!r}")
    values = spec.values.copy()
    ax = 1 if axis == "time" else 0
    for start, stop in mask_bands(values.shape[ax], max_size, num, rng):
        if ax == 1:
            values[:, start:stop] = spec.floor_db
        else:
            values[start:stop, :] = spec.floor_db
    return MelSpec(values, spec.n_fft, spec.hop, spec.n_mels, spec.sample_rate, spec.floor_db)


def _stretch(values: np.ndarray, length: int, axis: int) -> np.ndarray:
    """Corner-aligned linear resampling of one axis to ``length`` points."""
    n = values.shape[axis]
    if n == length:
        return values.copy()
    pos = np.arange(length) * ((n - 1) / (length - 1)) if length > 1 else np.zeros(1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    shape = [1] * values.ndim
    shape[axis] = length
    frac = frac.reshape(shape)
    return np.take(values, lo, axis=axis) * (1 - frac) + np.take(values, hi, axis=axis) * frac


def crop_window(frames: int, ratio: float, offset: Optional[int], rng: Rng) -> Tuple[np.ndarray, int]:
    """Source column indices (possibly reflected) of a temporal window of round(frames * ratio)."""
    length = max(1, int(round(frames * ratio)))
    if length <= frames:
        off = int(rng.integers(0, frames - length + 1)) if offset is None else int(offset)
        return np.arange(off, off + length), off
    # longer than the clip: reflect around both ends, centred
    extra = length - frames
    left = extra // 2
    idx = np.arange(-left, frames + extra - left)
    period = 2 * (frames - 1) if frames > 1 else 1
    idx = np.abs(idx) % period
    idx = np.where(idx >= frames, period - idx, idx)
    return idx, -left


def random_crop_audio(
    spec: MelSpec,
    rng: Rng,
    crop_range: Tuple[float, float] = (0.6, 1.5),
    crop_scale: Tuple[float, float] = (1.0, 1.5),
    ratio: Optional[float] = None,
    offset: Optional[int] = None,
    scale: Optional[float] = None,
) -> MelSpec:
    """Random temporal window of length factor r ~ U[crop_range], stretched back to the frame count.

    ``crop_scale`` zooms the frequency axis: a band of n_mels / s rows
    (s ~ U[crop_scale]) at a random offset is stretched back to n_mels.
    """
    n_mels, frames = spec.values.shape
    r = float(rng.uniform(*crop_range)) if ratio is None else float(ratio)
    cols, _ = crop_window(frames, r, offset, rng.split("time"))
    out = _stretch(spec.values[:, cols], frames, axis=1)
    s = float(rng.uniform(*crop_scale)) if scale is None else float(scale)
    rows = max(1, int(round(n_mels / s)))
    if rows < n_mels:
        top = int(rng.split("freq").integers(0, n_mels - rows + 1))
        out = _stretch(out[top : top + rows], n_mels, axis=0)
    return MelSpec(out.astype(np.float32), spec.n_fft, spec.hop, spec.n_mels, spec.sample_rate, spec.floor_db)


def augment_audio(spec: MelSpec, policy: AudioPolicy, rng: Rng) -> MelSpec:
    spec = volume_jitter(spec, rng.split("volume"), policy.volume_jitter)
    spec = time_freq_mask(spec, "time", rng.split("time_mask"), policy.time_mask_max, policy.time_mask_num)
    spec = time_freq_mask(spec, "freq", rng.split("freq_mask"), policy.freq_mask_max, policy.freq_mask_num)
    return random_crop_audio(spec, rng.split("crop"), policy.crop_range, policy.crop_scale)


# ---------------------------------------------------------------------------
# visual
# ---------------------------------------------------------------------------


def hflip(frames: np.ndarray) -> np.ndarray:
    return frames[:, :, ::-1]


def multiscale_crop(frames: np.ndarray, rng: Rng, min_area: float = 0.2) -> np.ndarray:
    """Crop area fraction ~ U[min_area, 1], aspect ~ U[3/4, 4/3], resized back to H x W."""
    if min_area >= 1.0:
        return frames
    n, H, W = frames.shape[:3]
    area = rng.uniform(min_area, 1.0) * H * W
    aspect = rng.uniform(3 / 4, 4 / 3)
    h = int(min(H, max(1, round(math.sqrt(area / aspect)))))
    w = int(min(W, max(1, round(math.sqrt(area * aspect)))))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return resize_frames(frames[:, top : top + h, left : left + w], (H, W))


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        maxc == r,
        ((g - b) / safe) % 6.0,
        np.where(maxc == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    return np.stack(
        [np.choose(i, choices_r), np.choose(i, choices_g), np.choose(i, choices_b)], axis=-1
    )


def _factor(rng: Rng, strength: float) -> float:
    return float(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength))


def color_jitter(frames: np.ndarray, rng: Rng, brightness=1.0, contrast=1.0, saturation=1.0, hue=0.5) -> np.ndarray:
    """Brightness, contrast, saturation factors in [max(0, 1-x), 1+x]; hue shift in [-hue, hue] turns."""
    out = frames
    b = _factor(rng.split("b"), brightness)
    c = _factor(rng.split("c"), contrast)
    s = _factor(rng.split("s"), saturation)
    h = float(rng.split("h").uniform(-hue, hue))
    if b != 1.0:
        out = np.clip(out * b, 0.0, 1.0)
    if c != 1.0:
        mean = (out @ LUMA).mean(axis=(1, 2), keepdims=True)[..., None]
        out = np.clip((out - mean) * c + mean, 0.0, 1.0)
    if s != 1.0:
        gray = (out @ LUMA)[..., None]
        out = np.clip((out - gray) * s + gray, 0.0, 1.0)
    if h != 0.0:
        hsv = _rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + h) % 1.0
        out = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def cutout(frames: np.ndarray, rng: Rng, max_size: int = 50, num: int = 1) -> np.ndarray:
    """Fill ``num`` squares of side ~ U{0..max_size} with the clip mean."""
    out = frames
    n, H, W = frames.shape[:3]
    fill = frames.mean()
    for _ in range(num):
        side = int(rng.integers(0, max_size + 1))
        if side == 0:
            continue
        cy, cx = int(rng.integers(0, H)), int(rng.integers(0, W))
        y0, y1 = max(0, cy - side // 2), min(H, cy - side // 2 + side)
        x0, x1 = max(0, cx - side // 2), min(W, cx - side // 2 + side)
        if out is frames:
            out = frames.copy()
        out[:, y0:y1, x0:x1] = fill
    return out


def visual_augment(frames: np.ndarray, policy: VisualPolicy, rng: Rng) -> np.ndarray:
    """Apply crop, flip, colour jitter, random grayscale and cutout to an (N, H, W, 3) clip."""
    out = multiscale_crop(frames, rng.split("crop"), policy.min_area)
    if rng.split("flip").bernoulli(policy.hflip_p):
        out = hflip(out)
    out = color_jitter(
        out, rng.split("jitter"), policy.brightness, policy.contrast, policy.saturation, policy.hue
    )
    if rng.split("gray").bernoulli(policy.grayscale_p):
        out = np.repeat((out @ LUMA)[..., None], 3, axis=-1)
    out = cutout(out, rng.split("cutout"), policy.cutout_max, policy.cutout_num)
    return out
