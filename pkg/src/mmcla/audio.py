"""Audio frontend: WAV input, band-limited resampling and log-mel features."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.io import wavfile

TARGET_RATE = 16_000
CLIP_SECONDS = 6
N_FFT = 1024
HOP = 160
N_MELS = 80
DB_FLOOR_POWER = 1e-10
ZERO_CROSSINGS = 64


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.isfinite(self.samples).all():
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpec:
    values: np.ndarray  # (n_mels, frames), dB
    n_fft: int = N_FFT
    hop: int = HOP
    n_mels: int = N_MELS
    sample_rate: int = TARGET_RATE
    floor_db: float = field(default=10.0 * math.log10(DB_FLOOR_POWER))

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def read_wav(path: Union[str, os.PathLike]) -> Waveform:
    """Load a single-channel PCM16 or float32 WAV file as samples in [-1, 1]."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected a single channel, found {data.shape[1]}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path: Union[str, os.PathLike], wave: Waveform, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    wavfile.write(path, wave.sample_rate, data)


def resample(wave: Waveform, target_rate: int = TARGET_RATE, zero_crossings: int = ZERO_CROSSINGS) -> Waveform:
    """Band-limited interpolation with a Hann-windowed sinc kernel.

    The kernel cutoff sits at the lower of the two Nyquist rates and spans
    ``zero_crossings`` zero crossings on each side of the output instant.
    Integer rates make the input/output ratio rational (up/down after gcd
    reduction), so output sample n only ever needs kernel phase n mod up.
    """
    if len(wave) == 0:
        raise ValueError("cannot resample an empty waveform")
    src = wave.sample_rate
    if src == target_rate:
        return Waveform(wave.samples.copy(), target_rate)
    g = math.gcd(src, target_rate)
    down, up = src // g, target_rate // g  # input advances `down` per `up` outputs
    x = wave.samples
    n_out = int(round(len(x) * target_rate / src))
    cutoff = min(1.0, target_rate / src)
    half_width = zero_crossings / cutoff  # in input samples
    taps = int(math.ceil(half_width))
    offsets = np.arange(-taps + 1, taps + 1)
    xp = np.concatenate([np.zeros(taps), x, np.zeros(taps + down + 1)])
    out = np.empty(n_out)
    for phase in range(min(up, n_out)):
        frac = (phase * down % up) / up
        dist = frac - offsets
        kernel = cutoff * np.sinc(cutoff * dist)
        kernel *= np.where(np.abs(dist) < half_width, 0.5 + 0.5 * np.cos(np.pi * dist / half_width), 0.0)
        n = np.arange(phase, n_out, up)
        base = (n * down) // up
        idx = base[:, None] + (offsets + taps)[None, :]
        out[n] = xp[idx] @ kernel
    return Waveform(out, target_rate)


def fix_length(wave: Waveform, target_len: int = TARGET_RATE * CLIP_SECONDS) -> Waveform:
    """Zero-pad at the end or keep the head so exactly ``target_len`` samples remain."""
    if target_len <= 0:
        raise ValueError("target length must be positive")
    x = wave.samples
    if x.size >= target_len:
        return Waveform(x[:target_len].copy(), wave.sample_rate)
    return Waveform(np.concatenate([x, np.zeros(target_len - x.size)]), wave.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_fft: int = N_FFT,
    sample_rate: int = TARGET_RATE,
    n_mels: int = N_MELS,
    fmin: float = 0.0,
    fmax: float | None = None,
) -> np.ndarray:
    """Triangular HTK-scale filters, peak 1, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centred STFT power, shape (n_fft // 2 + 1, frames), reflect padding n_fft / 2."""
    x = np.asarray(samples, dtype=np.float64)
    pad = n_fft // 2
    if x.size <= pad:
        x = np.pad(x, (pad, pad), mode="constant")
    else:
        x = np.pad(x, (pad, pad), mode="reflect")
    frames = 1 + (x.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(frames)[:, None]
    spec = np.fft.rfft(x[idx] * hann_window(n_fft)[None, :], axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_spectrogram(
    wave: Waveform,
    n_fft: int = N_FFT,
    hop: int = HOP,
    n_mels: int = N_MELS,
    sample_rate: int = TARGET_RATE,
) -> MelSpec:
    """Log-mel features in dB with a 1e-10 power floor.

    For a 6 s clip at 16 kHz this yields (80, 601).
    """
    if wave.sample_rate != sample_rate:
        raise ValueError(
            f"mel_spectrogram expects {sample_rate} Hz audio, got {wave.sample_rate} Hz; resample first"
        )
    power = power_spectrogram(wave.samples, n_fft, hop)
    mel = mel_filterbank(n_fft, sample_rate, n_mels) @ power
    db = 10.0 * np.log10(np.maximum(mel, DB_FLOOR_POWER))
    return MelSpec(db.astype(np.float32), n_fft=n_fft, hop=hop, n_mels=n_mels, sample_rate=sample_rate)


def mel_frames(sample_rate: int = TARGET_RATE, clip_seconds: float = CLIP_SECONDS, hop: int = HOP) -> int:
    """Frame count of a centred STFT over a fixed-length clip."""
    return 1 + int(round(sample_rate * clip_seconds)) // hop


def preprocess_audio(
    wave: Waveform,
    sample_rate: int = TARGET_RATE,
    clip_seconds: float = CLIP_SECONDS,
    n_fft: int = N_FFT,
    hop: int = HOP,
    n_mels: int = N_MELS,
) -> MelSpec:
    """Full eval pipeline: resample, fix to the clip length, log-mel."""
    fixed = fix_length(resample(wave, sample_rate), int(round(sample_rate * clip_seconds)))
    return mel_spectrogram(fixed, n_fft, hop, n_mels, sample_rate)
