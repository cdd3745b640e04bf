"""Preprocessed tensor cache and the clip dataset that reads it.

Each clip becomes ``<clip_id>.audio.mmt`` (log-mel) and ``<clip_id>.video.mmt``
(grayscale volume) plus a ``<clip_id>.sha256`` stamp. The stamp hashes the
media bytes, the clip window and the preprocessing settings, so a rerun
skips every clip whose inputs are unchanged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import audio, video
from .augment import AugmentPolicy, augment_audio, visual_augment
from .data import TASKS, ClipRecord, read_manifest, resolve_media
from .tensor import Rng, read_tensor, write_tensor

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
PIPELINE_VERSION = "mmcla-preprocess-1"


class PreprocessConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sample_rate: int = Field(audio.TARGET_RATE, gt=0)
    clip_seconds: float = Field(audio.CLIP_SECONDS, gt=0)
    n_fft: int = Field(audio.N_FFT, gt=0)
    hop: int = Field(audio.HOP, gt=0)
    n_mels: int = Field(audio.N_MELS, gt=0)
    video_fps: float = Field(video.TARGET_FPS, gt=0)
    video_depth: int = Field(video.TARGET_DEPTH, gt=0)
    resize_hw: Tuple[int, int] = video.RESIZE_HW
    crop_hw: Tuple[int, int] = video.CROP_HW

    @property
    def audio_shape(self) -> Tuple[int, int]:
        return (self.n_mels, audio.mel_frames(self.sample_rate, self.clip_seconds, self.hop))

    @property
    def video_shape(self) -> Tuple[int, int, int]:
        return (self.video_depth,) + tuple(self.crop_hw)


def cache_paths(cache_dir: PathLike, clip_id: str) -> Tuple[Path, Path, Path]:
    d = Path(cache_dir)
    return d / f"{clip_id}.audio.mmt", d / f"{clip_id}.video.mmt", d / f"{clip_id}.sha256"


# ---------------------------------------------------------------------------
# media loading
# ---------------------------------------------------------------------------


def load_clip_audio(record: ClipRecord, manifest_path: PathLike) -> audio.Waveform:
    wave = audio.read_wav(resolve_media(manifest_path, record.audio_path))
    sr = wave.sample_rate
    lo = int(round(record.start_seconds * sr))
    hi = int(round((record.start_seconds + record.duration_seconds) * sr))
    if lo >= len(wave):
        raise ValueError(f"{record.clip_id}: clip starts past the end of its audio")
    return audio.Waveform(wave.samples[lo:hi], sr)


def load_clip_frames(record: ClipRecord, manifest_path: PathLike) -> Tuple[np.ndarray, float]:
    """Raw uint8 frames of the clip window and their native frame rate."""
    frames = video.read_clip(resolve_media(manifest_path, record.video_path))
    fps = len(frames) / record.media_seconds
    first = int(round(record.start_seconds * fps))
    if first >= len(frames):
        raise ValueError(f"{record.clip_id}: clip starts past the end of its video")
    return frames[first:], fps


def clip_features(
    record: ClipRecord, manifest_path: PathLike, cfg: PreprocessConfig
) -> Tuple[np.ndarray, np.ndarray]:
    mel = audio.preprocess_audio(
        load_clip_audio(record, manifest_path), cfg.sample_rate, cfg.clip_seconds, cfg.n_fft, cfg.hop, cfg.n_mels
    )
    frames, fps = load_clip_frames(record, manifest_path)
    vol = video.preprocess_video(
        frames, fps, record.clip_id, cfg.video_fps, cfg.video_depth, cfg.resize_hw, cfg.crop_hw
    )
    return mel.values, vol.values


def content_hash(record: ClipRecord, manifest_path: PathLike, cfg: PreprocessConfig) -> str:
    h = hashlib.sha256()
    h.update(PIPELINE_VERSION.encode())
    h.update(cfg.model_dump_json().encode())
    window = {"start": record.start_seconds, "duration": record.duration_seconds, "source": record.source_seconds}
    h.update(json.dumps(window, sort_keys=True).encode())
    for rel in (record.audio_path, record.video_path):
        h.update(resolve_media(manifest_path, rel).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# cache building
# ---------------------------------------------------------------------------


@dataclass
class PreprocessSummary:
    processed: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.processed) + len(self.skipped) + len(self.failed)


def preprocess_clip(record: ClipRecord, manifest_path: PathLike, cache_dir: PathLike, cfg: PreprocessConfig) -> str:
    """Cache one clip; returns ``"processed"`` or ``"skipped"``."""
    a_path, v_path, stamp = cache_paths(cache_dir, record.clip_id)
    digest = content_hash(record, manifest_path, cfg)
    if stamp.exists() and a_path.exists() and v_path.exists() and stamp.read_text().strip() == digest:
        return "skipped"
    mel, vol = clip_features(record, manifest_path, cfg)
    if mel.shape != cfg.audio_shape or vol.shape != cfg.video_shape:
        raise ValueError(f"{record.clip_id}: produced {mel.shape} / {vol.shape}")
    write_tensor(a_path, mel)
    write_tensor(v_path, vol)
    # written last so an interrupted run redoes this clip
    stamp.write_text(digest + "\n")
    return "processed"


def _job(args):
    record, manifest_path, cache_dir, cfg = args
    try:
        return record.clip_id, preprocess_clip(record, manifest_path, cache_dir, cfg), None
    except Exception as exc:  # reported per clip, never fatal for the batch
        return record.clip_id, "failed", f"{type(exc).__name__}: {exc}"


def preprocess_manifest(
    manifest_path: PathLike,
    cache_dir: PathLike,
    cfg: Optional[PreprocessConfig] = None,
    workers: int = 1,
    records: Optional[Sequence[ClipRecord]] = None,
) -> PreprocessSummary:
    cfg = cfg or PreprocessConfig()
    records = read_manifest(manifest_path) if records is None else records
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(r, str(manifest_path), str(cache_dir), cfg) for r in records]
    summary = PreprocessSummary()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    for clip_id, status, error in results:
        if status == "failed":
            log.error("preprocess %s failed: %s", clip_id, error)
            summary.failed.append((clip_id, error))
        else:
            getattr(summary, status).append(clip_id)
    return summary


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


class ClipDataset:
    """Cached clips with labels; optionally augments on the fly in training batches.

    Audio augmentation works on the cached log-mel. Visual augmentation
    needs RGB frames, so it re-decodes the clip's media and reruns the
    video pipeline around the augmentation.
    """

    def __init__(
        self,
        records: Sequence[ClipRecord],
        cache_dir: PathLike,
        manifest_path: Optional[PathLike] = None,
        preprocess: Optional[PreprocessConfig] = None,
        augment: Optional[AugmentPolicy] = None,
        use_audio: bool = True,
        use_video: bool = True,
    ):
        self.records = list(records)
        self.cache_dir = Path(cache_dir)
        self.manifest_path = manifest_path
        self.preprocess = preprocess or PreprocessConfig()
        self.augment = augment if augment is not None and augment.enabled else None
        self.use_audio = use_audio
        self.use_video = use_video
        self.labels = np.array([r.labels.as_tuple() for r in self.records], dtype=np.int64).reshape(-1, len(TASKS))
        for r in self.records:
            a, v, _ = cache_paths(self.cache_dir, r.clip_id)
            if (use_audio and not a.exists()) or (use_video and not v.exists()):
                raise FileNotFoundError(f"clip {r.clip_id} is missing from cache {self.cache_dir}; run preprocess first")

    def __len__(self) -> int:
        return len(self.records)

    def _audio(self, i: int, rng: Optional[Rng]) -> np.ndarray:
        mel = read_tensor(cache_paths(self.cache_dir, self.records[i].clip_id)[0])
        if self.augment is None or rng is None:
            return mel
        spec = audio.MelSpec(mel, self.preprocess.n_fft, self.preprocess.hop, self.preprocess.n_mels, self.preprocess.sample_rate)
        return augment_audio(spec, self.augment.audio, rng).values

    def _video(self, i: int, rng: Optional[Rng]) -> np.ndarray:
        rec = self.records[i]
        if self.augment is None or rng is None:
            return read_tensor(cache_paths(self.cache_dir, rec.clip_id)[1])
        if self.manifest_path is None:
            raise ValueError("visual augmentation needs the manifest path to locate media")
        cfg = self.preprocess
        frames, fps = load_clip_frames(rec, self.manifest_path)
        rgb = video.sample_and_resize(frames, fps, cfg.video_fps, cfg.video_depth, cfg.resize_hw)
        rgb = visual_augment(rgb, self.augment.visual, rng)
        return video.finish_volume(rgb, rec.clip_id, cfg.crop_hw, cfg.video_fps).values

    def batch(self, indices: Sequence[int], rng: Optional[Rng] = None):
        """Stacked model inputs for ``indices``: (mel, vol, labels).

        ``rng`` switches on augmentation (when a policy is active); each clip
        draws from its own child stream keyed by clip id.
        """
        mels, vols = [], []
        for i in indices:
            crng = None if rng is None else rng.split(self.records[i].clip_id)
            if self.use_audio:
                mels.append(self._audio(i, None if crng is None else crng.split("audio")))
            if self.use_video:
                vols.append(self._video(i, None if crng is None else crng.split("video")))
        mel = np.stack(mels)[:, None] if mels else None
        vol = np.stack(vols)[:, None] if vols else None
        return mel, vol, self.labels[list(indices)]
