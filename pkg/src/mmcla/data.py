"""Clip manifests, leakage-safe splits, label binarisation and the synthetic dataset."""

from __future__ import annotations

import json
import logging
import math
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .audio import Waveform, write_wav
from .tensor import Rng
from .video import write_clip

log = logging.getLogger(__name__)

TASKS = ("mental_demand", "effort", "temporal_demand")
SPLITS = ("train", "val", "test")
SCORE_MAX = 20.0
PathLike = Union[str, os.PathLike]


class TaskScores(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mental_demand: float = Field(ge=0.0, le=SCORE_MAX)
    effort: float = Field(ge=0.0, le=SCORE_MAX)
    temporal_demand: float = Field(ge=0.0, le=SCORE_MAX)


class TaskLabels(BaseModel):
    model_config = ConfigDict(extra="forbid")
    mental_demand: int = Field(ge=0, le=1)
    effort: int = Field(ge=0, le=1)
    temporal_demand: int = Field(ge=0, le=1)

    def as_tuple(self) -> Tuple[int, int, int]:
        return tuple(getattr(self, t) for t in TASKS)


class ClipRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    clip_id: str
    participant_id: str
    task_id: str
    audio_path: str
    video_path: str
    scores: TaskScores
    labels: TaskLabels
    duration_seconds: float = Field(gt=0.0)
    start_seconds: float = Field(0.0, ge=0.0)
    # length of the underlying media when the clip is a window into a longer file
    source_seconds: Optional[float] = Field(None, gt=0.0)

    @property
    def media_seconds(self) -> float:
        return self.source_seconds if self.source_seconds is not None else self.start_seconds + self.duration_seconds

    @field_validator("clip_id")
    @classmethod
    def _safe_id(cls, v: str) -> str:
        if not v or "/" in v or "\\" in v:
            raise ValueError(f"clip_id must be a non-empty file-name-safe string, got {v!r}")
        return v


class SplitSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: List[str]
    val: List[str]
    test: List[str]
    counts: Dict[str, int]
    fractions: Tuple[float, float, float]
    seed: int

    def split_of(self, participant_id: str) -> Optional[str]:
        for name in SPLITS:
            if participant_id in getattr(self, name):
                return name
        return None

    def select(self, records: Sequence[ClipRecord], split: str) -> List[ClipRecord]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        members = set(getattr(self, split))
        return [r for r in records if r.participant_id in members]


# ---------------------------------------------------------------------------
# manifest and split persistence
# ---------------------------------------------------------------------------


def manifest_to_json(records: Sequence[ClipRecord]) -> str:
    return json.dumps([r.model_dump() for r in records], indent=2) + "\n"


def write_manifest(path: PathLike, records: Sequence[ClipRecord]) -> None:
    Path(path).write_text(manifest_to_json(records), encoding="utf-8")


def read_manifest(path: PathLike) -> List[ClipRecord]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError(f"{path}: manifest must be a JSON array")
    return [ClipRecord.model_validate(item) for item in raw]


def write_split(path: PathLike, split: SplitSpec) -> None:
    Path(path).write_text(split.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_split(path: PathLike) -> SplitSpec:
    return SplitSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))


def resolve_media(manifest_path: PathLike, relative: str) -> Path:
    p = Path(relative)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# ---------------------------------------------------------------------------
# labels and splits
# ---------------------------------------------------------------------------


def binarize_labels(score: float, threshold: float = 10.0) -> int:
    """1 iff the NASA-TLX score (0-20 scale) reaches ``threshold``."""
    if not 0.0 <= score <= SCORE_MAX:
        raise ValueError(f"score {score} outside [0, {SCORE_MAX:g}]")
    return int(score >= threshold)


def _allocate(n: int, fractions: Sequence[float]) -> List[int]:
    """Largest-remainder apportionment; every split with a nonzero fraction gets >= 1."""
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            counts[i] = 1
    while sum(counts) > n:
        spare = [k for k in range(len(counts)) if counts[k] > 1]
        i = max(spare, key=lambda k: (counts[k] - raw[k], counts[k]))
        counts[i] -= 1
    order = sorted(range(len(raw)), key=lambda k: -(raw[k] - math.floor(raw[k])))
    k = 0
    while sum(counts) < n:
        i = order[k % len(order)]
        if fractions[i] > 0:
            counts[i] += 1
        k += 1
    return counts


def split_by_participant(
    records: Sequence[ClipRecord],
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> SplitSpec:
    """Shuffle participants with ``seed`` and partition them by ``fractions``.

    A participant's clips always land in exactly one split.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    participants = sorted({r.participant_id for r in records})
    needed = sum(1 for f in fractions if f > 0)
    if len(participants) < needed:
        raise ValueError(f"{len(participants)} participant(s) cannot fill {needed} nonempty splits")
    order = [participants[i] for i in Rng(seed).split("split").permutation(len(participants))]
    sizes = _allocate(len(participants), fractions)
    groups, start = [], 0
    for size in sizes:
        groups.append(sorted(order[start : start + size]))
        start += size
    counts = {}
    for name, group in zip(SPLITS, groups):
        members = set(group)
        counts[name] = sum(1 for r in records if r.participant_id in members)
    return SplitSpec(train=groups[0], val=groups[1], test=groups[2], counts=counts, fractions=fractions, seed=seed)


def sample_clips(
    sources: Iterable[ClipRecord],
    clips_per_participant_task: int = 25,
    clip_seconds: float = 6.0,
    seed: int = 0,
    grid_seconds: float = 1.0,
) -> List[ClipRecord]:
    """Cut up to ``clips_per_participant_task`` non-repeating clips from each (participant, task) source.

    Start offsets lie on a ``grid_seconds`` lattice so repeats collapse; a
    source shorter than one clip yields a single clip at offset 0 and is
    padded downstream.
    """
    rng = Rng(seed).split("sample_clips")
    groups: Dict[Tuple[str, str], List[ClipRecord]] = {}
    for src in sources:
        groups.setdefault((src.participant_id, src.task_id), []).append(src)
    out: List[ClipRecord] = []
    for key in sorted(groups):
        candidates = []
        for src in groups[key]:
            n_starts = max(1, int(math.floor((src.duration_seconds - clip_seconds) / grid_seconds + 1e-9)) + 1)
            candidates.extend((src, k * grid_seconds) for k in range(n_starts))
        take = min(clips_per_participant_task, len(candidates))
        picks = sorted(rng.split(*key).choice(len(candidates), size=take, replace=False))
        for n, i in enumerate(picks):
            src, start = candidates[int(i)]
            out.append(
                src.model_copy(
                    update={
                        "clip_id": f"{src.clip_id}_{n:03d}",
                        "start_seconds": src.start_seconds + start,
                        "source_seconds": src.media_seconds,
                        "duration_seconds": min(clip_seconds, src.duration_seconds),
                    }
                )
            )
    return out


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

SYNTH_AUDIO_RATE = 22_050
SYNTH_FPS = 10
SYNTH_HW = (60, 80)
SYNTH_SECONDS = 6.0
SYNTH_TASK_IDS = ("open_discussion", "montclair_map", "multi_task")
# Planted cue per label: audio tone frequency (Hz) and video texture.
CUE_TONES = {"mental_demand": 700.0, "effort": 2000.0, "temporal_demand": 4500.0}
# Patch corners keep every jittered patch inside the centre crop. The last
# field is how many source frames each polarity lasts: 2 flips on every
# sampled 5 fps frame, 4 on every second one.
CUE_PATCHES = {
    "mental_demand": ("flicker", (10, 22), 2),
    "effort": ("checker", (24, 44), 2),
    "temporal_demand": ("flicker", (40, 22), 4),
}
PATCH_HW = (12, 16)
BASE_RATES = {"mental_demand": 0.55, "effort": 0.45, "temporal_demand": 0.55}


class SynthCues(BaseModel):
    """Which cues were planted in one synthetic clip."""

    audio: Dict[str, bool]
    video: Dict[str, bool]


def _texture(kind: str, phase: int) -> np.ndarray:
    h, w = PATCH_HW
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "flicker":
        base = np.zeros((h, w), dtype=np.int64)
    else:
        base = ((yy // 2) + (xx // 2)) % 2
    return np.where((base + phase) % 2 == 1, 1.0, -1.0)


def _synth_audio(cues: Dict[str, bool], rng: Rng, strength: float) -> np.ndarray:
    n = int(SYNTH_AUDIO_RATE * SYNTH_SECONDS)
    t = np.arange(n) / SYNTH_AUDIO_RATE
    x = 0.01 * rng.split("noise").normal(size=n)
    hum_f = rng.split("hum").uniform(100.0, 200.0)
    x += 0.02 * np.sin(2 * np.pi * hum_f * t + rng.split("hum_phase").uniform(0, 2 * np.pi))
    for task, on in cues.items():
        if not on:
            continue
        r = rng.split("tone", task)
        f = CUE_TONES[task] * r.uniform(0.97, 1.03)
        period, width = 0.5, 0.12
        phase = r.uniform(0, period)
        gate = (((t + phase) % period) < width).astype(np.float64)
        x += 0.1 * strength * gate * np.sin(2 * np.pi * f * t)
    return np.clip(x, -1.0, 1.0)


def _synth_video(cues: Dict[str, bool], rng: Rng, strength: float) -> np.ndarray:
    n = int(SYNTH_FPS * SYNTH_SECONDS)
    H, W = SYNTH_HW
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    base_color = rng.split("color").uniform(0.25, 0.75, size=3)
    tilt = rng.split("tilt").uniform(-0.15, 0.15, size=2)
    background = base_color[None, None, :] + (tilt[0] * yy + tilt[1] * xx)[..., None]
    noise = 0.03 * rng.split("noise").normal(size=(n, H, W, 1))
    frames = np.repeat(background[None], n, axis=0) + noise
    for task, on in cues.items():
        if not on:
            continue
        kind, (top, left), hold = CUE_PATCHES[task]
        r = rng.split("patch", task)
        top += int(r.integers(-3, 4))
        left += int(r.integers(-3, 4))
        h, w = PATCH_HW
        for i in range(n):
            tex = _texture(kind, (i // hold) % 2)
            frames[i, top : top + h, left : left + w, :] += 0.35 * strength * tex[..., None]
    return np.clip(np.round(np.clip(frames, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def synth_generate(
    out_dir: PathLike,
    n_participants: int = 12,
    clips_each: int = 20,
    seed: int = 0,
    signal_strength: float = 1.0,
    audio_distractor_p: float = 0.5,
    video_distractor_p: float = 0.0,
    threshold: float = 10.0,
) -> Tuple[List[ClipRecord], Dict[str, SynthCues]]:
    """Write a planted-cue dataset (WAV + MMV1 media and ``manifest.json``).

    Mental and temporal demand cues are planted redundantly in both
    modalities. The effort label is the conjunction of an audio cue and a
    video cue; negatives may carry either half alone as a distractor, with
    probabilities ``audio_distractor_p`` and ``video_distractor_p``.
    """
    if n_participants < 3:
        raise ValueError("synthetic dataset needs at least 3 participants")
    out = Path(out_dir)
    media = out / "media"
    media.mkdir(parents=True, exist_ok=True)
    root = Rng(seed).split("synth")
    records: List[ClipRecord] = []
    cue_log: Dict[str, SynthCues] = {}
    for p in range(n_participants):
        pid = f"P{p:03d}"
        prng = root.split("participant", p)
        bias = float(prng.split("bias").normal(0.0, 0.4))
        for c in range(clips_each):
            cid = f"{pid}_c{c:03d}"
            crng = prng.split("clip", c)
            labels = {}
            for task in TASKS:
                logit = math.log(BASE_RATES[task] / (1 - BASE_RATES[task])) + bias
                labels[task] = int(crng.split("label", task).random() < 1 / (1 + math.exp(-logit)))
            audio_cues = {t: bool(labels[t]) for t in TASKS}
            video_cues = {t: bool(labels[t]) for t in TASKS}
            if not labels["effort"]:
                audio_cues["effort"] = crng.split("distract_a").bernoulli(audio_distractor_p)
                video_cues["effort"] = crng.split("distract_v").bernoulli(video_distractor_p)
                if audio_cues["effort"] and video_cues["effort"]:
                    video_cues["effort"] = False
            scores = {}
            for task in TASKS:
                srng = crng.split("score", task)
                if labels[task]:
                    scores[task] = float(srng.integers(math.ceil(threshold), int(SCORE_MAX) + 1))
                else:
                    scores[task] = float(srng.integers(0, math.ceil(threshold)))
            wave = _synth_audio(audio_cues, crng.split("audio"), signal_strength)
            frames = _synth_video(video_cues, crng.split("video"), signal_strength)
            write_wav(media / f"{cid}.wav", Waveform(wave, SYNTH_AUDIO_RATE))
            write_clip(media / f"{cid}.mmv", frames)
            records.append(
                ClipRecord(
                    clip_id=cid,
                    participant_id=pid,
                    task_id=SYNTH_TASK_IDS[c % len(SYNTH_TASK_IDS)],
                    audio_path=f"media/{cid}.wav",
                    video_path=f"media/{cid}.mmv",
                    scores=TaskScores(**scores),
                    labels=TaskLabels(**{t: binarize_labels(scores[t], threshold) for t in TASKS}),
                    duration_seconds=SYNTH_SECONDS,
                )
            )
            cue_log[cid] = SynthCues(audio=audio_cues, video=video_cues)
    write_manifest(out / "manifest.json", records)
    cues_json = {cid: c.model_dump() for cid, c in cue_log.items()}
    (out / "cues.json").write_text(json.dumps(cues_json, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return records, cue_log
