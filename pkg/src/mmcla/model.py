"""Audio-visual multitask network.

AudioNet (2-D conv blocks over the log-mel image) and VideoNet (a shallow
inflated-inception 3-D stack over the grayscale volume) each produce a
128-wide feature vector. A cross-modal multihead attention layer fuses the
two, a shared fully connected layer follows, and three task branches emit
independent sigmoid probabilities.

Parameters live in a flat ordered dict keyed by dotted path strings, which
are also the checkpoint entry names.
"""

from __future__ import annotations

import math
import os
from collections import OrderedDict
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .data import TASKS
from .tensor import (
    BatchNormState,
    Rng,
    ShapeError,
    Tensor,
    adaptive_avg_pool,
    batch_norm,
    concat,
    conv2d,
    conv3d,
    dropout,
    linear,
    matmul,
    max_pool2d,
    max_pool3d,
    mean,
    read_archive,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    transpose,
    write_archive,
)
from .tensor.ops import kaiming_uniform, zeros

PathLike = Union[str, os.PathLike]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class InceptionWidths(_Strict):
    """Branch widths of one inception module; output width is their sum."""

    b1: int = Field(gt=0)
    b2_reduce: int = Field(gt=0)
    b2: int = Field(gt=0)
    b3_reduce: int = Field(gt=0)
    b3: int = Field(gt=0)
    b4: int = Field(gt=0)

    @property
    def out(self) -> int:
        return self.b1 + self.b2 + self.b3 + self.b4


DEFAULT_INCEPTION = (
    InceptionWidths(b1=16, b2_reduce=24, b2=32, b3_reduce=4, b3=8, b4=8),
    InceptionWidths(b1=32, b2_reduce=32, b2=64, b3_reduce=8, b3=16, b4=16),
)


class ModelConfig(_Strict):
    audio_channels: Tuple[int, ...] = (16, 32, 64, 128)
    audio_pool: Tuple[int, int] = (4, 4)
    video_stem_channels: int = Field(16, gt=0)
    inception: Tuple[InceptionWidths, ...] = DEFAULT_INCEPTION
    feature_dim: int = Field(128, gt=0)
    heads: int = Field(4, gt=0)
    query_from: Literal["audio", "video"] = "audio"
    attention_mode: Literal["faithful", "sequence"] = "faithful"
    branch_hidden: int = Field(64, gt=0)
    dropout: float = Field(0.5, ge=0.0, lt=1.0)
    modality: Literal["av", "audio", "video"] = "av"
    audio_shape: Tuple[int, int] = (80, 601)
    video_shape: Tuple[int, int, int] = (30, 148, 144)
    precision: Literal["float32", "float64"] = "float32"

    @model_validator(mode="after")
    def _check(self):
        if self.feature_dim % self.heads:
            raise ValueError(f"feature_dim {self.feature_dim} is not divisible by heads {self.heads}")
        if not self.audio_channels or min(self.audio_channels) <= 0:
            raise ValueError("audio_channels must be a nonempty sequence of positive widths")
        if not self.inception:
            raise ValueError("at least one inception module is required")
        return self

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.heads

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def quartered(cls, **overrides) -> "ModelConfig":
        """Reduced-width variant with every convolution width divided by four."""
        base = dict(
            audio_channels=(4, 8, 16, 32),
            video_stem_channels=4,
            inception=(
                InceptionWidths(b1=4, b2_reduce=6, b2=8, b3_reduce=1, b3=2, b4=2),
                InceptionWidths(b1=8, b2_reduce=8, b2=16, b3_reduce=2, b3=4, b4=4),
            ),
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# attention as a free function so it can be probed in isolation
# ---------------------------------------------------------------------------


def crossmodal_attention(
    query_src: Tensor,
    kv_src: Tensor,
    w_q: List[Tensor],
    w_k: List[Tensor],
    w_v: List[Tensor],
    w_o: Tensor,
    weights_out: Optional[list] = None,
) -> Tensor:
    """Multihead attention with queries from one modality, keys/values from the other.

    Inputs are (B, d) pooled vectors, treated as length-1 token sequences,
    or (B, L, d) token sequences. Returns (B, d) for pooled input and
    (B, Lq, d) otherwise. When ``weights_out`` is a list, the per-head
    attention weight arrays are appended to it.
    """
    pooled = query_src.ndim == 2
    if pooled != (kv_src.ndim == 2):
        raise ShapeError(f"attention inputs must both be pooled or both be sequences: {query_src.shape}, {kv_src.shape}")
    d = w_o.shape[0]
    if query_src.shape[-1] != d or kv_src.shape[-1] != d:
        raise ShapeError(f"attention expects width {d}, got {query_src.shape} and {kv_src.shape}")
    q_in = reshape(query_src, (query_src.shape[0], 1, d)) if pooled else query_src
    kv_in = reshape(kv_src, (kv_src.shape[0], 1, d)) if pooled else kv_src
    heads = []
    for wq, wk, wv in zip(w_q, w_k, w_v):
        dk = wq.shape[1]
        q = matmul(q_in, wq)
        k = matmul(kv_in, wk)
        v = matmul(kv_in, wv)
        attn = softmax(scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk)), axis=-1)
        if weights_out is not None:
            weights_out.append(attn.data.copy())
        heads.append(matmul(attn, v))
    out = matmul(concat(heads, axis=-1), w_o)
    return reshape(out, (out.shape[0], d)) if pooled else out


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------


class MMNet:
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.params: Dict[str, Tensor] = OrderedDict()
        self.norms: Dict[str, BatchNormState] = OrderedDict()
        self._init_rng = Rng(seed).split("init")
        self._build()

    # -- construction --------------------------------------------------
    def _weight(self, name: str, shape, fan_in: int) -> Tensor:
        t = kaiming_uniform(shape, fan_in, self._init_rng.split(name), self.config.dtype)
        self.params[name] = t
        return t

    def _bias(self, name: str, width: int) -> Tensor:
        t = zeros((width,), self.config.dtype)
        self.params[name] = t
        return t

    def _glorot(self, name: str, shape) -> Tensor:
        bound = math.sqrt(6.0 / (shape[0] + shape[1]))
        arr = self._init_rng.split(name).uniform(-bound, bound, tuple(shape)).astype(self.config.dtype)
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def _norm(self, name: str, channels: int) -> None:
        state = BatchNormState(channels, dtype=self.config.dtype)
        self.norms[name] = state
        self.params[f"{name}.gamma"] = state.gamma
        self.params[f"{name}.beta"] = state.beta

    def _conv_unit(self, name: str, c_in: int, c_out: int, kernel: Tuple[int, ...]) -> None:
        self._weight(f"{name}.weight", (c_out, c_in) + kernel, c_in * int(np.prod(kernel)))
        self._norm(f"{name}.bn", c_out)

    def _linear(self, name: str, n_in: int, n_out: int) -> None:
        self._weight(f"{name}.weight", (n_in, n_out), n_in)
        self._bias(f"{name}.bias", n_out)

    def _build(self) -> None:
        cfg = self.config
        d = cfg.feature_dim
        # token mode bypasses the pooled projections, so they are not built
        pooled = cfg.modality != "av" or cfg.attention_mode == "faithful"
        if cfg.modality in ("av", "audio"):
            c_in = 1
            for i, c in enumerate(cfg.audio_channels):
                self._conv_unit(f"audio.block{i}.conv", c_in, c, (3, 3))
                c_in = c
            if pooled:
                self._linear("audio.fc", c_in * cfg.audio_pool[0] * cfg.audio_pool[1], d)
        if cfg.modality in ("av", "video"):
            self._conv_unit("video.stem", 1, cfg.video_stem_channels, (7, 7, 7))
            c_in = cfg.video_stem_channels
            for i, w in enumerate(cfg.inception):
                p = f"video.inception{i}"
                self._conv_unit(f"{p}.b1", c_in, w.b1, (1, 1, 1))
                self._conv_unit(f"{p}.b2a", c_in, w.b2_reduce, (1, 1, 1))
                self._conv_unit(f"{p}.b2b", w.b2_reduce, w.b2, (3, 3, 3))
                self._conv_unit(f"{p}.b3a", c_in, w.b3_reduce, (1, 1, 1))
                self._conv_unit(f"{p}.b3b", w.b3_reduce, w.b3, (3, 3, 3))
                self._conv_unit(f"{p}.b4", c_in, w.b4, (1, 1, 1))
                c_in = w.out
            if pooled:
                self._linear("video.fc", c_in, d)
        if cfg.modality == "av":
            for h in range(cfg.heads):
                for kind in ("query", "key", "value"):
                    self._glorot(f"attention.{kind}.{h}", (d, cfg.head_dim))
            self._glorot("attention.out", (d, d))
            if cfg.attention_mode == "sequence":
                self._linear("attention.audio_tokens", cfg.audio_channels[-1], d)
                self._linear("attention.video_tokens", cfg.inception[-1].out, d)
        self._linear("shared", d, d)
        for task in TASKS:
            self._linear(f"branch.{task}.hidden", d, cfg.branch_hidden)
            self._linear(f"branch.{task}.out", cfg.branch_hidden, 1)

    # -- bookkeeping ---------------------------------------------------
    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.params.items()}
        for name, bn in self.norms.items():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise KeyError(f"checkpoint mismatch; missing {missing}, unexpected {unexpected}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape}, model shape {t.shape}")
            t.data = np.ascontiguousarray(state[name], dtype=self.config.dtype)
        for name, bn in self.norms.items():
            bn.running_mean[...] = state[f"{name}.running_mean"]
            bn.running_var[...] = state[f"{name}.running_var"]

    def save(self, path: PathLike) -> None:
        write_archive(path, self.state_dict())

    @classmethod
    def load(cls, path: PathLike, config: Optional[ModelConfig] = None) -> "MMNet":
        model = cls(config)
        model.load_state_dict(read_archive(path))
        return model

    # -- forward pieces ------------------------------------------------
    def _unit(self, name: str, x: Tensor, train: bool, conv, stride=1, padding=0) -> Tensor:
        y = conv(x, self.params[f"{name}.weight"], None, stride, padding)
        return relu(batch_norm(y, self.norms[f"{name}.bn"], train))

    def _dense(self, name: str, x: Tensor) -> Tensor:
        return linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _cast(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x if x.dtype == self.config.dtype else Tensor(x.data.astype(self.config.dtype))
        return Tensor(np.asarray(x, dtype=self.config.dtype))

    def audio_maps(self, mel, train: bool = False) -> Tensor:
        """Conv block stack: (B, 1, n_mels, frames) -> (B, C, f, t)."""
        mel = self._cast(mel)
        expected = self.config.audio_shape
        if mel.ndim != 4 or mel.shape[1] != 1 or tuple(mel.shape[2:]) != expected:
            raise ShapeError(f"audio input must be (B, 1, {expected[0]}, {expected[1]}), got {mel.shape}")
        x = mel
        for i in range(len(self.config.audio_channels)):
            x = self._unit(f"audio.block{i}.conv", x, train, conv2d, 1, 1)
            x = max_pool2d(x, (2, 2))
        return x

    def audionet(self, mel, train: bool = False, rng: Optional[Rng] = None, maps: Optional[Tensor] = None) -> Tensor:
        x = self.audio_maps(mel, train) if maps is None else maps
        x = adaptive_avg_pool(x, self.config.audio_pool)
        x = reshape(x, (x.shape[0], -1))
        x = dropout(x, self.config.dropout, train, rng)
        return self._dense("audio.fc", x)

    def video_maps(self, vol, train: bool = False) -> Tensor:
        """Stem plus inception stack: (B, 1, D, H, W) -> (B, C, d, h, w)."""
        vol = self._cast(vol)
        expected = self.config.video_shape
        if vol.ndim != 5 or vol.shape[1] != 1 or tuple(vol.shape[2:]) != expected:
            raise ShapeError(
                f"video input must be (B, 1, {expected[0]}, {expected[1]}, {expected[2]}), got {vol.shape}"
            )
        x = self._unit("video.stem", vol, train, conv3d, 2, 3)
        x = max_pool3d(x, (1, 2, 2))
        for i in range(len(self.config.inception)):
            x = self.inception(i, x, train)
        return x

    def inception(self, i: int, x: Tensor, train: bool) -> Tensor:
        p = f"video.inception{i}"
        b1 = self._unit(f"{p}.b1", x, train, conv3d)
        b2 = self._unit(f"{p}.b2b", self._unit(f"{p}.b2a", x, train, conv3d), train, conv3d, 1, 1)
        b3 = self._unit(f"{p}.b3b", self._unit(f"{p}.b3a", x, train, conv3d), train, conv3d, 1, 1)
        b4 = self._unit(f"{p}.b4", max_pool3d(x, (3, 3, 3), 1, 1), train, conv3d)
        return concat([b1, b2, b3, b4], axis=1)

    def videonet(self, vol, train: bool = False, rng: Optional[Rng] = None, maps: Optional[Tensor] = None) -> Tensor:
        x = self.video_maps(vol, train) if maps is None else maps
        x = adaptive_avg_pool(x, (1, 1, 1))
        x = reshape(x, (x.shape[0], -1))
        x = dropout(x, self.config.dropout, train, rng)
        return self._dense("video.fc", x)

    def attention(self, audio: Tensor, video: Tensor, weights_out: Optional[list] = None) -> Tensor:
        cfg = self.config
        q_src, kv_src = (audio, video) if cfg.query_from == "audio" else (video, audio)
        h = range(cfg.heads)
        return crossmodal_attention(
            q_src,
            kv_src,
            [self.params[f"attention.query.{i}"] for i in h],
            [self.params[f"attention.key.{i}"] for i in h],
            [self.params[f"attention.value.{i}"] for i in h],
            self.params["attention.out"],
            weights_out,
        )

    def _tokens(self, name: str, maps: Tensor) -> Tensor:
        """Collapse all non-time axes of a feature map into (B, T, d) tokens."""
        # audio maps are (B, C, f, t); video maps are (B, C, t, h, w)
        axes = (2,) if maps.ndim == 4 else (3, 4)
        seq = transpose(mean(maps, axis=axes), (0, 2, 1))
        B, T, C = seq.shape
        flat = self._dense(name, reshape(seq, (B * T, C)))
        return reshape(flat, (B, T, self.config.feature_dim))

    def heads(self, fused: Tensor, train: bool = False, rng: Optional[Rng] = None) -> Tuple[Tensor, Tensor, Tensor]:
        if fused.ndim != 2 or fused.shape[1] != self.config.feature_dim:
            raise ShapeError(f"heads expect (B, {self.config.feature_dim}), got {fused.shape}")
        shared = relu(self._dense("shared", fused))
        outs = []
        for task in TASKS:
            hidden = relu(self._dense(f"branch.{task}.hidden", shared))
            hidden = dropout(hidden, self.config.dropout, train, None if rng is None else rng.split(task))
            logit = self._dense(f"branch.{task}.out", hidden)
            outs.append(reshape(sigmoid(logit), (logit.shape[0],)))
        return tuple(outs)

    def forward(self, mel=None, vol=None, train: bool = False, rng: Optional[Rng] = None):
        """Three (B,) probability tensors in task order."""
        cfg = self.config
        if train and rng is None and cfg.dropout > 0:
            raise ValueError("train-mode forward needs an Rng for dropout")
        sub = (lambda key: rng.split(key)) if rng is not None else (lambda key: None)
        if cfg.modality == "audio":
            fused = self.audionet(mel, train, sub("audio"))
        elif cfg.modality == "video":
            fused = self.videonet(vol, train, sub("video"))
        else:
            a_maps = self.audio_maps(mel, train)
            v_maps = self.video_maps(vol, train)
            if cfg.attention_mode == "faithful":
                a = self.audionet(mel, train, sub("audio"), maps=a_maps)
                v = self.videonet(vol, train, sub("video"), maps=v_maps)
                fused = self.attention(a, v)
            else:
                a = self._tokens("attention.audio_tokens", a_maps)
                v = self._tokens("attention.video_tokens", v_maps)
                fused = mean(self.attention(a, v), axis=1)
        return self.heads(fused, train, sub("heads"))

    __call__ = forward
