"""Multitask loss, Adam, step learning-rate decay, early stopping and the epoch loop."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .data import TASKS
from .metrics import MetricsReport, binarize
from .tensor import Rng, Tensor, add, clamp, log, mean, mul, no_grad, read_archive, scale, sub

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
PROB_CLAMP = 1e-7


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("weights")
    @classmethod
    def _valid(cls, w):
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ValueError(f"loss weights must be finite and nonnegative, got {w}")
        if not any(x > 0 for x in w):
            raise ValueError("at least one loss weight must be positive")
        return w


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(30, ge=1)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_step: int = Field(10, ge=1)
    lr_gamma: float = Field(0.1, gt=0)
    patience: int = Field(10, ge=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("loss_weights")
    @classmethod
    def _weights(cls, w):
        return LossWeights(weights=w).weights

    @model_validator(mode="after")
    def _patience(self):
        if self.patience > self.epochs:
            raise ValueError(f"patience {self.patience} exceeds epochs {self.epochs}")
        return self


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    if p.size == 0:
        raise ValueError("bce_loss of an empty batch")
    y = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} do not match probabilities {p.shape}")
    pc = clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = mul(Tensor(y), log(pc))
    neg = mul(Tensor(1.0 - y), log(sub(1.0, pc)))
    return scale(mean(add(pos, neg)), -1.0)


def bce_numpy(p, y) -> float:
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    if p.size == 0:
        raise ValueError("bce of an empty batch")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def global_loss(losses: Sequence[Tensor], weights: Sequence[float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the per-task losses."""
    weights = LossWeights(weights=tuple(weights)).weights
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses for {len(weights)} weights")
    total = None
    for loss, w in zip(losses, weights):
        term = scale(loss, w)
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimiser and schedules
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, Optional[np.ndarray]],
    state: OptimState,
    lr: float,
) -> Dict[str, np.ndarray]:
    """Bias-corrected Adam update; returns the new parameter arrays and advances ``state``."""
    missing = [name for name in params if grads.get(name) is None]
    if missing:
        raise ValueError(f"no gradient for parameter(s): {', '.join(missing)}")
    bad = [name for name in params if not np.isfinite(grads[name]).all()]
    if bad:
        raise FloatingPointError(f"non-finite gradient for parameter(s): {', '.join(bad)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    out = {}
    for name, value in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (value - step).astype(value.dtype, copy=False)
    return out


class Adam:
    def __init__(self, params: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = OptimState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, lr: float) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        for k, new in adam_step(arrays, grads, self.state, lr).items():
            self.params[k].data = new

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def step_lr(epoch: int, base_lr: float = 1e-3, step: int = 10, gamma: float = 0.1) -> float:
    """``base_lr * gamma ** floor((epoch - 1) / step)`` for 1-based epochs.

    Rounded to 15 significant digits so decimal schedules come out exact
    (1e-3, 1e-4, ...) instead of carrying binary representation error.
    """
    if epoch < 1:
        raise ValueError(f"epochs are numbered from 1, got {epoch}")
    return float(f"{base_lr * gamma ** ((epoch - 1) // step):.15g}")


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    best_epoch: int  # 1-based
    since_best: int


def early_stop(history: Sequence[float], patience: int = 10) -> StopDecision:
    """Stop once ``patience`` epochs in a row fail to strictly beat the best loss."""
    if not history:
        raise ValueError("early_stop needs at least one epoch of history")
    best_idx = int(np.argmin(np.asarray(history, dtype=np.float64)))  # first minimum wins ties
    since = len(history) - 1 - best_idx
    return StopDecision(stop=since >= patience, best_epoch=best_idx + 1, since_best=since)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def predict(model, dataset, batch_size: int = 16) -> np.ndarray:
    """Eval-mode probabilities, shape (N, 3)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    out = []
    with no_grad():
        for lo in range(0, len(dataset), batch_size):
            mel, vol, _ = dataset.batch(range(lo, min(len(dataset), lo + batch_size)))
            probs = model.forward(mel, vol, train=False)
            out.append(np.stack([p.data.astype(np.float64) for p in probs], axis=1))
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, threshold: float = 0.5, batch_size: int = 16) -> MetricsReport:
    probs = predict(model, dataset, batch_size)
    preds = [binarize(probs[:, k], threshold) for k in range(len(TASKS))]
    trues = [dataset.labels[:, k] for k in range(len(TASKS))]
    return MetricsReport.from_labels(preds, trues, threshold)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = (
    ["epoch", "lr"]
    + [f"train_loss_{t}" for t in TASKS]
    + ["val_loss"]
    + [f"val_f1_{t}" for t in TASKS]
)


class TrainingError(RuntimeError):
    pass


@dataclass
class FitResult:
    best_epoch: int
    epochs_run: int
    val_losses: List[float]
    checkpoint: Path
    log_path: Path
    stopped_early: bool


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def fit(model, train_set, val_set, config: TrainConfig, out_dir: PathLike, threshold: float = 0.5, eval_batch_size: int = 16) -> FitResult:
    """Train ``model`` in place, keeping the weights of the best validation epoch.

    Writes ``epochs.tsv`` (one row per epoch) and ``best.mmc`` into ``out_dir``.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be nonempty")
    train_ids = {r.participant_id for r in getattr(train_set, "records", [])}
    val_ids = {r.participant_id for r in getattr(val_set, "records", [])}
    if train_ids & val_ids:
        raise ValueError(f"participants in both train and val: {sorted(train_ids & val_ids)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "best.mmc"
    log_path = out / "epochs.tsv"
    weights = config.loss_weights
    optim = Adam(model.params, config.beta1, config.beta2, config.eps)
    root = Rng(config.seed).split("fit")
    history: List[float] = []
    n = len(train_set)
    stopped = False

    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(LOG_COLUMNS) + "\n")
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            lr = step_lr(epoch, config.lr, config.lr_step, config.lr_gamma)
            order = root.split("shuffle", epoch).permutation(n)
            sums = np.zeros(len(TASKS))
            for b, lo in enumerate(range(0, n, config.batch_size)):
                idx = [int(i) for i in order[lo : lo + config.batch_size]]
                step_rng = root.split("step", epoch, b)
                mel, vol, labels = train_set.batch(idx, rng=step_rng.split("augment"))
                try:
                    probs = model.forward(mel, vol, train=True, rng=step_rng.split("dropout"))
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite activations at epoch {epoch}, batch {b}: {exc}") from exc
                losses = [bce_loss(p, labels[:, k]) for k, p in enumerate(probs)]
                for k, loss in enumerate(losses):
                    if not math.isfinite(loss.item()):
                        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}, branch {TASKS[k]}")
                    sums[k] += loss.item() * len(idx)
                optim.zero_grad()
                global_loss(losses, weights).backward()
                try:
                    optim.step(lr)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            train_losses = sums / n

            probs = predict(model, val_set, eval_batch_size)
            val_losses = [bce_numpy(probs[:, k], val_set.labels[:, k]) for k in range(len(TASKS))]
            val_loss = float(sum(w * l for w, l in zip(weights, val_losses)))
            report = MetricsReport.from_labels(
                [binarize(probs[:, k], threshold) for k in range(len(TASKS))],
                [val_set.labels[:, k] for k in range(len(TASKS))],
                threshold,
            )
            history.append(val_loss)
            decision = early_stop(history, config.patience)
            if decision.best_epoch == epoch:
                model.save(ckpt)
            row = [str(epoch), _fmt(lr)] + [_fmt(x) for x in train_losses] + [_fmt(val_loss)]
            row += [_fmt(report.task_f1[t]) for t in TASKS]
            fh.write("\t".join(row) + "\n")
            fh.flush()
            logger.info(
                "epoch %d lr %g train %s val %.4f global F1 %.4f (%.1fs)",
                epoch, lr, np.round(train_losses, 4).tolist(), val_loss, report.global_f1, time.perf_counter() - t0,
            )
            if decision.stop:
                stopped = True
                break

    best = early_stop(history, config.patience).best_epoch
    model.load_state_dict(read_archive(ckpt))
    return FitResult(best, len(history), history, ckpt, log_path, stopped)
