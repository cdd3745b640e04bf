"""``mmcla`` command line: synth, preprocess, train, eval.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or config
error. Progress goes to stderr through ``logging``; results go to files.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path
from typing import List, Optional

import click

from .cache import ClipDataset, PreprocessConfig, preprocess_manifest
from .config import ConfigError, RunConfig, load_config, save_config
from .data import (
    SPLITS,
    TASKS,
    ClipRecord,
    SplitSpec,
    TaskLabels,
    binarize_labels,
    read_manifest,
    read_split,
    split_by_participant,
    synth_generate,
    write_split,
)
from .model import MMNet
from .training import evaluate, fit

log = logging.getLogger("mmcla")

CONFIG_NAME = "config.yaml"
SPLIT_NAME = "split.json"
CHECKPOINT_NAME = "best.mmc"


class RunFailure(Exception):
    """Raised for expected runtime failures that should exit with status 1."""


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as err:
            click.echo(str(err), err=True)
            sys.exit(2)
        except (RunFailure, OSError, ValueError, KeyError) as err:
            log.error("%s", err)
            sys.exit(1)

    return wrapper


def _relabel(records: List[ClipRecord], threshold: float) -> List[ClipRecord]:
    out = []
    for r in records:
        labels = TaskLabels(**{t: binarize_labels(getattr(r.scores, t), threshold) for t in TASKS})
        out.append(r if labels == r.labels else r.model_copy(update={"labels": labels}))
    return out


def _datasets(cfg: RunConfig, records, split: SplitSpec, names, augment_train: bool):
    use_audio = cfg.model.modality != "video"
    use_video = cfg.model.modality != "audio"
    out = {}
    for name in names:
        out[name] = ClipDataset(
            split.select(records, name),
            cfg.data.cache,
            cfg.data.manifest,
            cfg.preprocess,
            cfg.augment if (augment_train and name == "train") else None,
            use_audio=use_audio,
            use_video=use_video,
        )
    return out


def _write_report(report, out_dir: Path, stem: str) -> None:
    (out_dir / f"{stem}.txt").write_text(report.to_text(), encoding="utf-8")
    (out_dir / f"{stem}.json").write_text(report.to_json(), encoding="utf-8")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
def main(verbose: bool) -> None:
    """Cognitive load toolkit: synthesis, preprocessing, training, evaluation."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Dataset directory to create.")
@click.option("--participants", default=12, show_default=True, type=click.IntRange(min=3))
@click.option("--clips-each", default=20, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--signal-strength", default=1.0, show_default=True, type=click.FloatRange(min=0.0, min_open=True))
@_guard
def synth(out_dir: str, participants: int, clips_each: int, seed: int, signal_strength: float) -> None:
    """Write a planted-cue synthetic dataset with manifest and split."""
    records, _ = synth_generate(out_dir, participants, clips_each, seed, signal_strength)
    split = split_by_participant(records, seed=seed)
    write_split(Path(out_dir) / SPLIT_NAME, split)
    click.echo(f"participants: {participants}")
    click.echo(f"clips: {len(records)}")
    for name in SPLITS:
        click.echo(f"{name}: {split.counts[name]} clips, {len(getattr(split, name))} participants")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cache", "cache_dir", required=True, type=click.Path(file_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="Take preprocessing settings from a run config.")
@_guard
def preprocess(manifest: str, cache_dir: str, workers: int, config_path: Optional[str]) -> None:
    """Cache log-mel and video tensors for every clip of a manifest."""
    cfg = load_config(config_path).preprocess if config_path else PreprocessConfig()
    summary = preprocess_manifest(manifest, cache_dir, cfg, workers)
    click.echo(f"processed: {len(summary.processed)}")
    click.echo(f"skipped: {len(summary.skipped)}")
    click.echo(f"failed: {len(summary.failed)}")
    if summary.failed:
        raise RunFailure(f"{len(summary.failed)} clip(s) failed to preprocess")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1), help="Processes for cache filling.")
@_guard
def train(config_path: str, workers: int) -> None:
    """Train a model from a run config; outputs land in its output_dir."""
    cfg = load_config(config_path).resolve(Path(config_path).parent)
    if not cfg.data.manifest or not cfg.data.cache:
        raise ConfigError("invalid run config:\n  data.manifest and data.cache are required for training")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / CONFIG_NAME, cfg)

    records = _relabel(read_manifest(cfg.data.manifest), cfg.data.label_threshold)
    if cfg.data.split_file and Path(cfg.data.split_file).exists():
        split = read_split(cfg.data.split_file)
    else:
        split = split_by_participant(records, cfg.data.split_fractions, cfg.data.split_seed)
    write_split(out / SPLIT_NAME, split)
    log.info("split clips: %s", split.counts)

    summary = preprocess_manifest(cfg.data.manifest, cfg.data.cache, cfg.preprocess, workers, records)
    if summary.failed:
        raise RunFailure(f"{len(summary.failed)} clip(s) failed to preprocess")

    sets = _datasets(cfg, records, split, ("train", "val"), augment_train=True)
    model = MMNet(cfg.model, seed=cfg.train.seed)
    result = fit(model, sets["train"], sets["val"], cfg.train, out, cfg.eval.threshold, cfg.eval.batch_size)
    report = evaluate(model, sets["val"], cfg.eval.threshold, cfg.eval.batch_size)
    _write_report(report, out, "report_val")
    click.echo(report.to_text(), nl=False)
    log.info("best epoch %d of %d; checkpoint %s", result.best_epoch, result.epochs_run, result.checkpoint)


@main.command(name="eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", "split_name", type=click.Choice(["val", "test"]), default="val", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help=f"Defaults to {CONFIG_NAME} beside the checkpoint.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Report directory; defaults to the checkpoint's.")
@_guard
def eval_cmd(checkpoint: str, manifest: str, split_name: str, config_path: Optional[str], out_dir: Optional[str]) -> None:
    """Score a checkpoint on one split and write text and JSON reports."""
    ckpt = Path(checkpoint)
    config_file = Path(config_path) if config_path else ckpt.parent / CONFIG_NAME
    if not config_file.exists():
        raise ConfigError(f"no run config at {config_file}; pass --config")
    cfg = load_config(config_file).resolve(config_file.parent)
    cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"manifest": str(Path(manifest).resolve())})})
    if not cfg.data.cache:
        raise ConfigError("invalid run config:\n  data.cache is required for evaluation")

    records = _relabel(read_manifest(manifest), cfg.data.label_threshold)
    split_file = ckpt.parent / SPLIT_NAME
    if split_file.exists():
        split = read_split(split_file)
    else:
        split = split_by_participant(records, cfg.data.split_fractions, cfg.data.split_seed)
    chosen = split.select(records, split_name)
    if not chosen:
        raise RunFailure(f"split '{split_name}' has no clips")
    summary = preprocess_manifest(manifest, cfg.data.cache, cfg.preprocess, 1, chosen)
    if summary.failed:
        raise RunFailure(f"{len(summary.failed)} clip(s) failed to preprocess")

    model = MMNet.load(ckpt, cfg.model)
    dataset = _datasets(cfg, records, split, (split_name,), augment_train=False)[split_name]
    report = evaluate(model, dataset, cfg.eval.threshold, cfg.eval.batch_size)
    target = Path(out_dir) if out_dir else ckpt.parent
    target.mkdir(parents=True, exist_ok=True)
    _write_report(report, target, f"eval_{split_name}")
    click.echo(report.to_text(), nl=False)


if __name__ == "__main__":
    main()
