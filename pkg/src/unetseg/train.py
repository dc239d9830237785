"""
Training loop, checkpointing, prediction and evaluation.

A training run writes into ``checkpoint_dir``:

* ``config.resolved.json`` - the config with every default filled in
* ``metrics.csv``          - one row per finished epoch, flushed as it is written
* ``epoch_NNNN.ckpt``      - state after NNNN epochs, every ``checkpoint_every`` epochs
* ``best.ckpt``            - highest validation mean Dice (standard), earliest on ties
* ``final.ckpt``           - state at the end of the run

Checkpoints hold the model tensors, the Adam moments (``<name>.adam_m`` /
``<name>.adam_v``) and, in the header, the step count, the epoch counter
and the metric history, so a resumed run continues bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import read_checkpoint
from .config import TrainConfig
from .data import (
    SamplePair,
    load_image,
    load_pairs,
    load_sample,
    make_batches,
    prefetch,
    read_manifest,
    resize_image,
    resize_nearest,
    resize_pair,
    save_mask_png,
    scan_pairs,
    split_dataset,
    stack_pairs,
)
from .errors import ConfigError, DataError, DivergedLossError, FormatError
from .losses import LossConfig, compute_loss, dice_coefficient
from .optim import AdamState, LrSchedule, adam_step, lr_at_epoch
from .tensor import Tape, Tensor, backward
from .unet import UNetConfig, UNetModel, build_unet, model_from_arrays, save_weights, unet_forward

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_dice_mean", "lr", "wall_seconds"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice_mean: float
    lr: float
    wall_seconds: float

    def row(self) -> list[str]:
        return [str(self.epoch), repr(self.train_loss), repr(self.val_loss),
                repr(self.val_dice_mean), repr(self.lr), f"{self.wall_seconds:.3f}"]


@dataclass
class TrainResult:
    checkpoint_dir: Path
    history: list
    final_checkpoint: Path
    best_checkpoint: Optional[Path]
    metrics_csv: Path
    model: UNetModel


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------

def train_step(model: UNetModel, state: AdamState, images: np.ndarray, masks: np.ndarray,
               loss_cfg: LossConfig, lr: float) -> float:
    """Forward, backward and one Adam update on a batch; returns the batch loss."""
    with Tape() as tape:
        pred = unet_forward(model, Tensor(images), training=True)
        loss = compute_loss(pred, masks, loss_cfg)
    value = loss.item()
    if not math.isfinite(value):
        return value
    grads = backward(loss, tape)
    params = model.trainable()
    adam_step(params, {k: grads.get(p, np.zeros_like(p.data)) for k, p in params.items()}, state, lr)
    return value


def predict_proba(model: UNetModel, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode probabilities for (N, 1, H, W) images; never touches running stats."""
    outs = []
    for start in range(0, len(images), batch_size):
        outs.append(unet_forward(model, Tensor(images[start:start + batch_size]), training=False).data)
    return np.concatenate(outs, axis=0)


def validate(model: UNetModel, samples: Sequence[SamplePair], loss_cfg: LossConfig, batch_size: int,
             threshold: float = 0.5, dice_mode: str = "standard") -> tuple[float, float, float]:
    """Return (mean loss, mean Dice in ``dice_mode``, mean standard Dice) over ``samples``."""
    total_loss = 0.0
    dice, dice_std = [], []
    for start in range(0, len(samples), batch_size):
        images, masks = stack_pairs(samples[start:start + batch_size])
        pred = unet_forward(model, Tensor(images), training=False)
        total_loss += compute_loss(pred, masks, loss_cfg).item() * len(images)
        binary = (pred.data > threshold).astype(np.float32)
        for p, t in zip(binary, masks):
            dice.append(dice_coefficient(p, t, dice_mode))
            dice_std.append(dice_coefficient(p, t, "standard"))
    n = len(samples)
    return total_loss / n, float(np.mean(dice)), float(np.mean(dice_std))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_training_checkpoint(path, model: UNetModel, state: AdamState, cfg: TrainConfig,
                             epochs_completed: int, history: list, best: dict) -> None:
    extra = {}
    for name in model.trainable():
        if name in state.m:
            extra[f"{name}.adam_m"] = state.m[name]
            extra[f"{name}.adam_v"] = state.v[name]
    save_weights(
        model, path, extra_tensors=extra,
        image_size=cfg.image_size,
        epochs_completed=epochs_completed,
        adam={"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        best=best,
        history=[asdict(r) for r in history],
        train_config=cfg.to_dict(),
    )


def load_training_checkpoint(path) -> tuple[UNetModel, AdamState, dict]:
    meta, arrays = read_checkpoint(path)
    try:
        config = UNetConfig.from_dict(meta["config"])
        adam = meta["adam"]
        state = AdamState(beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"], t=adam["t"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a training checkpoint (missing {exc})") from None
    model = model_from_arrays(config, arrays)
    for name in model.trainable():
        if f"{name}.adam_m" in arrays:
            state.m[name] = arrays[f"{name}.adam_m"]
            state.v[name] = arrays[f"{name}.adam_v"]
    return model, state, meta


def _write_metrics(path: Path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for rec in history:
            writer.writerow(rec.row())


def _append_metrics(path: Path, rec: EpochRecord) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(rec.row())
        fh.flush()
        os.fsync(fh.fileno())


def read_metrics(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise FormatError(f"{path}: missing or unexpected metrics header")
    try:
        return [EpochRecord(int(r[0]), *(float(v) for v in r[1:6])) for r in rows[1:] if r]
    except (ValueError, IndexError, TypeError) as exc:
        raise FormatError(f"{path}: malformed metrics row ({exc})") from None


# --------------------------------------------------------------------------
# data loading
# --------------------------------------------------------------------------

def load_training_data(cfg: TrainConfig) -> tuple[list, list]:
    d = cfg.data
    try:
        if d.train_manifest:
            train_pairs = read_manifest(d.train_manifest)
        elif d.data_dir:
            train_pairs = scan_pairs(d.data_dir)
        else:
            raise ConfigError("config needs data.train_manifest or data.data_dir")
        train = load_pairs(train_pairs, d.mask_threshold)
        if d.val_manifest:
            val = load_pairs(read_manifest(d.val_manifest), d.mask_threshold)
        else:
            split = split_dataset(train, d.val_fraction, cfg.seeds.split)
            train, val = split.train, split.val
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, (DataError, ConfigError)):
            raise
        raise DataError(str(exc)) from None
    return train, val


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def train(cfg: TrainConfig, resume=None, train_samples: Optional[Sequence[SamplePair]] = None,
          val_samples: Optional[Sequence[SamplePair]] = None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Run (or resume) a training job described by ``cfg``.

    ``train_samples`` / ``val_samples`` bypass file loading when given.
    Raises DivergedLossError on a non-finite training loss.
    """
    cfg.validate()
    if train_samples is None:
        train_samples, val_samples = load_training_data(cfg)
    if not train_samples:
        raise DataError("training set is empty")
    if not val_samples:
        raise DataError("validation set is empty")
    size = cfg.image_size
    train_set = [resize_pair(s, size) for s in train_samples]
    val_set = [resize_pair(s, size) for s in val_samples]

    out_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    opt = cfg.optimizer
    if resume is not None:
        model, state, meta = load_training_checkpoint(resume)
        if model.config != cfg.model or meta.get("image_size") != size:
            raise ConfigError(f"{resume}: checkpoint model/image_size does not match the config")
        start = int(meta["epochs_completed"])
        history = [EpochRecord(**r) for r in meta.get("history", [])][:start]
        best = meta.get("best") or {"dice": None, "epoch": None}
    else:
        model = build_unet(cfg.model, seed=cfg.seeds.weights)
        state = AdamState(beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
        start, history, best = 0, [], {"dice": None, "epoch": None}

    metrics_csv = out_dir / "metrics.csv"
    _write_metrics(metrics_csv, history)
    final_ckpt = out_dir / "final.ckpt"
    best_ckpt = out_dir / "best.ckpt"
    sched = LrSchedule(cfg.epochs, opt.base_lr, opt.factor)
    policy = cfg.augment.policy(cfg.seeds.augment)

    if start == 0:
        save_training_checkpoint(out_dir / "epoch_0000.ckpt", model, state, cfg, 0, history, best)

    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(sched, epoch)
        batches = make_batches(train_set, cfg.batch_size, cfg.seeds.shuffle, epoch, policy)
        if cfg.prefetch:
            batches = prefetch(batches, capacity=2)
        loss_sum, count = 0.0, 0
        for images, masks in batches:
            value = train_step(model, state, images, masks, cfg.loss, lr)
            if not math.isfinite(value):
                raise DivergedLossError(epoch, value)
            loss_sum += value * len(images)
            count += len(images)
        train_loss = loss_sum / count
        val_loss, val_dice, val_dice_std = validate(
            model, val_set, cfg.loss, cfg.batch_size, cfg.threshold, cfg.dice_mode)
        if not math.isfinite(val_loss):
            raise DivergedLossError(epoch, val_loss)
        rec = EpochRecord(epoch, train_loss, val_loss, val_dice, lr, time.perf_counter() - t0)
        history.append(rec)
        _append_metrics(metrics_csv, rec)
        log.info("epoch %d  train %.4f  val %.4f  dice %.4f  lr %g", epoch, train_loss, val_loss, val_dice, lr)

        done = epoch + 1
        if best["dice"] is None or val_dice_std > best["dice"]:
            best = {"dice": val_dice_std, "epoch": epoch}
            save_training_checkpoint(best_ckpt, model, state, cfg, done, history, best)
        if done % cfg.checkpoint_every == 0:
            save_training_checkpoint(out_dir / f"epoch_{done:04d}.ckpt", model, state, cfg, done, history, best)
        if on_epoch is not None:
            on_epoch(rec)

    save_training_checkpoint(final_ckpt, model, state, cfg, max(start, cfg.epochs), history, best)
    return TrainResult(out_dir, history, final_ckpt, best_ckpt if best_ckpt.exists() else None, metrics_csv, model)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def load_for_inference(checkpoint_path) -> tuple[UNetModel, int]:
    meta, arrays = read_checkpoint(checkpoint_path)
    try:
        config = UNetConfig.from_dict(meta["config"])
        image_size = int(meta["image_size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{checkpoint_path}: checkpoint lacks config/image_size ({exc})") from None
    return model_from_arrays(config, arrays), image_size


def predict_mask(model: UNetModel, image_size: int, image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary mask at the image's own resolution."""
    h, w = image.shape
    small = resize_image(image, image_size, image_size)
    prob = predict_proba(model, small[None, None].astype(np.float32))[0, 0]
    binary = (prob > threshold).astype(np.float32)
    return resize_nearest(binary, h, w)


def predict(checkpoint_path, image_path, out_path, threshold: float = 0.5) -> np.ndarray:
    """Segment one image file and write the mask as a {0, 255} PNG."""
    model, image_size = load_for_inference(checkpoint_path)
    image = load_image(image_path)
    mask = predict_mask(model, image_size, image, threshold)
    save_mask_png(mask, out_path)
    return mask


def dice_report(pairs, mode: str = "standard") -> dict:
    """Per-pair Dice of (name, predicted, ground truth) triples, plus mean and count."""
    rows = [(name, dice_coefficient(p, t, mode)) for name, p, t in pairs]
    scores = [d for _, d in rows]
    return {"per_image": rows, "mean": float(np.mean(scores)) if scores else float("nan"), "count": len(rows)}


def evaluate(checkpoint_path, manifest, dice_mode: str = "standard", threshold: float = 0.5,
             output_csv=None, mask_threshold: float = 0.5) -> dict:
    """Dice of the model's predictions against every pair listed in ``manifest``."""
    model, image_size = load_for_inference(checkpoint_path)
    try:
        pairs = read_manifest(manifest)
        triples = []
        for img_path, mask_path in pairs:
            s = load_sample(img_path, mask_path, mask_threshold)
            triples.append((img_path, predict_mask(model, image_size, s.image, threshold), s.mask))
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(str(exc)) from None
    if not triples:
        raise DataError(f"{manifest}: no samples")
    report = dice_report(triples, dice_mode)
    if output_csv is not None:
        write_report_csv(report, output_csv)
    return report


def write_report_csv(report: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "dice"])
        for name, d in report["per_image"]:
            writer.writerow([name, repr(d)])
        writer.writerow(["mean", repr(report["mean"])])
