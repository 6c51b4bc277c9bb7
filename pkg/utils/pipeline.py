# utils/pipeline.py

from __future__ import annotations

import json
import os
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from utils.checkpoint import Checkpoint, capture, restore
from utils.config import TrainConfig, config_from_dict, worker_count
from utils.datasets import CLASS_NAMES, NUM_CLASSES, FusionDataset, SampleRecord, atomic_write_text
from utils.errors import CheckpointError, ConfigMismatchError
from utils.losses import LrSchedule, adam_step, build_optimizer, cross_entropy, lr_at
from utils.network import MavgramNet, ParamStore, backward, init_parameters
from utils.waveform import SpeedGrid, base_label, speed_grid

# Trained during fine-tuning; the MFN backbone stays frozen
FINETUNE_GROUPS = ("tgram_a", "tgram_v", "mfn_last_fc", "arcface_head")
# Keeps the re-initialised head independent of the pre-training init stream
HEAD_SEED_OFFSET = 7919
METRICS_NAME = "metrics.jsonl"
# Wall-clock seconds per epoch; excluded from the run's artifact hashes
TIMING_NAME = "timing.jsonl"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def grid_of(cfg: TrainConfig) -> SpeedGrid:
    return speed_grid(cfg.speed.n, cfg.speed.s)


def class_map(cfg: TrainConfig) -> Dict[str, List[str]]:
    grid = grid_of(cfg)
    virtual = [f"{name}@{factor:.3f}" for name in CLASS_NAMES for factor in grid.factors]
    return {"base": list(CLASS_NAMES), "virtual": virtual}


def build_model(cfg: TrainConfig) -> MavgramNet:
    model = MavgramNet(
        cfg.variant, cfg.features.tgram(), cfg.mfn_spec(), cfg.num_virtual,
        cfg.arcface.margin, cfg.arcface.scale,
    )
    init_parameters(model, cfg.seed)
    return model


def model_from_checkpoint(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None) -> MavgramNet:
    """Rebuild the network a checkpoint was taken from; cfg (if given) must share its fingerprint"""
    if cfg is not None and cfg.fingerprint() != ckpt.fingerprint:
        produced = ckpt.meta.get("config", {}).get("variant", "?")
        raise ConfigMismatchError(
            f"checkpoint was produced under config {ckpt.fingerprint[:12]} (variant {produced}); "
            f"requested config {cfg.fingerprint()[:12]} (variant {cfg.variant}) builds different features"
        )
    if cfg is None:
        try:
            cfg = config_from_dict(ckpt.meta["config"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"checkpoint carries no usable config: {e}") from e
    model = build_model(cfg)
    restore(ckpt, model)
    return model


def _append_row(out_dir, name, row):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def _loader(dataset, cfg, shuffle):
    return DataLoader(
        dataset,
        batch_size=cfg.batch,
        shuffle=shuffle,
        generator=torch.Generator().manual_seed(cfg.seed),
        num_workers=worker_count(),
    )


def train_epochs(model: MavgramNet, store: ParamStore, dataset: FusionDataset, cfg: TrainConfig,
                 stage: str, meta: Dict, out_dir: Optional[str] = None, verbose: bool = False) -> Checkpoint:
    """
    Adam + per-epoch cosine schedule over speed-augmented batches.
    Returns the checkpoint of the epoch with the lowest mean train loss.
    """
    sched = LrSchedule(cfg.base_lr, cfg.min_lr, cfg.epochs)
    optimizer = build_optimizer(store.named_trainable(), sched.base_lr)
    loader = _loader(dataset, cfg, shuffle=True)
    best, best_loss = None, float("inf")

    for epoch in range(cfg.epochs):
        lr = lr_at(sched, epoch)
        store.set_mode("train")
        started = time.perf_counter()
        loss_sum, correct, seen, skipped = 0.0, 0, 0, 0
        for batch in tqdm(loader, desc=f"{stage} {epoch + 1}/{cfg.epochs}", disable=not verbose, leave=False):
            target = batch["label"]
            if target.numel() < 2:
                # batch norm cannot train on a single sample
                skipped += target.numel()
                continue
            logits = model(batch["mgram"], batch["acoustic"], batch["vibration"], target)
            loss = cross_entropy(logits, target)
            backward(store, loss)
            adam_step(optimizer, store.named_trainable(), lr)
            loss_sum += loss.item() * target.numel()
            correct += int((logits.argmax(dim=1) == target).sum())
            seen += target.numel()

        if seen == 0:
            raise ValueError(f"{stage}: no batch of two or more samples to train on")
        mean_loss = loss_sum / seen
        accuracy = correct / seen
        seconds = time.perf_counter() - started
        _append_row(out_dir, METRICS_NAME, {
            "stage": stage, "epoch": epoch + 1, "lr": lr, "loss": mean_loss, "accuracy": accuracy,
        })
        _append_row(out_dir, TIMING_NAME, {"stage": stage, "epoch": epoch + 1, "seconds": round(seconds, 3)})
        if skipped and verbose and epoch == 0:
            print(f"⚠️ {stage}: a trailing batch of {skipped} sample is skipped every epoch")
        if verbose:
            print(f"📉 {stage} epoch {epoch + 1}/{cfg.epochs}: loss {mean_loss:.4f} acc {accuracy:.3f} "
                  f"lr {lr:.6f} ({seconds:.1f}s)")
        if mean_loss < best_loss:
            best_loss = mean_loss
            best = capture(store, {**meta, "epoch": epoch + 1, "train_loss": mean_loss})
    if best is None:
        raise RuntimeError(f"{stage}: train loss was never finite; nothing to checkpoint")
    return best


def _meta(cfg, stage, **extra):
    return {
        "stage": stage,
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_dict(),
        "class_map": class_map(cfg),
        **extra,
    }


def pretrain(cfg: TrainConfig, records: Sequence[SampleRecord], out_dir: Optional[str] = None,
             mgram_cache=None, verbose: bool = False) -> Checkpoint:
    """Train every group from a seeded init on source-domain records"""
    if not records:
        raise ValueError("pretrain needs at least one labelled record")
    seed_everything(cfg.seed)
    model = build_model(cfg)
    store = ParamStore(model)
    dataset = FusionDataset(records, cfg.features, grid_of(cfg), augment=True, mgram_cache=mgram_cache)
    if verbose:
        print(f"🚀 pretrain {cfg.variant}: {len(records)} records x {cfg.speed.n} speeds, "
              f"{store.count():,} parameters, {cfg.epochs} epochs")
    return train_epochs(model, store, dataset, cfg, "pretrain", _meta(cfg, "pretrain"), out_dir, verbose)


def finetune(ckpt: Checkpoint, cfg: TrainConfig, records: Sequence[SampleRecord],
             out_dir: Optional[str] = None, mgram_cache=None, verbose: bool = False,
             percent: Optional[float] = None) -> Checkpoint:
    """
    Target-domain adaptation: fresh ArcFace head, both TgramNets and the
    embedding linear train; the MFN backbone (weights and running stats) is frozen.
    """
    if not records:
        raise ValueError("fine-tuning needs at least one target record")
    model = model_from_checkpoint(ckpt, cfg)
    missing = [g for g in ParamStore(model).groups() if g not in ckpt.group_names()]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter group(s) {missing}")

    seed_everything(cfg.seed)
    model.head.reset_parameters(torch.Generator().manual_seed(cfg.seed + HEAD_SEED_OFFSET))
    store = ParamStore(model, trainable=FINETUNE_GROUPS)
    dataset = FusionDataset(records, cfg.features, grid_of(cfg), augment=True, mgram_cache=mgram_cache)
    if verbose:
        print(f"🚀 finetune {cfg.variant}: {len(records)} records, trainable "
              f"{sorted(store.trainable_groups)} ({store.count(store.trainable_groups):,} parameters)")
    meta = _meta(cfg, "finetune", source_epoch=ckpt.epoch, percent=percent)
    return train_epochs(model, store, dataset, cfg, "finetune", meta, out_dir, verbose)


@dataclass
class Report:
    confusion: List[List[int]]
    virtual_hits: int
    variant: str = ""
    fingerprint: str = ""
    percent: Optional[float] = None
    seed: Optional[int] = None
    extra: Dict[str, str] = field(default_factory=dict)

    @property
    def samples(self) -> int:
        return sum(sum(row) for row in self.confusion)

    @property
    def per_class_accuracy(self) -> List[Optional[float]]:
        """Recall of each base class; None where the class has no test sample"""
        out = []
        for c, row in enumerate(self.confusion):
            total = sum(row)
            out.append(row[c] / total if total else None)
        return out

    @property
    def macro_accuracy(self) -> float:
        present = [a for a in self.per_class_accuracy if a is not None]
        return sum(present) / len(present) if present else 0.0

    @property
    def virtual_accuracy(self) -> float:
        return self.virtual_hits / self.samples if self.samples else 0.0

    def to_text(self) -> str:
        lines = [
            f"variant: {self.variant}",
            f"fingerprint: {self.fingerprint}",
            f"percent: {'' if self.percent is None else f'{self.percent:g}'}",
            f"seed: {'' if self.seed is None else self.seed}",
            f"samples: {self.samples}",
            f"macro_accuracy: {self.macro_accuracy:.6f}",
            f"virtual_accuracy: {self.virtual_accuracy:.6f}",
        ]
        for name, acc in zip(CLASS_NAMES, self.per_class_accuracy):
            lines.append(f"accuracy.{name}: {'' if acc is None else f'{acc:.6f}'}")
        for key in sorted(self.extra):
            lines.append(f"{key}: {self.extra[key]}")
        lines.append("confusion (rows true, columns predicted): " + " ".join(CLASS_NAMES))
        for name, row in zip(CLASS_NAMES, self.confusion):
            lines.append(f"{name} " + " ".join(str(v) for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        atomic_write_text(path, self.to_text())


def report_from_predictions(true_base: Sequence[int], pred_base: Sequence[int],
                            virtual_hits: int = 0, **info) -> Report:
    confusion = [[0] * NUM_CLASSES for _ in range(NUM_CLASSES)]
    for t, p in zip(true_base, pred_base):
        confusion[int(t)][int(p)] += 1
    return Report(confusion=confusion, virtual_hits=virtual_hits, **info)


def evaluate(ckpt: Checkpoint, cfg: TrainConfig, records: Sequence[SampleRecord],
             mgram_cache=None, verbose: bool = False) -> Report:
    """Eval-mode forward on unperturbed samples; virtual argmax collapsed to its base class"""
    model = model_from_checkpoint(ckpt, cfg)
    store = ParamStore(model, trainable=())
    store.set_mode("eval")
    dataset = FusionDataset(records, cfg.features, grid_of(cfg), augment=False, mgram_cache=mgram_cache)
    n = cfg.speed.n

    true_base, pred_base, hits = [], [], 0
    with torch.no_grad():
        for batch in tqdm(_loader(dataset, cfg, shuffle=False), desc="eval", disable=not verbose, leave=False):
            virtual = model(batch["mgram"], batch["acoustic"], batch["vibration"]).argmax(dim=1)
            hits += int((virtual == batch["label"]).sum())
            true_base += batch["base"].tolist()
            pred_base += base_label(virtual, n).tolist()

    report = report_from_predictions(
        true_base, pred_base, hits, variant=cfg.variant, fingerprint=ckpt.fingerprint,
        percent=ckpt.meta.get("percent"), seed=cfg.seed,
    )
    if verbose:
        print(f"✅ macro accuracy {report.macro_accuracy:.4f} on {report.samples} samples")
    return report


def append_curve_row(path, report: Report) -> None:
    """Percent-vs-accuracy CSV for plotting the fine-tune budget curve"""
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            fh.write("variant,percent,seed,macro_accuracy\n")
        percent = "" if report.percent is None else f"{report.percent:g}"
        fh.write(f"{report.variant},{percent},{report.seed},{report.macro_accuracy:.6f}\n")
