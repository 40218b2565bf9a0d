"""Warmup schedules, phase plans and the recognizer training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset import AugmentationConfig, LineSample, augment
from .glyphs import CHARSET
from .recognizer import WSNet, collate, corpus_cer, ctc_loss, decode_images, encode_text, save_checkpoint
from .wsb import normalize_table_grad

log = logging.getLogger(__name__)

TRAINABLE = ("all", "all_except_embeddings", "embeddings_only")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class WarmupEvent:
    start: int
    peak_lr: float
    length: int = 10_000


@dataclass
class Phase:
    name: str
    iterations: int
    trainable: str
    events: list[WarmupEvent]

    def __post_init__(self):
        if self.trainable not in TRAINABLE:
            raise ValueError(f"unknown trainable set {self.trainable!r}")


@dataclass
class PhasePlan:
    phases: list[Phase]
    batch_size: int = 32
    # multiplier on the schedule for the embedding table only; 1 leaves the recipe unchanged
    embedding_lr_scale: float = 1.0

    @property
    def total(self) -> int:
        return sum(p.iterations for p in self.phases)

    @property
    def boundaries(self) -> list[int]:
        out, acc = [], 0
        for p in self.phases:
            acc += p.iterations
            out.append(acc)
        return out

    @property
    def events(self) -> list[WarmupEvent]:
        return sorted((e for p in self.phases for e in p.events), key=lambda e: e.start)

    def phase_at(self, it: int) -> Phase:
        acc = 0
        for p in self.phases:
            acc += p.iterations
            if it < acc:
                return p
        raise IndexError(f"iteration {it} beyond plan length {self.total}")

    def lr(self, it: int) -> float:
        return lr_at(self.events, it)

    def embedding_lr(self, it: int) -> float:
        return self.lr(it) * self.embedding_lr_scale

    def scaled(self, s: float, lr_scale: float = 1.0, embedding_lr_scale: float = 1.0) -> "PhasePlan":
        """Multiply every iteration count by ``s`` (rounding up) and every peak by ``lr_scale``.

        A short schedule also shortens how far the embeddings can travel under Adam, whose step
        size is bounded by the learning rate; ``embedding_lr_scale`` compensates for the table alone.
        """
        if not 0 < s <= 1:
            raise ValueError("scale factor must be in (0, 1]")
        phases = []
        for p in self.phases:
            events = [WarmupEvent(scale_count(e.start, s, 0), e.peak_lr * lr_scale, scale_count(e.length, s))
                      for e in p.events]
            phases.append(replace(p, iterations=scale_count(p.iterations, s), events=events))
        return PhasePlan(phases, self.batch_size, self.embedding_lr_scale * embedding_lr_scale)

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "embedding_lr_scale": self.embedding_lr_scale,
                "phases": [{"name": p.name, "iterations": p.iterations, "trainable": p.trainable,
                            "events": [vars(e) for e in p.events]} for p in self.phases]}


def scale_count(n: int, s: float, minimum: int = 1) -> int:
    # round first so that e.g. 200_000 * 0.001 does not ceil to 201
    return max(minimum, math.ceil(round(n * s, 6)))


def lr_at(events: Sequence[WarmupEvent], it: int) -> float:
    """Cubic warmup from 0 to the event peak, then a plateau until the next event."""
    if it < 0:
        raise ValueError("iteration must be non-negative")
    current = None
    for e in sorted(events, key=lambda e: e.start):
        if e.start <= it:
            current = e
    if current is None:
        return 0.0
    progress = (it - current.start) / current.length
    if progress >= 1:
        return current.peak_lr
    return current.peak_lr * progress ** 3


def normal_recipe(batch_size: int = 32) -> PhasePlan:
    events = [WarmupEvent(0, 3e-4), WarmupEvent(200_000, 7e-5), WarmupEvent(400_000, 1.75e-5)]
    return PhasePlan([Phase("all", 500_000, "all", events)], batch_size)


def pretrained_recipe(batch_size: int = 32, phase2_peak: float = 7e-5,
                      phase3_peaks: Sequence[float] = (7e-5, 3e-5, 1.5e-5, 7.5e-6)) -> PhasePlan:
    p1 = Phase("network", 400_000, "all_except_embeddings",
               [WarmupEvent(0, 3e-4), WarmupEvent(200_000, 1.5e-4), WarmupEvent(300_000, 7e-5)])
    p2 = Phase("embeddings", 100_000, "embeddings_only",
               [WarmupEvent(400_000, phase2_peak), WarmupEvent(450_000, phase2_peak)])
    p3 = Phase("finetune", 175_000, "all",
               [WarmupEvent(s, lr) for s, lr in zip((500_000, 550_000, 600_000, 650_000), phase3_peaks)])
    return PhasePlan([p1, p2, p3], batch_size)


@dataclass
class AdamSettings:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def make_batch(samples: Sequence[LineSample], ids: Sequence[int], aug: AugmentationConfig | None,
               rng: np.random.Generator, charset: str = CHARSET):
    images = [samples[i].image for i in ids]
    if aug is not None:
        images = [augment(im, aug, rng) for im in images]
    x, widths = collate(images)
    targets = [encode_text(samples[i].transcript, charset) for i in ids]
    wsi = torch.tensor([samples[i].wsi for i in ids], dtype=torch.long)
    return x, widths, wsi, targets


def evaluate_cer(net: WSNet, samples: Sequence[LineSample], ids: Sequence[int], charset: str = CHARSET,
                 wsi: Sequence[int] | None = None) -> float:
    if not ids:
        return float("nan")
    images = [samples[i].image for i in ids]
    w = list(wsi) if wsi is not None else [samples[i].wsi for i in ids]
    hyps = decode_images(net, images, w if net.conditioned else None, charset=charset)
    return corpus_cer(zip(hyps, (samples[i].transcript for i in ids)))


def train(net: WSNet, samples: Sequence[LineSample], train_ids: Sequence[int], plan: PhasePlan,
          augmentation: AugmentationConfig | None = None, seed: int = 0, charset: str = CHARSET,
          adam: AdamSettings | None = None, eval_ids: Sequence[int] = (), log_path: str | Path | None = None,
          checkpoint_dir: str | Path | None = None, start_iter: int = 0) -> TrainResult:
    """Run ``plan`` on ``net``; embedding rows only move on batches carrying their WSI."""
    adam = adam or AdamSettings()
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    train_ids = np.asarray(train_ids)
    if len(train_ids) == 0:
        raise ValueError("empty training set")

    net_params = net.network_parameters()
    net_opt = torch.optim.Adam(net_params, lr=0.0, betas=adam.betas, eps=adam.eps)
    emb_opt = None
    if net.conditioned:
        # SparseAdam rejects lr=0 at construction; the schedule sets it every step
        emb_opt = torch.optim.SparseAdam(list(net.table.parameters()), lr=1.0, betas=adam.betas, eps=adam.eps)

    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    ckpt_at = {max(1, round(plan.total * k / 10)) for k in range(1, 11)} | set(plan.boundaries)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    result = TrainResult()
    bs = min(plan.batch_size, len(train_ids))
    net.train()
    try:
        for it in range(start_iter, plan.total):
            phase = plan.phase_at(it)
            lr = plan.lr(it)
            ids = rng.choice(train_ids, size=bs, replace=False)
            x, widths, wsi, targets = make_batch(samples, ids, augmentation, rng, charset)
            logits, lengths = net(x, widths, wsi)
            loss = ctc_loss(logits, targets, lengths, reduction="mean")
            if not torch.isfinite(loss):
                if ckpt_dir:
                    save_checkpoint(ckpt_dir / "diverged.pt", net, charset, {"iter": it, "lr": lr})
                raise TrainingDiverged(f"non-finite loss at iteration {it} (lr={lr:.3g}, phase={phase.name})")
            net.zero_grad(set_to_none=True)
            loss.backward()
            if net.conditioned:
                normalize_table_grad(net.table, wsi)
            if phase.trainable in ("all", "all_except_embeddings"):
                for g in net_opt.param_groups:
                    g["lr"] = lr
                net_opt.step()
            if emb_opt is not None and phase.trainable in ("all", "embeddings_only"):
                for g in emb_opt.param_groups:
                    g["lr"] = plan.embedding_lr(it)
                emb_opt.step()

            value = float(loss.detach())
            result.losses.append(value)
            record = {"iter": it + 1, "phase": phase.name, "lr": lr, "loss": value}
            if (it + 1) in ckpt_at:
                if len(eval_ids):
                    record["tst_cer"] = evaluate_cer(net, samples, eval_ids, charset)
                    net.train()
                if ckpt_dir:
                    path = ckpt_dir / f"iter_{it + 1:07d}.pt"
                    save_checkpoint(path, net, charset, {"iter": it + 1})
                    result.checkpoints.append(str(path))
                log.info("iter %d phase %s lr %.3g loss %.4f %s", it + 1, phase.name, lr, value,
                         f"tst_cer {record['tst_cer']:.4f}" if "tst_cer" in record else "")
            result.records.append(record)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file:
            log_file.close()
    net.eval()
    return result
