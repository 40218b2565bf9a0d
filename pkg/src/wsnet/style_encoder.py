"""Contrastively trained writer style encoder and writer embedding extraction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import AugmentationConfig, LineSample, augment
from .recognizer import collate

log = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    conv_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 512])
    attention_blocks: int = 3
    attention_heads: int = 4
    attention_width: int = 512
    ed: int = 32
    height: int = 64

    def __post_init__(self):
        if len(self.conv_channels) != 4:
            raise ValueError("the encoder has four convolutional layers")
        if self.height % 16:
            raise ValueError("line height must be divisible by 16")


@dataclass
class EncoderTrainConfig:
    iterations: int = 20_000
    batch_size: int = 180
    lr: float = 2e-4
    weight_decay: float = 1e-2
    writers_per_batch: int = 30
    tau: float = 0.15
    augmentation_strength: float = 1.5


def sinusoid_positions(length: int, width: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, width, 2, dtype=torch.float32) * (-math.log(10_000.0) / width))
    pe = torch.zeros(length, width)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : width // 2]
    return pe


class StyleEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.convs = nn.ModuleList()
        c_in = 1
        for c in cfg.conv_channels:
            self.convs.append(nn.Conv2d(c_in, c, 3, padding=1))
            c_in = c
        self.width_pool = (2, 2, 1, 1)
        self.to_width = (nn.Identity() if c_in == cfg.attention_width
                         else nn.Linear(c_in, cfg.attention_width))
        layer = nn.TransformerEncoderLayer(cfg.attention_width, cfg.attention_heads,
                                           dim_feedforward=2 * cfg.attention_width, dropout=0.0,
                                           batch_first=True)
        self.attention = nn.TransformerEncoder(layer, cfg.attention_blocks, enable_nested_tensor=False)
        self.to_ed = nn.Linear(cfg.attention_width, cfg.ed)

    def forward(self, images: torch.Tensor, widths: torch.Tensor) -> torch.Tensor:
        x = images
        lengths = torch.as_tensor(widths, dtype=torch.long)
        for conv, f in zip(self.convs, self.width_pool):
            mask = (torch.arange(x.shape[-1]) < lengths[:, None]).to(x.dtype).view(x.shape[0], 1, 1, -1)
            x = F.relu(conv(x)) * mask
            x = F.max_pool2d(x, (2, f), (2, f), ceil_mode=True)
            lengths = torch.div(lengths + f - 1, f, rounding_mode="floor")
        x = x.mean(dim=2).transpose(1, 2)  # (B, T, C)
        t = x.shape[1]
        valid = torch.arange(t) < lengths[:, None]
        x = self.to_width(x) + sinusoid_positions(t, self.cfg.attention_width)
        x = self.attention(x, src_key_padding_mask=~valid)
        x = self.to_ed(x)
        w = valid.to(x.dtype).unsqueeze(-1)
        pooled = (x * w).sum(1) / w.sum(1)
        return F.normalize(pooled, dim=-1)


@torch.no_grad()
def encode_images(encoder: StyleEncoder, images: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    out = np.zeros((len(images), encoder.cfg.ed), dtype=np.float32)
    order = sorted(range(len(images)), key=lambda i: images[i].shape[1])
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, widths = collate([images[i] for i in idx])
        out[idx] = encoder(x, widths).numpy()
    encoder.train(was_training)
    return out


def encode(encoder: StyleEncoder, image: np.ndarray) -> np.ndarray:
    return encode_images(encoder, [image])[0]


def nt_xent_pair(q, p, negatives, tau: float = 0.15) -> torch.Tensor:
    """Contrastive loss of one positive pair (q, p) against negatives n_j."""
    q, p = torch.as_tensor(q, dtype=torch.float64), torch.as_tensor(p, dtype=torch.float64)
    negatives = torch.as_tensor(np.asarray(negatives, dtype=np.float64)).reshape(-1, q.shape[-1])
    pos = (q @ p) / tau
    logits = torch.cat([negatives @ q / tau, pos.reshape(1)])
    return torch.logsumexp(logits, 0) - pos


def batch_loss(embeddings: torch.Tensor, labels, tau: float = 0.15) -> torch.Tensor:
    """Mean NT-Xent over every ordered same-writer pair; negatives are all other-writer batch items."""
    labels = torch.as_tensor(labels)
    sim = embeddings @ embeddings.T / tau
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    positive = same & ~eye
    if not positive.any():
        raise ValueError("batch has no positive pair")
    neg_lse = torch.logsumexp(sim.masked_fill(same, float("-inf")), dim=1, keepdim=True)
    pair_loss = torch.logaddexp(neg_lse.expand_as(sim), sim) - sim
    return pair_loss[positive].mean()


def aggregate_index(sim: np.ndarray) -> int:
    """Index with the largest sum of above-average similarities; ties go to the lowest index."""
    sim = np.asarray(sim, dtype=np.float64)
    k = sim.shape[0]
    if k < 2:
        raise ValueError("aggregation needs at least two embeddings")
    iu = np.triu_indices(k, 1)
    mean = sim[iu].mean()
    above = (sim > mean) & ~np.eye(k, dtype=bool)
    scores = np.where(above, sim, 0.0).sum(axis=1)
    return int(np.argmax(scores))


def aggregate(embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.asarray(embeddings)
    return embeddings[aggregate_index(embeddings @ embeddings.T)]


def extract_writer_embedding(encoder: StyleEncoder, images: Sequence[np.ndarray], k: int = 32,
                             rng: np.random.Generator | None = None) -> np.ndarray:
    """Encode up to ``k`` distinct random lines of one writer (no augmentation) and aggregate."""
    if not images:
        raise ValueError("writer has no lines")
    rng = rng or np.random.default_rng(0)
    pick = rng.choice(len(images), size=min(k, len(images)), replace=False)
    q = encode_images(encoder, [images[i] for i in pick])
    if len(q) == 1:
        return q[0]
    return aggregate(q)


def extract_table(encoder: StyleEncoder, samples: Sequence[LineSample], ids_by_writer: dict[int, list[int]],
                  n_writers: int, k: int = 32, seed: int = 0) -> np.ndarray:
    """One aggregated embedding per WSI in order; writers without lines get a random unit vector."""
    rng = np.random.default_rng(seed)
    table = np.zeros((n_writers, encoder.cfg.ed), dtype=np.float32)
    for w in range(n_writers):
        ids = ids_by_writer.get(w, [])
        if ids:
            table[w] = extract_writer_embedding(encoder, [samples[i].image for i in ids], k, rng)
        else:
            v = rng.normal(size=encoder.cfg.ed)
            table[w] = v / np.linalg.norm(v)
    return table


def sample_writer_batch(ids_by_writer: dict[int, list[int]], batch_size: int, writers_per_batch: int,
                        rng: np.random.Generator) -> list[int]:
    """Pick writers, then ceil(batch / writers) lines from each, so every writer has positives.

    The batch may exceed ``batch_size`` by less than one writer's share.
    """
    eligible = sorted(w for w, ids in ids_by_writer.items() if len(ids) >= 2)
    if not eligible:
        raise ValueError("need writers with at least two lines")
    n_w = min(writers_per_batch, len(eligible))
    per = math.ceil(batch_size / n_w)
    writers = rng.choice(eligible, size=n_w, replace=False)
    batch: list[int] = []
    for w in writers:
        ids = ids_by_writer[int(w)]
        batch.extend(int(i) for i in rng.choice(ids, size=per, replace=len(ids) < per))
    return batch


def train_encoder(samples: Sequence[LineSample], ids_by_writer: dict[int, list[int]], cfg: EncoderConfig,
                  train_cfg: EncoderTrainConfig, augmentation: AugmentationConfig | None = None,
                  seed: int = 0) -> tuple[StyleEncoder, list[float]]:
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    encoder = StyleEncoder(cfg)
    opt = torch.optim.AdamW(encoder.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    aug = (augmentation or AugmentationConfig()).stronger(train_cfg.augmentation_strength, patches=False)
    losses = []
    encoder.train()
    for it in range(train_cfg.iterations):
        ids = sample_writer_batch(ids_by_writer, train_cfg.batch_size, train_cfg.writers_per_batch, rng)
        x, widths = collate([augment(samples[i].image, aug, rng) for i in ids])
        labels = torch.tensor([samples[i].wsi for i in ids])
        loss = batch_loss(encoder(x, widths), labels, train_cfg.tau)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if (it + 1) % max(1, train_cfg.iterations // 10) == 0:
            log.info("encoder iter %d loss %.4f", it + 1, losses[-1])
    encoder.eval()
    return encoder, losses


def separation(encoder: StyleEncoder, samples: Sequence[LineSample], ids_by_writer: dict[int, list[int]],
               per_writer: int = 16, seed: int = 0) -> tuple[float, float]:
    """Mean cosine similarity of same-writer pairs and of cross-writer pairs."""
    rng = np.random.default_rng(seed)
    ids, labels = [], []
    for w, lines in sorted(ids_by_writer.items()):
        pick = rng.choice(lines, size=min(per_writer, len(lines)), replace=False)
        ids.extend(int(i) for i in pick)
        labels.extend([w] * len(pick))
    q = encode_images(encoder, [samples[i].image for i in ids])
    sim = q @ q.T
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())
