"""Writer Style Block: embedding table, adaptive instance normalization and its initialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

SUPPORTED_ED = (16, 32, 64, 128, 256, 512)
TABLE_MAGIC = b"WSBTABLE 1\n"


class UnknownWriterError(IndexError):
    pass


@dataclass
class InitSpec:
    tau: float = 0.174
    target_scale_std: float = 0.1
    # "corrected": U(-tau/sqrt(ED), tau/sqrt(ED)); "printed": U(-sqrt(ED)*tau, sqrt(ED)*tau)
    bound: str = "corrected"

    def limit(self, ed: int) -> float:
        if self.bound == "corrected":
            return self.tau / math.sqrt(ed)
        if self.bound == "printed":
            return math.sqrt(ed) * self.tau
        raise ValueError(f"unknown init bound {self.bound!r}")


def masked_moments(x: torch.Tensor, mask: torch.Tensor | None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample, per-channel mean and population std over the spatial axes of ``x``.

    ``x`` is (B, C, *spatial); ``mask`` broadcasts to it with 1 on valid positions.
    """
    dims = tuple(range(2, x.dim()))
    if mask is None:
        mu = x.mean(dim=dims, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=dims, keepdim=True)
    else:
        mask = mask.to(x.dtype)
        count = (mask.expand_as(x)).sum(dim=dims, keepdim=True).clamp_min(1.0)
        mu = (x * mask).sum(dim=dims, keepdim=True) / count
        var = (((x - mu) * mask) ** 2).sum(dim=dims, keepdim=True) / count
    # clamp keeps sqrt differentiable on constant channels
    return mu, var.clamp_min(1e-12).sqrt()


class InstanceNorm(nn.Module):
    """Instance normalization with a learned per-channel affine; honours padding masks."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, mask=None, embedding=None):
        mu, sigma = masked_moments(x, mask)
        shape = (1, -1) + (1,) * (x.dim() - 2)
        y = self.weight.view(shape) * (x - mu) / (sigma + self.eps) + self.bias.view(shape)
        return y if mask is None else y * mask


class AdaIN(nn.Module):
    """Adaptive instance normalization with scales and offsets projected from a writer embedding."""

    conditioned = True

    def __init__(self, channels: int, ed: int, eps: float = 1e-5, init: InitSpec | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels, self.ed, self.eps = channels, ed, eps
        self.weight_gamma = nn.Parameter(torch.empty(channels, ed))
        self.weight_beta = nn.Parameter(torch.empty(channels, ed))
        self.bias_gamma = nn.Parameter(torch.ones(channels))
        self.bias_beta = nn.Parameter(torch.zeros(channels))
        self.reset_parameters(init or InitSpec(), generator)

    def reset_parameters(self, init: InitSpec, generator: torch.Generator | None = None) -> None:
        lim = init.limit(self.ed)
        with torch.no_grad():
            self.weight_gamma.uniform_(-lim, lim, generator=generator)
            self.weight_beta.uniform_(-lim, lim, generator=generator)
            self.bias_gamma.fill_(1.0)
            self.bias_beta.fill_(0.0)

    def scales_offsets(self, e: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if e.shape[-1] != self.ed:
            raise ValueError(f"embedding dimension {e.shape[-1]} != {self.ed}")
        return e @ self.weight_gamma.T + self.bias_gamma, e @ self.weight_beta.T + self.bias_beta

    def forward(self, x, mask=None, embedding=None):
        if embedding is None:
            raise ValueError("AdaIN needs a writer embedding")
        if x.shape[1] != self.channels:
            raise ValueError(f"input has {x.shape[1]} channels, expected {self.channels}")
        gamma, beta = self.scales_offsets(embedding)
        shape = gamma.shape + (1,) * (x.dim() - 2)
        mu, sigma = masked_moments(x, mask)
        y = gamma.view(shape) * (x - mu) / (sigma + self.eps) + beta.view(shape)
        return y if mask is None else y * mask


def adain_forward(x: torch.Tensor, e: torch.Tensor, layer: AdaIN, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Apply ``layer`` to feature map ``x`` (B, C, ...) with one embedding per sample (B, ED) or shared (ED,)."""
    if e.dim() == 1:
        e = e.expand(x.shape[0], -1)
    return layer(x, mask, e)


def init_adain(channels: int, ed: int, spec: InitSpec | None = None, seed: int | None = None) -> AdaIN:
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    return AdaIN(channels, ed, init=spec, generator=gen)


class EmbeddingTable(nn.Module):
    """Writer style embeddings, one row per WSI. Gradients are sparse so untouched rows stay untouched."""

    def __init__(self, n_writers: int, ed: int, init_mode: str = "normal"):
        super().__init__()
        if n_writers < 1 or ed < 1:
            raise ValueError("table needs at least one writer and ED >= 1")
        self.init_mode = init_mode
        self.embedding = nn.Embedding(n_writers, ed, sparse=True)

    @property
    def n_writers(self) -> int:
        return self.embedding.num_embeddings

    @property
    def ed(self) -> int:
        return self.embedding.embedding_dim

    @property
    def weight(self) -> nn.Parameter:
        return self.embedding.weight

    def forward(self, wsi: torch.Tensor) -> torch.Tensor:
        wsi = torch.as_tensor(wsi, dtype=torch.long)
        if wsi.numel() and (int(wsi.min()) < 0 or int(wsi.max()) >= self.n_writers):
            raise UnknownWriterError(f"WSI outside [0, {self.n_writers})")
        return self.embedding(wsi)


def lookup(table: EmbeddingTable, wsi: int) -> torch.Tensor:
    return table(torch.tensor([wsi]))[0]


def init_embeddings(n_writers: int, ed: int, mode: str = "normal", pretrained: np.ndarray | None = None,
                    seed: int | None = None) -> EmbeddingTable:
    table = EmbeddingTable(n_writers, ed, mode)
    with torch.no_grad():
        if mode == "normal":
            gen = torch.Generator().manual_seed(seed) if seed is not None else None
            table.weight.normal_(0.0, 1.0, generator=gen)
        elif mode == "pretrained":
            if pretrained is None:
                raise ValueError("pretrained mode needs source embeddings")
            src = torch.as_tensor(np.asarray(pretrained), dtype=torch.float32)
            if src.shape != (n_writers, ed):
                raise ValueError(f"pretrained source has shape {tuple(src.shape)}, expected {(n_writers, ed)}")
            table.weight.copy_(src)
        else:
            raise ValueError(f"unknown init mode {mode!r}")
    return table


def normalize_embedding_gradients(batch_wsi: Sequence[int], raw_grads) -> dict[int, torch.Tensor]:
    """Per-writer gradient as the mean of that writer's per-sample gradients in the batch."""
    out: dict[int, torch.Tensor] = {}
    counts: dict[int, int] = {}
    for w, g in zip(batch_wsi, raw_grads):
        w = int(w)
        g = torch.as_tensor(g)
        out[w] = out[w] + g if w in out else g.clone()
        counts[w] = counts.get(w, 0) + 1
    return {w: out[w] / counts[w] for w in out}


def normalize_table_grad(table: EmbeddingTable, batch_wsi: torch.Tensor) -> None:
    """In-place version for the sparse gradient left on ``table`` by a backward pass."""
    grad = table.weight.grad
    if grad is None:
        return
    counts = torch.bincount(torch.as_tensor(batch_wsi, dtype=torch.long), minlength=table.n_writers)
    counts = counts.to(grad.dtype)
    if grad.is_sparse:
        grad = grad.coalesce()
        idx = grad.indices()[0]
        values = grad.values() / counts[idx].clamp_min(1.0).unsqueeze(1)
        table.weight.grad = torch.sparse_coo_tensor(grad.indices(), values, grad.shape,
                                                     check_invariants=False).coalesce()
    else:
        grad.div_(counts.clamp_min(1.0).unsqueeze(1))


# table file: magic line, JSON header line, row-major float32 payload -------------

def save_table(path: str | Path, rows: np.ndarray | torch.Tensor, init_mode: str, charset_hash: str,
               extra: dict | None = None) -> None:
    rows = rows.detach().cpu().numpy() if isinstance(rows, torch.Tensor) else np.asarray(rows)
    rows = np.ascontiguousarray(rows, dtype="<f4")
    n, ed = rows.shape
    header = {"n": n, "ed": ed, "init_mode": init_mode, "charset_hash": charset_hash, **(extra or {})}
    with open(path, "wb") as f:
        f.write(TABLE_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(rows.tobytes(order="C"))


def load_table(path: str | Path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as f:
        if f.readline() != TABLE_MAGIC:
            raise ValueError(f"{path}: not an embedding table file")
        header = json.loads(f.readline())
        payload = f.read()
    rows = np.frombuffer(payload, dtype="<f4")
    if rows.size != header["n"] * header["ed"]:
        raise ValueError(f"{path}: payload size does not match header")
    return rows.reshape(header["n"], header["ed"]).astype(np.float32), header
