"""CTC line recognizer with optional writer-conditioned normalization sites."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .glyphs import CHARSET, charset_hash
from .wsb import AdaIN, EmbeddingTable, InitSpec, InstanceNorm

MODES = ("baseline", "single_adain", "all_adain")
BLANK = 0
CHECKPOINT_FORMAT = "wsnet-checkpoint"
CHECKPOINT_VERSION = 1


class CTCAlignmentError(ValueError):
    pass


@dataclass
class NetConfig:
    conv_block_channels: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    conv_layers_per_block: int = 2
    width_subsampling: int = 4
    rnn_branch_scales: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.25])
    rnn_layers_per_branch: int = 2
    rnn_hidden: int = 256
    final_rnn_layers: int = 1
    height: int = 64
    norm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.conv_block_channels) != 4:
            raise ValueError("the convolutional part has exactly 4 blocks")
        if self.width_subsampling != 4:
            raise ValueError("width subsampling is fixed at 4")
        if self.height % 16:
            raise ValueError("line height must be divisible by 16")
        for s in self.rnn_branch_scales:
            f = 1 / s
            if abs(f - round(f)) > 1e-9:
                raise ValueError("branch scales must be reciprocals of integers")

    @property
    def norm_layer_count(self) -> int:
        return 5


def output_length(width: int) -> int:
    return math.ceil(width / 4)


def _masked_pool(x: torch.Tensor, lengths: torch.Tensor, factor: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Width average pooling over valid frames only; x is (B, F, T)."""
    if factor == 1:
        return x, lengths
    mask = (torch.arange(x.shape[-1]) < lengths[:, None]).to(x.dtype).unsqueeze(1)
    num = F.avg_pool1d(x * mask, factor, factor, ceil_mode=True)
    den = F.avg_pool1d(mask, factor, factor, ceil_mode=True)
    return num / den.clamp_min(1e-6), torch.div(lengths + factor - 1, factor, rounding_mode="floor")


class BiLSTM(nn.Module):
    def __init__(self, n_in: int, hidden: int, layers: int):
        super().__init__()
        self.rnn = nn.LSTM(n_in, hidden, num_layers=layers, bidirectional=True, batch_first=True)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        # x is (B, T, F)
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.rnn(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])
        return out


class WSNet(nn.Module):
    """Four conv blocks, three-scale BiLSTM branches, final BiLSTM and a 1-D conv head.

    Normalization sites 0-3 follow the conv blocks, site 4 follows the recurrent
    stack. ``mode`` decides which of them are writer-conditioned.
    """

    def __init__(self, cfg: NetConfig, n_classes: int, mode: str = "baseline",
                 table: EmbeddingTable | None = None, init: InitSpec | None = None, seed: int | None = None):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode != "baseline" and table is None:
            raise ValueError(f"mode {mode!r} needs an embedding table")
        self.cfg, self.mode, self.n_classes = cfg, mode, n_classes
        self.table = table if mode != "baseline" else None
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        if seed is not None:
            torch.manual_seed(seed)

        adain_sites = {"baseline": (), "single_adain": (3,), "all_adain": (0, 1, 2, 3, 4)}[mode]
        self.adain_sites = adain_sites

        def norm(site: int, channels: int) -> nn.Module:
            if site in adain_sites:
                return AdaIN(channels, self.table.ed, cfg.norm_eps, init, gen)
            return InstanceNorm(channels, cfg.norm_eps)

        self.blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        c_in = 1
        for k, c in enumerate(cfg.conv_block_channels):
            convs = nn.ModuleList()
            for j in range(cfg.conv_layers_per_block):
                convs.append(nn.Conv2d(c_in if j == 0 else c, c, 3, padding=1))
            self.blocks.append(convs)
            self.norms.append(norm(k, c))
            c_in = c
        self.width_pool = (1, 2, 2, 1)
        feat = cfg.conv_block_channels[-1] * (cfg.height // 16)
        h = cfg.rnn_hidden
        self.branch_factors = [int(round(1 / s)) for s in cfg.rnn_branch_scales]
        self.branches = nn.ModuleList(BiLSTM(feat, h, cfg.rnn_layers_per_branch) for _ in self.branch_factors)
        self.final_rnn = BiLSTM(2 * h, h, cfg.final_rnn_layers)
        self.norms.append(norm(4, 2 * h))
        self.head = nn.Conv1d(2 * h, n_classes, 3, padding=1)

    @property
    def conditioned(self) -> bool:
        return self.table is not None

    def network_parameters(self) -> list[nn.Parameter]:
        """Every parameter except the writer embeddings."""
        table_ids = {id(p) for p in self.table.parameters()} if self.table is not None else set()
        return [p for p in self.parameters() if id(p) not in table_ids]

    def forward(self, images: torch.Tensor, widths: torch.Tensor, wsi=None,
                embedding: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return per-frame logits (B, T, n_classes) and output lengths ceil(width / 4).

        ``images`` is (B, 1, H, W) with ink > 0 and zero padding.
        """
        if self.conditioned:
            if embedding is None:
                if wsi is None:
                    raise ValueError("writer-conditioned network needs wsi or an explicit embedding")
                embedding = self.table(wsi)
            elif embedding.dim() == 1:
                embedding = embedding.expand(images.shape[0], -1)
        else:
            embedding = None

        x = images
        lengths = torch.as_tensor(widths, dtype=torch.long)
        for k, convs in enumerate(self.blocks):
            mask = (torch.arange(x.shape[-1]) < lengths[:, None]).to(x.dtype).view(x.shape[0], 1, 1, -1)
            for conv in convs:
                x = F.relu(conv(x)) * mask
            f = self.width_pool[k]
            x = F.max_pool2d(x, (2, f), (2, f), ceil_mode=True)
            lengths = torch.div(lengths + f - 1, f, rounding_mode="floor")
            mask = (torch.arange(x.shape[-1]) < lengths[:, None]).to(x.dtype).view(x.shape[0], 1, 1, -1)
            x = self.norms[k](x, mask, embedding)

        b, c, hh, t = x.shape
        seq = x.reshape(b, c * hh, t)
        total = None
        for factor, branch in zip(self.branch_factors, self.branches):
            pooled, plen = _masked_pool(seq, lengths, factor)
            out = branch(pooled.transpose(1, 2), plen)
            if factor > 1:
                out = out.repeat_interleave(factor, dim=1)[:, :t]
            total = out if total is None else total + out
        out = self.final_rnn(total, lengths).transpose(1, 2)
        mask = (torch.arange(t) < lengths[:, None]).to(out.dtype).unsqueeze(1)
        out = self.norms[4](out, mask, embedding)
        logits = self.head(out).transpose(1, 2)
        return logits, lengths


def build_network(cfg: NetConfig, mode: str = "baseline", table: EmbeddingTable | None = None,
                  charset: str = CHARSET, init: InitSpec | None = None, seed: int | None = None) -> WSNet:
    return WSNet(cfg, len(charset) + 1, mode, table, init, seed)


def adain_layers(net: WSNet) -> list[AdaIN]:
    return [m for m in net.norms if isinstance(m, AdaIN)]


# text <-> labels -------------------------------------------------------------

def encode_text(text: str, charset: str = CHARSET) -> list[int]:
    index = {c: i + 1 for i, c in enumerate(charset)}
    try:
        return [index[c] for c in text]
    except KeyError as err:
        raise ValueError(f"character {err.args[0]!r} not in charset") from None


def min_ctc_frames(labels: Sequence[int]) -> int:
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def ctc_loss(logits: torch.Tensor, targets: Sequence[Sequence[int]], lengths: torch.Tensor | None = None,
             reduction: str = "none") -> torch.Tensor:
    """Negative log-likelihood of each target under CTC.

    ``logits`` is (B, T, C) or (T, C) with blank at index 0.
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        targets = [targets]
    b, t, _ = logits.shape
    if lengths is None:
        lengths = torch.full((b,), t, dtype=torch.long)
    for i, tgt in enumerate(targets):
        need = min_ctc_frames(list(tgt))
        if int(lengths[i]) < need:
            raise CTCAlignmentError(f"target of length {len(tgt)} needs {need} frames, got {int(lengths[i])}")
    log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)
    flat = torch.tensor([c for tgt in targets for c in tgt], dtype=torch.long)
    tlen = torch.tensor([len(tgt) for tgt in targets], dtype=torch.long)
    loss = F.ctc_loss(log_probs, flat, lengths, tlen, blank=BLANK, reduction="none", zero_infinity=False)
    if reduction == "mean":
        return loss.mean()
    if reduction == "sum":
        return loss.sum()
    return loss


def greedy_decode(logits, charset: str = CHARSET) -> str:
    """Best-path decoding of (T, C) scores, or of an already-taken argmax path."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    path = arr.argmax(-1) if arr.ndim == 2 else arr
    out = []
    prev = BLANK
    for p in path:
        p = int(p)
        if p != prev and p != BLANK:
            out.append(charset[p - 1])
        prev = p
    return "".join(out)


def levenshtein(a: Sequence, b: Sequence) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hypothesis: str, reference: str) -> float:
    if not reference:
        raise ValueError("per-line CER needs a non-empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


def corpus_cer(pairs: Iterable[tuple[str, str]]) -> float:
    """Total edit distance over total reference length for (hypothesis, reference) pairs."""
    errors = chars = 0
    for hyp, ref in pairs:
        errors += levenshtein(hyp, ref)
        chars += len(ref)
    if chars == 0:
        return 0.0 if errors == 0 else math.inf
    return errors / chars


# batching --------------------------------------------------------------------

def collate(images: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack uint8 line images into (B, 1, H, W_max) ink intensities with zero padding."""
    h = images[0].shape[0]
    widths = torch.tensor([im.shape[1] for im in images], dtype=torch.long)
    batch = torch.zeros(len(images), 1, h, int(widths.max()))
    for i, im in enumerate(images):
        batch[i, 0, :, : im.shape[1]] = torch.from_numpy(1.0 - im.astype(np.float32) / 255.0)
    return batch, widths


@torch.no_grad()
def decode_images(net: WSNet, images: Sequence[np.ndarray], wsi: Sequence[int] | None = None,
                  embedding: torch.Tensor | None = None, charset: str = CHARSET,
                  batch_size: int = 64) -> list[str]:
    was_training = net.training
    net.eval()
    order = sorted(range(len(images)), key=lambda i: images[i].shape[1])
    hyps: list[str] = [""] * len(images)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x, widths = collate([images[i] for i in idx])
        w = torch.tensor([wsi[i] for i in idx]) if wsi is not None else None
        logits, lengths = net(x, widths, w, embedding)
        for j, i in enumerate(idx):
            hyps[i] = greedy_decode(logits[j, : int(lengths[j])], charset)
    net.train(was_training)
    return hyps


# checkpoints -------------------------------------------------------------------

def save_checkpoint(path: str | Path, net: WSNet, charset: str = CHARSET, meta: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "net_config": asdict(net.cfg),
        "mode": net.mode,
        "n_writers": net.table.n_writers if net.table is not None else 0,
        "ed": net.table.ed if net.table is not None else 0,
        "init_mode": net.table.init_mode if net.table is not None else None,
        "charset": charset,
        "charset_hash": charset_hash(charset),
        "state_dict": net.state_dict(),
        "meta": meta or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[WSNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format")
    cfg = NetConfig(**payload["net_config"])
    table = None
    if payload["mode"] != "baseline":
        table = EmbeddingTable(payload["n_writers"], payload["ed"], payload["init_mode"] or "normal")
    net = build_network(cfg, payload["mode"], table, payload["charset"])
    net.load_state_dict(payload["state_dict"])
    return net, payload
