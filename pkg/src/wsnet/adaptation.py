"""Adapting to unseen writers: embedding selection and optimization, finetuning, reporting."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans

from .dataset import AugmentationConfig, LineSample, augment
from .glyphs import CHARSET
from .recognizer import WSNet, collate, corpus_cer, ctc_loss, decode_images, encode_text
from .training import make_batch

log = logging.getLogger(__name__)

CLUSTER_SIZES = (16, 32, 64, 128, 256)
METHODS = ("select", "optimize", "finetune", "encode")


def cer_reduction(adapted: float, baseline: float) -> float:
    """Relative change of test CER against the baseline; negative is an improvement."""
    if baseline <= 0:
        raise ZeroDivisionError("CER reduction is undefined for a zero baseline CER")
    return (adapted - baseline) / baseline


def lines_cer(net: WSNet, lines: Sequence[LineSample], embedding: torch.Tensor | np.ndarray | None = None,
              wsi: Sequence[int] | None = None, charset: str = CHARSET) -> float:
    if embedding is not None:
        embedding = torch.as_tensor(np.asarray(embedding), dtype=torch.float32)
    images = [s.image for s in lines]
    hyps = decode_images(net, images, wsi if net.conditioned else None,
                         embedding if net.conditioned else None, charset)
    return corpus_cer(zip(hyps, (s.transcript for s in lines)))


@dataclass
class AdaptationRun:
    writer: int
    run: int
    clusters: dict[int, list[int]]
    test_ids: list[int]

    def __post_init__(self):
        sizes = sorted(self.clusters)
        for a, b in zip(sizes, sizes[1:]):
            if not set(self.clusters[a]) < set(self.clusters[b]):
                raise ValueError("adaptation clusters must be nested strict subsets")
        if set(self.clusters[sizes[-1]]) & set(self.test_ids):
            raise ValueError("adaptation and test lines overlap")


def make_runs(writer: int, n_lines: int, runs: int, cluster_sizes: Sequence[int] = CLUSTER_SIZES,
              test_size: int = 256, seed: int = 0) -> list[AdaptationRun]:
    """Random nested adaptation clusters plus disjoint test lines, drawn independently per run."""
    largest = max(cluster_sizes)
    if n_lines < largest + test_size:
        raise ValueError(f"writer {writer} has {n_lines} lines, needs {largest + test_size}")
    rng = np.random.default_rng([seed, writer])
    out = []
    for r in range(runs):
        perm = [int(i) for i in rng.permutation(n_lines)]
        pool = perm[:largest]
        clusters = {s: pool[:s] for s in sorted(cluster_sizes)}
        out.append(AdaptationRun(writer, r, clusters, perm[largest:largest + test_size]))
    return out


# selection ----------------------------------------------------------------------

def select_embedding(net: WSNet, table: np.ndarray, lines: Sequence[LineSample], k_clusters: int = 50,
                     seed: int = 0, charset: str = CHARSET) -> tuple[np.ndarray, dict]:
    """k-means the table, draw one random row per cluster, keep the row with the lowest CER on ``lines``."""
    if not lines:
        raise ValueError("empty adaptation set")
    table = np.asarray(table, dtype=np.float32)
    k = min(k_clusters, len(table))
    labels = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit_predict(table)
    rng = np.random.default_rng(seed)
    candidates = []
    for c in range(k):
        members = np.flatnonzero(labels == c)
        candidates.append(int(rng.choice(members)))
    cers = [lines_cer(net, lines, table[i], charset=charset) for i in candidates]
    best = int(np.argmin(cers))
    return table[candidates[best]].copy(), {"candidates": candidates, "cers": cers, "chosen": candidates[best],
                                            "cer": cers[best]}


# optimization ---------------------------------------------------------------------

def _adaptation_loss(net: WSNet, batches, e: torch.Tensor) -> torch.Tensor:
    total = 0.0
    count = 0
    for x, widths, targets in batches:
        logits, lengths = net(x, widths, embedding=e)
        total = total + ctc_loss(logits, targets, lengths, reduction="sum")
        count += len(targets)
    return total / count


def optimize_embedding(net: WSNet, table: np.ndarray, lines: Sequence[LineSample], iterations: int = 150,
                       init: np.ndarray | None = None, augmentation: AugmentationConfig | None = None,
                       seed: int = 0, history_size: int = 10, batch_size: int = 128,
                       charset: str = CHARSET) -> tuple[np.ndarray, dict]:
    """LBFGS on the CTC loss of ``lines`` w.r.t. the embedding only; starts from the table mean.

    Augmentation is drawn once up front so that the objective stays deterministic.
    """
    if not lines:
        raise ValueError("empty adaptation set")
    start = np.asarray(table, dtype=np.float32).mean(0) if init is None else np.asarray(init, np.float32)
    if iterations == 0:
        return start.copy(), {"initial_loss": None, "best_loss": None, "evaluations": 0, "flagged": False}

    rng = np.random.default_rng(seed)
    images = [augment(s.image, augmentation, rng) if augmentation else s.image for s in lines]
    order = sorted(range(len(lines)), key=lambda i: images[i].shape[1])
    batches = []
    for b in range(0, len(order), batch_size):
        idx = order[b:b + batch_size]
        x, widths = collate([images[i] for i in idx])
        batches.append((x, widths, [encode_text(lines[i].transcript, charset) for i in idx]))

    was_training = net.training
    net.eval()
    flags = [p.requires_grad for p in net.parameters()]
    for p in net.parameters():
        p.requires_grad_(False)
    e = torch.tensor(start, requires_grad=True)
    opt = torch.optim.LBFGS([e], lr=1.0, max_iter=iterations, max_eval=int(iterations * 1.25) + 1,
                            history_size=history_size, line_search_fn="strong_wolfe",
                            tolerance_grad=1e-9, tolerance_change=1e-12)
    state = {"best_loss": float("inf"), "best": start.copy(), "evaluations": 0, "initial_loss": None}

    def closure():
        opt.zero_grad()
        loss = _adaptation_loss(net, batches, e)
        loss.backward()
        value = float(loss.detach())
        state["evaluations"] += 1
        if state["initial_loss"] is None:
            state["initial_loss"] = value
        if np.isfinite(value) and value < state["best_loss"]:
            state["best_loss"] = value
            state["best"] = e.detach().numpy().copy()
        return loss

    flagged = False
    try:
        opt.step(closure)
    except RuntimeError as err:  # line search breakdown
        log.warning("LBFGS stopped early: %s", err)
        flagged = True
    finally:
        for p, f in zip(net.parameters(), flags):
            p.requires_grad_(f)
        net.train(was_training)
    final = e.detach().numpy()
    if not np.all(np.isfinite(final)):
        flagged = True
    n_iter = opt.state[opt._params[0]].get("n_iter", 0)
    return state["best"], {"initial_loss": state["initial_loss"], "best_loss": state["best_loss"],
                           "evaluations": state["evaluations"], "iterations": n_iter, "flagged": flagged}


# finetuning baseline ---------------------------------------------------------------

def kfold(n: int, folds: int, seed: int = 0) -> list[list[int]]:
    if n < folds:
        raise ValueError(f"need at least {folds} lines for {folds}-fold cross-validation")
    perm = np.random.default_rng(seed).permutation(n)
    return [sorted(int(i) for i in perm[f::folds]) for f in range(folds)]


def _finetune_path(net: WSNet, lines: Sequence[LineSample], counts: Sequence[int], lr: float, batch_size: int,
                   augmentation: AugmentationConfig | None, seed: int, charset: str,
                   val: Sequence[LineSample] = ()) -> tuple[WSNet, dict[int, float]]:
    """Finetune a copy of ``net``, validating after each iteration count in ``counts``."""
    model = copy.deepcopy(net)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.network_parameters(), lr=lr)
    done = 0
    scores: dict[int, float] = {}
    for target in sorted(counts):
        model.train()
        while done < target:
            ids = rng.choice(len(lines), size=min(batch_size, len(lines)), replace=False)
            x, widths, wsi, targets = make_batch(lines, ids, augmentation, rng, charset)
            logits, lengths = model(x, widths, wsi)
            loss = ctc_loss(logits, targets, lengths, reduction="mean")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            done += 1
        if val:
            scores[target] = lines_cer(model, val, wsi=[s.wsi for s in val], charset=charset)
    model.eval()
    return model, scores


def finetune_baseline(net: WSNet, lines: Sequence[LineSample], grid: Sequence[int] = (0, 50, 100, 200, 400, 800),
                      folds: int = 4, lr: float = 1e-4, batch_size: int = 16,
                      augmentation: AugmentationConfig | None = None, seed: int = 0,
                      charset: str = CHARSET) -> tuple[WSNet, dict]:
    """Pick the finetuning length by k-fold cross-validation, then finetune on every line."""
    grid = sorted(set(int(g) for g in grid))
    split = kfold(len(lines), folds, seed)
    per_count = {g: [] for g in grid}
    for f, val_ids in enumerate(split):
        val_set = set(val_ids)
        trn = [lines[i] for i in range(len(lines)) if i not in val_set]
        val = [lines[i] for i in val_ids]
        _, scores = _finetune_path(net, trn, grid, lr, batch_size, augmentation, seed + 1 + f, charset, val)
        for g in grid:
            per_count[g].append(scores[g])
    mean_cer = {g: float(np.mean(v)) for g, v in per_count.items()}
    chosen = min(grid, key=lambda g: (mean_cer[g], g))
    if chosen == 0:
        model = copy.deepcopy(net)
    else:
        model, _ = _finetune_path(net, lines, [chosen], lr, batch_size, augmentation, seed, charset)
    return model, {"folds": split, "validation_cer": mean_cer, "chosen": chosen}


# suite ------------------------------------------------------------------------------

@dataclass
class AdaptationSettings:
    runs_per_writer: int = 23
    cluster_sizes: tuple[int, ...] = CLUSTER_SIZES
    test_size: int = 256
    methods: tuple[str, ...] = ("select", "optimize", "finetune")
    k_clusters: int = 50
    lbfgs_iterations: int = 150
    lbfgs_history: int = 10
    finetune_grid: tuple[int, ...] = (0, 50, 100, 200, 400, 800)
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 16
    folds: int = 4
    encoder_k: int = 32
    seed: int = 0


@dataclass
class AdaptationResult:
    writer: int
    run: int
    method: str
    setup: str
    cluster_size: int
    adapted_cer: float
    baseline_cer: float
    reduction: float = field(init=False)

    def __post_init__(self):
        self.reduction = cer_reduction(self.adapted_cer, self.baseline_cer)

    def row(self) -> dict:
        return {"writer": self.writer, "run": self.run, "method": self.method, "setup": self.setup,
                "cluster_size": self.cluster_size, "A": self.adapted_cer, "B": self.baseline_cer,
                "reduction": self.reduction}


def run_adaptation_suite(writers: dict[int, Sequence[LineSample]], baseline: WSNet,
                         conditioned: WSNet | None, table: np.ndarray | None, settings: AdaptationSettings,
                         setup: str = "single_adain", augmentation: AugmentationConfig | None = None,
                         encoder=None, charset: str = CHARSET) -> list[AdaptationResult]:
    """Every (writer, run, method, cluster size) combination; writers lacking lines are skipped."""
    from .style_encoder import extract_writer_embedding

    results: list[AdaptationResult] = []
    for w, lines in sorted(writers.items()):
        try:
            runs = make_runs(w, len(lines), settings.runs_per_writer, settings.cluster_sizes,
                             settings.test_size, settings.seed)
        except ValueError as err:
            log.warning("skipping writer %d: %s", w, err)
            continue
        for run in runs:
            test = [lines[i] for i in run.test_ids]
            b = lines_cer(baseline, test, wsi=[0] * len(test), charset=charset)
            if b == 0:
                log.warning("writer %d run %d: baseline CER is 0, reduction undefined; skipped", w, run.run)
                continue
            run_seed = settings.seed * 1000 + run.run
            for size in sorted(run.clusters):
                adapt = [lines[i] for i in run.clusters[size]]
                for method in settings.methods:
                    if method == "finetune":
                        model, _ = finetune_baseline(baseline, adapt, settings.finetune_grid, settings.folds,
                                                     settings.finetune_lr, settings.finetune_batch_size,
                                                     augmentation, run_seed, charset)
                        a = lines_cer(model, test, wsi=[0] * len(test), charset=charset)
                    else:
                        if conditioned is None or table is None:
                            raise ValueError(f"method {method!r} needs a conditioned network and its table")
                        if method == "select":
                            e, _ = select_embedding(conditioned, table, adapt, settings.k_clusters, run_seed, charset)
                        elif method == "optimize":
                            e, _ = optimize_embedding(conditioned, table, adapt, settings.lbfgs_iterations,
                                                      augmentation=augmentation, seed=run_seed,
                                                      history_size=settings.lbfgs_history, charset=charset)
                        elif method == "encode":
                            if encoder is None:
                                raise ValueError("method 'encode' needs a style encoder")
                            e = extract_writer_embedding(encoder, [s.image for s in adapt], settings.encoder_k,
                                                         np.random.default_rng(run_seed))
                        else:
                            raise ValueError(f"unknown method {method!r}")
                        a = lines_cer(conditioned, test, e, charset=charset)
                    results.append(AdaptationResult(w, run.run, method, setup, size, a, b))
                    log.info("writer %d run %d %s size %d: A=%.4f B=%.4f", w, run.run, method, size, a, b)
    return results


def summarize(results: Sequence[AdaptationResult]) -> list[dict]:
    """Per-writer mean reduction over runs, then quartiles across writers per (setup, method, size)."""
    per_writer: dict[tuple, list[float]] = {}
    for r in results:
        per_writer.setdefault((r.setup, r.method, r.cluster_size, r.writer), []).append(r.reduction)
    groups: dict[tuple, list[float]] = {}
    for (setup, method, size, _), vals in sorted(per_writer.items()):
        groups.setdefault((setup, method, size), []).append(float(np.mean(vals)))
    rows = []
    for (setup, method, size), vals in sorted(groups.items()):
        q = np.percentile(vals, [0, 25, 50, 75, 100])
        rows.append({"setup": setup, "method": method, "cluster_size": size, "writers": len(vals),
                     "mean": float(np.mean(vals)), "min": q[0], "q1": q[1], "median": q[2], "q3": q[3],
                     "max": q[4]})
    return rows


def writer_means(results: Sequence[AdaptationResult]) -> list[dict]:
    per_writer: dict[tuple, list[float]] = {}
    for r in results:
        per_writer.setdefault((r.setup, r.method, r.cluster_size, r.writer), []).append(r.reduction)
    return [{"setup": k[0], "method": k[1], "cluster_size": k[2], "writer": k[3], "runs": len(v),
             "mean_reduction": float(np.mean(v))} for k, v in sorted(per_writer.items())]


def shuffle_sensitivity(net: WSNet, samples: Sequence[LineSample], ids: Sequence[int], seed: int = 0,
                        permutation: Sequence[int] | None = None, charset: str = CHARSET) -> dict:
    """CER with true WSI versus WSI randomly permuted across the test set."""
    lines = [samples[i] for i in ids]
    true_wsi = [s.wsi for s in lines]
    perm = np.random.default_rng(seed).permutation(len(lines)) if permutation is None else np.asarray(permutation)
    shuffled = [true_wsi[int(j)] for j in perm]
    cer_true = lines_cer(net, lines, wsi=true_wsi, charset=charset)
    cer_shuffled = lines_cer(net, lines, wsi=shuffled, charset=charset)
    if cer_true == 0:
        ratio = 1.0 if cer_shuffled == 0 else float("inf")
    else:
        ratio = cer_shuffled / cer_true
    return {"cer_true": cer_true, "cer_shuffled": cer_shuffled, "ratio": ratio}
