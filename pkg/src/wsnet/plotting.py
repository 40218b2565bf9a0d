"""Figures rendered from report tables only; each plot is a pure function of its CSV."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps regenerated PNGs byte-identical
PNG_METADATA = {"Software": None}


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _save(fig, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_METADATA)
    plt.close(fig)
    return Path(path)


def plot_ed_sweep(csv_path: str | Path, out_path: str | Path) -> Path:
    """TST CER against embedding dimension, one line per (mode, init mode)."""
    series = defaultdict(list)
    baselines = []
    for r in read_csv(csv_path):
        if r["mode"] == "baseline":
            baselines.append(float(r["cer"]))
        else:
            series[(r["mode"], r["init_mode"])].append((int(r["ed"]), float(r["cer"])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (mode, init), pts in sorted(series.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{mode} ({init})")
    for cer in baselines:
        ax.axhline(cer, color="0.4", linestyle="--", label="baseline")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("embedding dimension")
    ax.set_ylabel("TST CER")
    if series or baselines:
        ax.legend(fontsize=8)
    return _save(fig, out_path)


def plot_cluster_cer(csv_path: str | Path, out_path: str | Path) -> Path:
    """Per-cluster CER curves, one line per run and split."""
    series = defaultdict(list)
    for r in read_csv(csv_path):
        series[(r["run"], r["split"])].append((int(r["cluster"]), float(r["cer"])))
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    labels = sorted({c for pts in series.values() for c, _ in pts})
    pos = {c: i for i, c in enumerate(labels)}
    for (run, split), pts in sorted(series.items()):
        pts.sort()
        ax.plot([pos[c] for c, _ in pts], [v for _, v in pts], marker="o", label=f"{run} {split}")
    ax.set_xticks(range(len(labels)), [str(c) for c in labels])
    ax.set_xlabel("writer cluster")
    ax.set_ylabel("CER")
    if series:
        ax.legend(fontsize=7)
    return _save(fig, out_path)


def plot_adaptation_boxes(csv_path: str | Path, out_path: str | Path) -> Path:
    """Box plots of per-writer mean CER reductions for every method and adaptation cluster size."""
    groups = defaultdict(list)
    for r in read_csv(csv_path):
        groups[(r["setup"], r["method"], int(r["cluster_size"]))].append(float(r["mean_reduction"]))
    methods = sorted({(s, m) for s, m, _ in groups})
    sizes = sorted({c for _, _, c in groups})
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(sizes) * max(1, len(methods))), 3.8))
    width = 0.8 / max(1, len(methods))
    for j, (setup, method) in enumerate(methods):
        data, where = [], []
        for i, size in enumerate(sizes):
            if (setup, method, size) in groups:
                data.append(groups[(setup, method, size)])
                where.append(i + (j - (len(methods) - 1) / 2) * width)
        bp = ax.boxplot(data, positions=where, widths=width * 0.9, patch_artist=True)
        color = plt.cm.tab10(j)
        for patch in bp["boxes"]:
            patch.set_facecolor(color)
        ax.plot([], [], color=color, linewidth=6, label=f"{method} ({setup})")
    ax.axhline(0, color="0.5", linewidth=0.8)
    ax.set_xticks(range(len(sizes)), [str(s) for s in sizes])
    ax.set_xlabel("adaptation lines")
    ax.set_ylabel("CER reduction")
    if methods:
        ax.legend(fontsize=8)
    return _save(fig, out_path)
