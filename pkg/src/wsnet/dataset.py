"""Synthetic multi-writer line corpus, cluster partitioning, augmentation and manifest I/O."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image, ImageDraw

from .glyphs import AMBIGUOUS_PAIRS, ASCENDER, CHARSET, glyph

log = logging.getLogger(__name__)

CLUSTER_THRESHOLDS = (1, 22, 55, 110, 225, 550, 1100)
CLUSTER_LABELS = (1, 20, 50, 100, 200, 500, 1000)
CLUSTER_HOLDOUT = {1: 0, 20: 2, 50: 5, 100: 10, 200: 25, 500: 50, 1000: 100}

AMBIGUITY_CHOICES = ("canonical", "swapped", "merged")
AMBIGUITY_PROBS = (0.45, 0.45, 0.10)
SCRIPT_FAMILY_SEED = 7919
REFERENCE_HEIGHT = 64
SUPERSAMPLE = 3


class CharsetError(ValueError):
    pass


@dataclass
class WriterStyleParams:
    """Rendering parameters of one synthetic writer.

    Pixel quantities are expressed at a 64 px line height and scaled with the
    actual rendering height.
    """

    style_seed: int
    slant: float
    stroke_width: float
    glyph_spacing: float
    baseline_jitter: float
    x_scale: float
    jitter_freq: float
    jitter_phase: float
    glyph_shape_offsets: dict[str, tuple[float, float, float, float]]
    ambiguity_profile: dict[tuple[str, str], str]
    family: int = 0

    def shape_for(self, ch: str) -> str:
        """Character whose outline (and deformation) is drawn for ``ch``."""
        for pair, choice in self.ambiguity_profile.items():
            if ch in pair:
                first, second = pair
                if choice == "swapped":
                    return second if ch == first else first
                if choice == "merged":
                    return first
        return ch


@dataclass(frozen=True)
class ScriptFamily:
    """Habits shared by a group of writers, like a school of handwriting.

    Writers scatter around the family's slant, stroke width, spacing and width scale and
    mostly keep its ambiguity profile, so visual style carries information about how the
    confusable pairs are written.
    """

    slant: float
    stroke_width: float
    glyph_spacing: float
    x_scale: float
    ambiguity_profile: tuple[str, ...]


def _ambiguity_choice(rng: np.random.Generator) -> str:
    return AMBIGUITY_CHOICES[int(rng.choice(len(AMBIGUITY_CHOICES), p=AMBIGUITY_PROBS))]


def script_family(k: int, families: int) -> ScriptFamily:
    rng = np.random.default_rng([SCRIPT_FAMILY_SEED, k])
    # slant centres are stratified so that families stay visually apart
    slant = -15.0 + 35.0 * (k + float(rng.uniform(0.2, 0.8))) / families
    return ScriptFamily(slant, float(rng.uniform(1.6, 3.8)), float(rng.uniform(0.5, 5.5)),
                        float(rng.uniform(0.85, 1.2)), tuple(_ambiguity_choice(rng) for _ in AMBIGUOUS_PAIRS))


def generate_writer_style(style_seed: int, families: int = 4, fidelity: float = 0.85) -> WriterStyleParams:
    """Draw a writer: a script family, style parameters around its centre and a mostly inherited profile.

    ``fidelity`` is the per-pair probability of keeping the family's ambiguity choice; otherwise
    the choice is drawn afresh.
    """
    if families < 1:
        raise ValueError("at least one script family is required")
    if not 0.0 <= fidelity <= 1.0:
        raise ValueError("fidelity must lie in [0, 1]")
    rng = np.random.default_rng(style_seed)
    family = int(rng.integers(families))
    fam = script_family(family, families)
    slant = float(np.clip(fam.slant + rng.normal(0.0, 3.0), -20.0, 25.0))
    stroke = float(np.clip(fam.stroke_width + rng.normal(0.0, 0.3), 1.2, 4.2))
    spacing = float(np.clip(fam.glyph_spacing + rng.normal(0.0, 0.8), 0.0, 6.0))
    jitter = float(rng.uniform(0.0, 2.5))
    x_scale = float(np.clip(fam.x_scale + rng.normal(0.0, 0.04), 0.8, 1.25))
    freq = float(rng.uniform(0.3, 1.5))
    phase = float(rng.uniform(0.0, 2 * math.pi))
    offsets = {ch: tuple(float(v) for v in rng.normal(0.0, 0.07, size=4)) for ch in CHARSET}
    profile = {pair: fam.ambiguity_profile[i] if rng.random() < fidelity else _ambiguity_choice(rng)
               for i, pair in enumerate(AMBIGUOUS_PAIRS)}
    return WriterStyleParams(style_seed, slant, stroke, spacing, jitter, x_scale, freq, phase, offsets, profile,
                             family)


def check_charset(text: str, charset: str = CHARSET) -> None:
    bad = sorted({c for c in text if c not in charset})
    if bad:
        raise CharsetError(f"characters outside charset: {bad!r}")


def render_line(style: WriterStyleParams, text: str, height: int = 64) -> np.ndarray:
    """Render ``text`` as a grayscale uint8 line image (white background, dark ink)."""
    if not text:
        raise ValueError("text must be non-empty")
    check_charset(text)
    px = height / REFERENCE_HEIGHT
    unit = 0.56 * height
    baseline = 0.1 * height + ASCENDER * unit
    shear = math.tan(math.radians(style.slant))

    strokes: list[list[tuple[float, float]]] = []
    pen = 0.0
    for i, ch in enumerate(text):
        shape = style.shape_for(ch)
        adv, polylines = glyph(shape)
        a, b, c, d = style.glyph_shape_offsets[shape]
        dy = style.baseline_jitter * px * math.sin(style.jitter_freq * i + style.jitter_phase)
        for line in polylines:
            pts = []
            for x, y in line:
                gx = ((1 + a) * x + b * y) * style.x_scale
                gy = c * x + (1 + d) * y
                Y = baseline - gy * unit + dy
                X = pen + gx * unit + (baseline - Y) * shear
                pts.append((X, Y))
            strokes.append(pts)
        pen += max(adv, 0.3) * style.x_scale * unit + style.glyph_spacing * px

    margin = 3.0 * px + style.stroke_width * px
    xs = [p[0] for s in strokes for p in s] or [0.0]
    x_min = min(min(xs), 0.0)
    x_max = max(max(xs), pen)
    width = max(1, int(math.ceil(x_max - x_min + 2 * margin)))

    S = SUPERSAMPLE
    canvas = Image.new("L", (width * S, height * S), 255)
    draw = ImageDraw.Draw(canvas)
    w = max(1, int(round(style.stroke_width * px * S)))
    r = w / 2.0
    for s in strokes:
        pts = [((x - x_min + margin) * S, y * S) for x, y in s]
        if len(pts) > 1:
            draw.line(pts, fill=0, width=w, joint="curve")
        for x, y in (pts[0], pts[-1]):
            draw.ellipse((x - r, y - r, x + r, y + r), fill=0)
    return np.asarray(canvas.resize((width, height), Image.BOX), dtype=np.uint8)


@dataclass
class LineSample:
    image: np.ndarray
    wsi: int
    transcript: str

    def __post_init__(self):
        if self.wsi < 0:
            raise ValueError("wsi must be non-negative")
        if self.image.ndim != 2 or self.image.shape[1] < 1:
            raise ValueError("image must be a 2-D raster of width >= 1")


@dataclass
class CorpusSpec:
    n_writers: int = 40
    lines_min: int = 5
    lines_max: int = 1200
    lines_per_writer: list[int] | None = None
    text_min: int = 5
    text_max: int = 12
    height: int = 64
    charset: str = CHARSET
    space_prob: float = 0.15
    ambiguous_weight: float = 2.0
    script_families: int = 4
    family_fidelity: float = 0.85


@dataclass
class DatasetManifest:
    samples: list[LineSample]
    writer_seeds: list[int]
    charset: str = CHARSET

    def __len__(self):
        return len(self.samples)

    @property
    def n_writers(self) -> int:
        return len(self.writer_seeds)

    def lines_of(self, wsi: int) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.wsi == wsi]


def line_counts(spec: CorpusSpec, rng: np.random.Generator) -> list[int]:
    """Per-writer line counts: explicit, or stratified log-uniform with both endpoints pinned."""
    if spec.lines_per_writer is not None:
        if len(spec.lines_per_writer) != spec.n_writers:
            raise ValueError("lines_per_writer length must equal n_writers")
        return list(spec.lines_per_writer)
    n = spec.n_writers
    if n == 1:
        return [spec.lines_min]
    lo, hi = math.log(spec.lines_min), math.log(spec.lines_max)
    counts = []
    for i in range(n):
        if i == 0:
            u = 0.0
        elif i == n - 1:
            u = 1.0
        else:
            u = (i + rng.uniform()) / n
        counts.append(int(round(math.exp(lo + (hi - lo) * u))))
    return counts


def sample_text(rng: np.random.Generator, spec: CorpusSpec) -> str:
    letters = [c for c in spec.charset if c != " "]
    ambiguous = {c for pair in AMBIGUOUS_PAIRS for c in pair}
    weights = np.array([spec.ambiguous_weight if c in ambiguous else 1.0 for c in letters])
    weights /= weights.sum()
    n = int(rng.integers(spec.text_min, spec.text_max + 1))
    out: list[str] = []
    for i in range(n):
        if 0 < i < n - 1 and out[-1] != " " and rng.uniform() < spec.space_prob:
            out.append(" ")
        else:
            out.append(letters[int(rng.choice(len(letters), p=weights))])
    return "".join(out)


def writer_lines(style: WriterStyleParams, wsi: int, n_lines: int, spec: CorpusSpec,
                 rng: np.random.Generator) -> list[LineSample]:
    samples = []
    for _ in range(n_lines):
        text = sample_text(rng, spec)
        samples.append(LineSample(render_line(style, text, spec.height), wsi, text))
    return samples


def build_corpus(spec: CorpusSpec, seed: int) -> DatasetManifest:
    if not spec.charset:
        raise CharsetError("empty charset")
    check_charset(spec.charset)
    if spec.n_writers < 1:
        raise ValueError("n_writers must be >= 1")
    rng = np.random.default_rng(seed)
    counts = line_counts(spec, rng)
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=spec.n_writers)]
    samples: list[LineSample] = []
    for wsi, (style_seed, n_lines) in enumerate(zip(seeds, counts)):
        style = generate_writer_style(style_seed, spec.script_families, spec.family_fidelity)
        samples.extend(writer_lines(style, wsi, n_lines, spec, rng))
    return DatasetManifest(samples, seeds, spec.charset)


def cluster_of(n_lines: int) -> int:
    """Label of the highest cluster threshold not exceeding ``n_lines``."""
    label = CLUSTER_LABELS[0]
    for threshold, lab in zip(CLUSTER_THRESHOLDS, CLUSTER_LABELS):
        if n_lines >= threshold:
            label = lab
    return label


@dataclass
class ClusterPartition:
    writer_cluster: dict[int, int]
    trn: dict[int, list[int]]
    tst_c: dict[int, list[int]]
    tst_global: list[int]
    sample_wsi: list[int] = field(default_factory=list)

    @property
    def trn_all(self) -> list[int]:
        return sorted(i for ids in self.trn.values() for i in ids)

    @property
    def tst_c_all(self) -> list[int]:
        return sorted(i for ids in self.tst_c.values() for i in ids)

    def tst_of_cluster(self, label: int) -> list[int]:
        """TST (global test) samples of writers assigned to cluster ``label``."""
        return [i for i in self.tst_global if self.writer_cluster[self.sample_wsi[i]] == label]

    def split_table(self) -> list[tuple[int, int, int, str]]:
        """Rows (sample_id, wsi, cluster, split) sorted by sample id."""
        split: dict[int, str] = {}
        for ids in self.trn.values():
            split.update((i, "trn") for i in ids)
        for ids in self.tst_c.values():
            split.update((i, "tst_c") for i in ids)
        split.update((i, "tst") for i in self.tst_global)
        return [(i, self.sample_wsi[i], self.writer_cluster[self.sample_wsi[i]], split[i])
                for i in sorted(split)]


def partition(manifest: DatasetManifest, tst_global_fraction: float = 0.0125, seed: int = 0) -> ClusterPartition:
    n = len(manifest)
    if n == 0:
        raise ValueError("manifest is empty")
    rng = np.random.default_rng(seed)
    n_global = int(round(tst_global_fraction * n))
    tst_global = sorted(int(i) for i in rng.choice(n, size=n_global, replace=False))
    held = set(tst_global)
    wsi = [s.wsi for s in manifest.samples]

    remaining: dict[int, list[int]] = {w: [] for w in range(manifest.n_writers)}
    for i, w in enumerate(wsi):
        if i not in held:
            remaining.setdefault(w, []).append(i)

    writer_cluster: dict[int, int] = {}
    trn = {lab: [] for lab in CLUSTER_LABELS}
    tst_c = {lab: [] for lab in CLUSTER_LABELS}
    for w in sorted(remaining):
        ids = remaining[w]
        if not ids:
            log.warning("writer %d has no lines left after the global test draw; assigned to cluster 1", w)
        label = cluster_of(len(ids))
        writer_cluster[w] = label
        k = CLUSTER_HOLDOUT[label]
        pick = set(int(j) for j in rng.choice(len(ids), size=k, replace=False)) if k else set()
        tst_c[label].extend(ids[j] for j in sorted(pick))
        trn[label].extend(ids[j] for j in range(len(ids)) if j not in pick)
    return ClusterPartition(writer_cluster, trn, tst_c, tst_global, wsi)


def save_partition(part: ClusterPartition, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("sample_id\twsi\tcluster\tsplit\n")
        for row in part.split_table():
            f.write("\t".join(str(v) for v in row) + "\n")


def load_partition(path: str | Path) -> ClusterPartition:
    writer_cluster: dict[int, int] = {}
    trn = {lab: [] for lab in CLUSTER_LABELS}
    tst_c = {lab: [] for lab in CLUSTER_LABELS}
    tst_global: list[int] = []
    wsi_of: dict[int, int] = {}
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            sid, w, lab, split = line.rstrip("\n").split("\t")
            sid, w, lab = int(sid), int(w), int(lab)
            writer_cluster[w] = lab
            wsi_of[sid] = w
            {"trn": trn[lab], "tst_c": tst_c[lab], "tst": tst_global}[split].append(sid)
    sample_wsi = [wsi_of[i] for i in range(len(wsi_of))]
    return ClusterPartition(writer_cluster, trn, tst_c, tst_global, sample_wsi)


@dataclass
class PatchMaskConfig:
    enabled: bool = True
    max_patches: int = 3


@dataclass
class AugmentationConfig:
    brightness: float = 0.25
    contrast: float = 0.4
    noise_std: float = 8.0
    blur_sigma: float = 0.8
    slant: float = 8.0
    scale_x: float = 0.1
    shift_y: float = 0.05
    patch_mask: PatchMaskConfig = field(default_factory=PatchMaskConfig)

    def __post_init__(self):
        for name in ("brightness", "contrast", "noise_std", "blur_sigma", "slant", "scale_x", "shift_y"):
            if getattr(self, name) < 0:
                raise ValueError(f"augmentation range {name} must be non-negative")
        if isinstance(self.patch_mask, dict):
            self.patch_mask = PatchMaskConfig(**self.patch_mask)

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(0, 0, 0, 0, 0, 0, 0, PatchMaskConfig(enabled=False, max_patches=0))

    def stronger(self, strength: float, patches: bool = False) -> "AugmentationConfig":
        """Copy with every range multiplied by ``strength``; patch masking per ``patches``."""
        return AugmentationConfig(
            brightness=min(self.brightness * strength, 0.9),
            contrast=min(self.contrast * strength, 0.9),
            noise_std=self.noise_std * strength,
            blur_sigma=self.blur_sigma * strength,
            slant=self.slant * strength,
            scale_x=min(self.scale_x * strength, 0.5),
            shift_y=self.shift_y * strength,
            patch_mask=PatchMaskConfig(enabled=patches and self.patch_mask.enabled,
                                       max_patches=self.patch_mask.max_patches),
        )


def draw_patch_masks(width: int, height: int, max_patches: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(x0, patch_width) pairs; count uniform in [0, max_patches], width uniform in [1, height]."""
    count = int(rng.integers(0, max_patches + 1))
    patches = []
    for _ in range(count):
        pw = int(rng.integers(1, height + 1))
        x0 = int(rng.integers(0, max(1, width - pw + 1)))
        patches.append((x0, pw))
    return patches


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    img = image.astype(np.float32)
    h, w = img.shape

    if cfg.slant or cfg.scale_x or cfg.shift_y:
        shear = math.tan(math.radians(rng.uniform(-cfg.slant, cfg.slant)))
        sx = rng.uniform(1 - cfg.scale_x, 1 + cfg.scale_x)
        ty = rng.uniform(-cfg.shift_y, cfg.shift_y) * h
        new_w = max(1, int(math.ceil(w * sx + h * abs(shear))))
        # x' = sx*x - shear*(y - h/2) + offset keeps the sheared line inside the canvas
        offset = h * abs(shear) / 2
        m = np.array([[sx, -shear, offset + shear * h / 2], [0.0, 1.0, ty]], dtype=np.float32)
        img = cv2.warpAffine(img, m, (new_w, h), flags=cv2.INTER_LINEAR,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=255.0)
        w = new_w

    if cfg.blur_sigma:
        sigma = rng.uniform(0, cfg.blur_sigma)
        if sigma > 0.3:
            img = cv2.GaussianBlur(img, (0, 0), sigma)

    if cfg.brightness or cfg.contrast:
        background = 255.0 * (1 - rng.uniform(0, cfg.brightness))
        ink = 255.0 * rng.uniform(0, cfg.contrast)
        img = ink + (background - ink) * (img / 255.0)

    if cfg.noise_std:
        img = img + rng.normal(0, rng.uniform(0, cfg.noise_std), size=img.shape)

    if cfg.patch_mask.enabled and cfg.patch_mask.max_patches > 0:
        for x0, pw in draw_patch_masks(w, h, cfg.patch_mask.max_patches, rng):
            img[:, x0:x0 + pw] = rng.uniform(0, 255, size=(h, min(pw, w - x0)))

    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# manifest I/O ---------------------------------------------------------------

def write_corpus(manifest: DatasetManifest, out_dir: str | Path, name: str = "manifest.tsv") -> Path:
    """Write PNG images plus a tab-separated manifest (path, wsi, transcript) and writer seeds."""
    out = Path(out_dir)
    img_dir = out / (Path(name).stem + "_images")
    img_dir.mkdir(parents=True, exist_ok=True)
    with open(out / name, "w", encoding="utf-8", newline="\n") as f:
        for i, s in enumerate(manifest.samples):
            rel = f"{img_dir.name}/{i:06d}.png"
            Image.fromarray(s.image).save(out / rel, optimize=False)
            f.write(f"{rel}\t{s.wsi}\t{s.transcript}\n")
    with open(out / (Path(name).stem + "_writers.tsv"), "w", encoding="utf-8") as f:
        for wsi, seed in enumerate(manifest.writer_seeds):
            f.write(f"{wsi}\t{seed}\n")
    return out / name


def read_manifest(path: str | Path) -> list[tuple[str, int, str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            rel, wsi, text = line.rstrip("\n").split("\t", 2)
            rows.append((rel, int(wsi), text))
    return rows


def load_corpus(path: str | Path, charset: str = CHARSET) -> DatasetManifest:
    path = Path(path)
    samples = []
    for rel, wsi, text in read_manifest(path):
        check_charset(text, charset)
        image = np.asarray(Image.open(path.parent / rel).convert("L"), dtype=np.uint8)
        samples.append(LineSample(image, wsi, text))
    seeds_path = path.parent / (path.stem + "_writers.tsv")
    seeds: list[int] = []
    if seeds_path.exists():
        with open(seeds_path, encoding="utf-8") as f:
            seeds = [int(line.split("\t")[1]) for line in f if line.strip()]
    else:
        seeds = [0] * (max(s.wsi for s in samples) + 1)
    return DatasetManifest(samples, seeds, charset)
