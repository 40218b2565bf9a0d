"""Experiment configuration: one YAML file per experiment, strict keys, section hashes."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .adaptation import METHODS, AdaptationSettings
from .dataset import AugmentationConfig, CorpusSpec
from .recognizer import MODES, NetConfig
from .style_encoder import EncoderConfig, EncoderTrainConfig
from .training import AdamSettings, PhasePlan, normal_recipe, pretrained_recipe
from .wsb import SUPPORTED_ED


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    seed: int = 0
    tst_global_fraction: float = 0.0125
    # unseen writers for adaptation experiments, generated from an independent seed
    adaptation_writers: int = 5
    adaptation_lines: int = 512


@dataclass
class PlanConfig:
    recipe: str = "normal"
    scale: float = 1.0
    lr_scale: float = 1.0
    embedding_lr_scale: float = 1.0
    batch_size: int = 32
    phase2_peak: float = 7e-5
    phase3_peaks: list[float] = field(default_factory=lambda: [7e-5, 3e-5, 1.5e-5, 7.5e-6])
    adam: AdamSettings = field(default_factory=AdamSettings)

    def build(self) -> PhasePlan:
        if self.recipe == "normal":
            plan = normal_recipe(self.batch_size)
        elif self.recipe == "pretrained":
            plan = pretrained_recipe(self.batch_size, self.phase2_peak, self.phase3_peaks)
        else:
            raise ConfigError(f"unknown recipe {self.recipe!r}")
        return plan.scaled(self.scale, self.lr_scale, self.embedding_lr_scale)


@dataclass
class EncoderSection:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: EncoderTrainConfig = field(default_factory=EncoderTrainConfig)
    scale: float = 1.0
    k: int = 32
    seed: int = 0


@dataclass
class ExperimentConfig:
    name: str = ""
    output_dir: str = "runs"
    mode: str = "single_adain"
    ed: int = 32
    init_mode: str = "normal"
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    net: NetConfig = field(default_factory=NetConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    adaptation: AdaptationSettings = field(default_factory=AdaptationSettings)
    # run (by name) holding the baseline checkpoints used as B and for finetuning
    adaptation_baseline: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.init_mode not in ("normal", "pretrained"):
            raise ConfigError(f"init_mode must be normal or pretrained, got {self.init_mode!r}")
        if self.ed not in SUPPORTED_ED:
            raise ConfigError(f"ed must be one of {SUPPORTED_ED}, got {self.ed}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.encoder.model.ed != self.ed:
            raise ConfigError(f"encoder.model.ed ({self.encoder.model.ed}) differs from ed ({self.ed})")
        if self.net.height != self.dataset.corpus.height or self.encoder.model.height != self.dataset.corpus.height:
            raise ConfigError("net.height, encoder.model.height and dataset.corpus.height must agree")
        bad = [m for m in self.adaptation.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown adaptation methods {bad}")
        if not 0 < self.encoder.scale <= 1:
            raise ConfigError("encoder.scale must be in (0, 1]")
        if self.plan.recipe == "pretrained" and self.init_mode != "pretrained":
            raise ConfigError("the pretrained recipe needs init_mode: pretrained")

    @property
    def run_name(self) -> str:
        return self.name or f"{self.mode}_ed{self.ed}_{self.init_mode}"

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *sections: str) -> str:
        data = self.to_dict()
        return stable_hash({s: data[s] for s in sections})

    def hashes(self) -> dict[str, str]:
        """Hashes of what each artifact depends on; compared before any compute starts."""
        return {
            "dataset": self.section_hash("dataset"),
            "encoder": self.section_hash("dataset", "encoder", "augmentation"),
            "model": self.section_hash("dataset", "encoder", "mode", "ed", "init_mode", "net", "plan",
                                       "augmentation"),
            "config": stable_hash({k: v for k, v in self.to_dict().items() if k != "output_dir"}),
        }


def stable_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# strict construction from nested dictionaries ------------------------------------

def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from err


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-mapping")
        node[keys[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"config {path} is not valid YAML: {err}") from err
    return from_dict(apply_overrides(data, overrides))


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), f, sort_keys=False)

