"""Experiment configuration: an INI file with one section per stage.

Unknown keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .corpus import CorpusConfig

DEFAULT_CONDITIONS = ("baseline:none", "baseline:i", "baseline:p", "baseline:i+p",
                      "fdcae:i", "fdcae:p", "fdcae:i+p")


@dataclass
class FeatureConfig:
    augment: bool = True
    ubm_components: int = 64
    ivector_dim: int = 16
    gmm_iters: int = 15
    gmm_components: int = 8
    shifts: tuple = (300, 400, 500)


@dataclass
class ModelSection:
    hidden_dim: int = 128
    pcode_dim: int = 128
    decoder_dim: int = 128


@dataclass
class TrainSection:
    epochs: int = 6
    lr: float = 2e-3
    lr_decay: float = 0.95
    batch_size: int = 16
    chunk_frames: int = 150
    alpha: float = 5.0
    beta: float = 5e-14
    beta_effective: float | None = None
    adapt_epochs: int = 1
    adapt_lr_scale: float = 0.25


@dataclass
class MatrixSection:
    seeds: tuple = (0, 1, 2)
    conditions: tuple = DEFAULT_CONDITIONS
    adapt_conditions: tuple = ("baseline:i", "fdcae:i")
    jobs: int = 1


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    matrix: MatrixSection = field(default_factory=MatrixSection)


def _parse(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        items = [v.strip() for v in value.replace(",", " ").split()]
        if default and isinstance(default[0], int):
            return tuple(int(v) for v in items)
        return tuple(items)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        v = value.strip().lower()
        return None if v in ("", "none") else float(value)
    return value.strip()


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Read an INI file (sections corpus/features/model/train/matrix) over the defaults."""
    cfg = ExperimentConfig()
    cp = configparser.ConfigParser()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        cp.read_string(text)
    for section, values in (overrides or {}).items():
        if not cp.has_section(section):
            cp.add_section(section)
        for k, v in values.items():
            cp.set(section, k, str(v))
    for name in cp.sections():
        if not hasattr(cfg, name):
            raise ValueError(f"unknown config section [{name}]")
        target = getattr(cfg, name)
        known = {f.name: f for f in fields(target)}
        for key, raw in cp.items(name):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in [{name}]")
            setattr(target, key, _parse(raw, getattr(target, key)))
    return cfg


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


def config_to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section in fields(cfg):
        lines.append(f"[{section.name}]")
        obj = getattr(cfg, section.name)
        for f in fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
