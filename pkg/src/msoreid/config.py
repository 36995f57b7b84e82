"""Experiment configuration: sectioned key-value (INI) files over typed dataclasses.

Values missing from a user file fall back to ``defaults.ini`` shipped with the
package, which carries the full-scale training recipe.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "synthetic"  # synthetic | manifest | sysu | regdb
    root: str = ""
    regdb_trial: int = 1
    strict: bool = True
    num_identities: int = 32
    images_per_id_per_modality: int = 8
    image_height: int = 64
    image_width: int = 32
    noise_level: float = 0.04
    jitter: int = 3
    clutter: float = 0.5
    num_test_identities: int = 16
    synthetic_seed: int = 0


@dataclass
class ModelSection:
    backbone: str = "resnet50"
    stem_out_channels: int = 64
    trunk_stage_channels: tuple[int, ...] = (256, 512, 1024, 2048)
    last_stage_stride: int = 1
    nonlocal_positions: tuple[int, ...] = (1, 2)
    embedding_dim: int = 2048
    gem_p_init: float = 3.0


@dataclass
class LossSection:
    pef: bool = True
    cmcc: bool = True
    id: bool = True
    wrt: bool = True
    fusion: str = "pef"
    pef_adapter: str = "mean"
    perceptual_source: str = "vgg16"
    perceptual_channels: tuple[int, ...] = (64, 128, 256, 512)
    perceptual_convs_per_block: int = 2
    perceptual_seed: int = 0
    perceptual_weights: str = ""


@dataclass
class TrainSection:
    epochs: int = 100
    optimizer: str = "adam"
    lr: float = 0.0005
    weight_decay: float = 0.0
    lr_decay: float = 0.1
    lr_milestones: tuple[int, ...] = (20, 25, 35)
    num_identities_P: int = 8
    images_per_modality_K: int = 4
    batches_per_epoch: int = 0  # 0: one pass worth of images
    input_height: int = 288
    input_width: int = 144
    augment: bool = True
    crop_pad: int = 10
    flip_prob: float = 0.5
    seed: int = 0
    num_threads: int = 1
    eval_every: int = 0
    eval_batch_size: int = 64


@dataclass
class EvalSection:
    mode: str = "sysu_all"
    shot: str = "single"
    num_trials: int = 10
    seed: int = 0


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return dataclasses.asdict(self)

    def to_ini(self) -> str:
        parser = _parser()
        for sec in fields(self):
            section = getattr(self, sec.name)
            parser[sec.name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_ini())
        return path

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides."""
        cfg = dataclasses.replace(self, **{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)})
        for key, value in overrides.items():
            sec, _, name = key.partition("__")
            section = getattr(cfg, sec, None)
            if section is None or not hasattr(section, name):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(section, name, value)
        return cfg

    def diff(self, other: "ExperimentConfig") -> dict[str, tuple[Any, Any]]:
        a, b = self.to_dict(), other.to_dict()
        return {f"{s}.{k}": (a[s][k], b[s][k]) for s in a for k in a[s] if a[s][k] != b[s][k]}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, typ: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if typ in (int, float, str):
            return typ(raw)
        origin = typing.get_origin(typ)
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(inner(tok) for tok in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _apply(cfg: ExperimentConfig, parser: configparser.ConfigParser, source: str) -> None:
    for sec_name in parser.sections():
        section = getattr(cfg, sec_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"{source}: unknown section [{sec_name}]")
        hints = typing.get_type_hints(type(section))
        for key, raw in parser[sec_name].items():
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {sec_name}.{key}")
            setattr(section, key, _parse(raw, hints[key], f"{source} [{sec_name}] {key}"))


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser()
    p.optionxform = str  # keep key case (num_identities_P)
    return p


def default_config() -> ExperimentConfig:
    cfg = ExperimentConfig()
    parser = _parser()
    parser.read_string(resources.files("msoreid").joinpath("defaults.ini").read_text())
    _apply(cfg, parser, "defaults.ini")
    return cfg


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = _parser()
    parser.read(path)
    _apply(cfg, parser, str(path))
    return cfg


def apply_overrides(cfg: ExperimentConfig, items: list[str]) -> ExperimentConfig:
    """Copy of ``cfg`` with ``section.key=value`` strings parsed by field type."""
    updates = {}
    for item in items:
        key, sep, raw = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section = getattr(cfg, sec, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config section {sec!r}")
        hints = typing.get_type_hints(type(section))
        if name not in hints:
            raise ConfigError(f"unknown config key {sec}.{name}")
        updates[f"{sec}__{name}"] = _parse(raw, hints[name], f"override {key}")
    return cfg.replace(**updates)
