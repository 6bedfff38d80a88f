"""Run configuration: one TOML file drives every command.

The file's sha256 digest is embedded in checkpoints, so evaluation can
refuse a checkpoint written under a different configuration. Unknown keys
are hard errors to catch typos early.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .gan import GAN_WIDTHS, GanConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetConfig:
    dir: str = "runs/data"
    identities: int = 12
    cameras: int = 2
    views: int = 3
    train_fraction: float = 0.75


@dataclass(frozen=True)
class ModelKnobs:
    widths: Tuple[int, ...] = (16, 16, 32, 64)
    descriptor_dim: int = 512
    predictor_widths: Tuple[int, ...] = (16, 32, 32)


@dataclass(frozen=True)
class TrainSection:
    run_dir: str = "runs/train"
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: float = 0.96
    epochs_view: int = 20
    epochs_type: int = 20
    epochs_color: int = 20
    epochs_joint: int = 40
    augment: bool = True
    detach_weights: bool = False
    pretrained_attributes: bool = False
    donor_checkpoint: str = ""
    joint_patience: int = 0
    attributes: Tuple[str, ...] = ("view", "type", "color")


@dataclass(frozen=True)
class GanSection:
    run_dir: str = "runs/gan"
    source_view: int = 0
    target_view: int = 1
    batch_size: int = 16
    lr: float = 2e-4
    epochs: int = 1
    pairs: int = 64
    count: int = 0
    lam: float = 100.0
    l1_anchor: str = "input"
    variant: str = "non-saturating"
    widths: Tuple[int, int, int] = GAN_WIDTHS


@dataclass(frozen=True)
class EvalSection:
    protocol: str = "VERI"
    trials: int = 10
    gallery_size: int = 0        # 0 = use every test identity
    max_rank: int = 10
    out: str = "runs/eval.json"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelKnobs = field(default_factory=ModelKnobs)
    train: TrainSection = field(default_factory=TrainSection)
    gan: GanSection = field(default_factory=GanSection)
    eval: EvalSection = field(default_factory=EvalSection)
    digest: bytes = b"\x00" * 32

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(batch_size=t.batch_size, lr=t.lr, lr_decay=t.lr_decay,
                           epochs_view=t.epochs_view, epochs_type=t.epochs_type,
                           epochs_color=t.epochs_color, epochs_joint=t.epochs_joint,
                           seed=self.seed, augment=t.augment,
                           detach_weights=t.detach_weights,
                           pretrained_attributes=t.pretrained_attributes,
                           joint_patience=t.joint_patience,
                           attributes=tuple(t.attributes))

    def gan_config(self) -> GanConfig:
        g = self.gan
        return GanConfig(batch_size=g.batch_size, lr=g.lr, epochs=g.epochs,
                         seed=self.seed, lam=g.lam, l1_anchor=g.l1_anchor,
                         variant=g.variant, widths=tuple(g.widths))


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelKnobs,
    "train": TrainSection,
    "gan": GanSection,
    "eval": EvalSection,
}


def _build_section(name: str, cls, raw: dict):
    spec = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(spec)
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = spec[key].default
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value)
        elif isinstance(default, str):
            ok = isinstance(value, str)
        elif isinstance(default, tuple):
            elem = str if (default and isinstance(default[0], str)) else int
            ok = (isinstance(value, list)
                  and all(isinstance(v, elem) and not isinstance(v, bool) for v in value))
            value = tuple(value)
        else:
            ok = True
        if not ok:
            raise ConfigError(f"[{name}] {key}: bad value {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(text: str, digest: bytes = b"\x00" * 32) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    top_unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if top_unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(top_unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: bad value {seed!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, cls, sub)
    cfg = RunConfig(seed=seed, digest=digest, **sections)
    if cfg.eval.protocol not in ("VERI", "VEHICLEID"):
        raise ConfigError(f"[eval] protocol must be VERI or VEHICLEID, "
                          f"got {cfg.eval.protocol!r}")
    cfg.gan_config()    # validates anchor and variant
    cfg.train_config()  # validates attribute subset
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as f:
        data = f.read()
    digest = hashlib.sha256(data).digest()
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8: {exc}") from exc
    try:
        return parse_config(text, digest)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
