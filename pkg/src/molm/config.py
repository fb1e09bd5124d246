"""Experiment configuration read from an INI file.

Each section maps onto one dataclass::

    [backbone]      BackboneConfig
    [markers]       MarkerConfig
    [extractor]     widths, slope (key_bits and image_size are derived)
    [train]         TrainConfig scalars
    [augmentation]  AugmentationSpec
    [features]      FeatureSpec
    [optim]         OptimConfig
    [eval]          EvalConfig
    [seeds]         Seeds
    [paths]         output_dir

Tuples are comma separated, ``none`` stands for None, booleans accept
true/false/yes/no/1/0.  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .distortions import BATTERY, Distortion, DistortionError
from .extractor import ExtractorConfig
from .generator import BackboneConfig, ConfigError, MarkerConfig
from .keycodec import KeyFormatError
from .system import config_hash
from .training import TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    n_images: int = 200
    seed: int = 7
    target_fpr: float = 0.01
    battery: tuple[str, ...] = tuple(f"{d.kind}:{d.param:g}" for d in BATTERY)
    regen_levels: tuple[str, ...] = ("weak", "medium", "strong")
    pgd_epsilons: tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    pgd_steps: int = 100
    pgd_images: int = 64
    averaging_ks: tuple[int, ...] = (5, 10, 20, 50, 100, 200, 500, 1000)
    averaging_targets: int = 200
    workers: int = 1

    def distortions(self) -> list[Distortion]:
        out = []
        for item in self.battery:
            kind, _, param = item.partition(":")
            try:
                out.append(Distortion(kind.strip(), float(param or 0.0)))
            except (ValueError, DistortionError) as exc:
                raise ConfigError(f"bad battery entry {item!r}: {exc}") from exc
        return out


@dataclass(frozen=True)
class Seeds:
    backbone: int = 0
    bank: int = 1
    extractor: int = 2


@dataclass(frozen=True)
class ExtractorSection:
    widths: tuple[int, ...] = ExtractorConfig.widths
    slope: float = ExtractorConfig.slope


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    markers: MarkerConfig = field(default_factory=MarkerConfig)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"

    @property
    def M(self) -> int:
        return self.markers.key_bits(self.backbone)

    def extractor_config(self) -> ExtractorConfig:
        return ExtractorConfig(key_bits=self.M, image_size=self.backbone.image_size,
                               widths=self.extractor.widths, slope=self.extractor.slope)

    def validate(self) -> None:
        try:
            self.backbone.validate()
            self.markers.sites(self.backbone)
            self.markers.key_bits(self.backbone)
            self.train.validate()
        except (ValueError, KeyFormatError) as exc:
            raise ConfigError(str(exc)) from exc
        self.eval.distortions()

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.as_dict())


# ---------------------------------------------------------------------------
# parsing

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(text: str, tp, where: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() == "none":
            return None
        return _convert(text, inner[0], where)
    if origin is tuple:
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(s, args[0], where) for s in items)
        if len(items) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_convert(s, a, where) for s, a in zip(items, args))
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if tp in (int, float, str):
            return tp(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {text!r} as {tp.__name__}") from exc
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _scalar_fields(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if not is_dataclass(hints[f.name])}


def _apply(obj, section: configparser.SectionProxy, name: str):
    types_ = _scalar_fields(type(obj))
    updates = {}
    for key, text in section.items():
        if key not in types_:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        updates[key] = _convert(text, types_[key], f"[{name}] {key}")
    return replace(obj, **updates)


SECTIONS = ("backbone", "markers", "extractor", "train", "augmentation", "features", "optim", "eval", "seeds",
            "paths")


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    base = ExperimentConfig()

    def sec(name, obj):
        return _apply(obj, cp[name], name) if cp.has_section(name) else obj

    train = sec("train", base.train)
    train = replace(train, augmentation=sec("augmentation", train.augmentation),
                    features=sec("features", train.features), optim=sec("optim", train.optim))
    out = ExperimentConfig(
        backbone=sec("backbone", base.backbone),
        markers=sec("markers", base.markers),
        extractor=sec("extractor", base.extractor),
        train=train,
        eval=sec("eval", base.eval),
        seeds=sec("seeds", base.seeds),
        output_dir=base.output_dir,
    )
    if cp.has_section("paths"):
        extra = set(cp["paths"]) - {"output_dir"}
        if extra:
            raise ConfigError(f"[paths] unknown keys {sorted(extra)}")
        out = replace(out, output_dir=cp["paths"].get("output_dir", out.output_dir))
    out.validate()
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    blocks = {
        "backbone": cfg.backbone, "markers": cfg.markers, "extractor": cfg.extractor, "train": cfg.train,
        "augmentation": cfg.train.augmentation, "features": cfg.train.features, "optim": cfg.train.optim,
        "eval": cfg.eval, "seeds": cfg.seeds,
    }
    lines = []
    for name, obj in blocks.items():
        lines.append(f"[{name}]")
        for key in _scalar_fields(type(obj)):
            lines.append(f"{key} = {_format(getattr(obj, key))}")
        lines.append("")
    lines += ["[paths]", f"output_dir = {cfg.output_dir}", ""]
    return "\n".join(lines)

