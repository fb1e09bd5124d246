"""A generator, its marker bank and the paired extractor, saved as one unit."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import engine as E
from .extractor import Extractor, ExtractorConfig
from .generator import BackboneConfig, GeneratorModel, MarkerBank, MarkerConfig

MANIFEST_VERSION = 1


class CheckpointMismatch(Exception):
    """Checkpoint does not fit the request (config hash, key length, ...)."""


def config_hash(payload: Mapping) -> str:
    blob = json.dumps(payload, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class WatermarkSystem:
    generator: GeneratorModel
    bank: MarkerBank
    extractor: Extractor

    @property
    def M(self) -> int:
        return self.bank.M

    def architecture(self) -> dict:
        return {
            "backbone": asdict(self.generator.config),
            "backbone_seed": self.generator.seed,
            "markers": asdict(self.bank.config),
            "extractor": asdict(self.extractor.config),
        }

    def config_hash(self) -> str:
        return config_hash(self.architecture())

    def manifest(self, extra: Mapping | None = None) -> dict:
        out = {
            "format_version": MANIFEST_VERSION,
            "architecture": self.architecture(),
            "config_hash": self.config_hash(),
            "bank": self.bank.manifest(),
            "M": self.M,
        }
        out.update(extra or {})
        return out

    def entries(self) -> dict[str, np.ndarray]:
        out = E.module_entries(self.generator, "generator")
        out.update(E.module_entries(self.bank, "bank"))
        out.update(E.module_entries(self.extractor, "extractor"))
        return out


def _tuplify(d: dict, keys) -> dict:
    d = dict(d)
    for k in keys:
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return d


def build_system(backbone: BackboneConfig, markers: MarkerConfig, extractor: ExtractorConfig | None = None,
                 backbone_seed: int = 0, bank_seed: int = 1, extractor_seed: int = 2) -> WatermarkSystem:
    gen = GeneratorModel(backbone, backbone_seed)
    bank = MarkerBank(backbone, markers, bank_seed)
    M = bank.M
    if extractor is None:
        extractor = ExtractorConfig(key_bits=M, image_size=backbone.image_size)
    if extractor.key_bits != M:
        raise CheckpointMismatch(f"extractor emits {extractor.key_bits} bits, bank encodes {M}")
    return WatermarkSystem(gen, bank, Extractor(extractor, extractor_seed))


def system_from_entries(entries: Mapping[str, np.ndarray], manifest: Mapping) -> WatermarkSystem:
    arch = manifest["architecture"]
    backbone = BackboneConfig(**arch["backbone"])
    markers = MarkerConfig(**_tuplify(arch["markers"], ["routed_blocks"]))
    ext = ExtractorConfig(**_tuplify(arch["extractor"], ["widths"]))
    bank_seed = manifest["bank"]["seed"]
    system = build_system(backbone, markers, ext, arch["backbone_seed"], bank_seed, 0)
    E.load_module_entries(system.generator, entries, "generator")
    E.load_module_entries(system.bank, entries, "bank")
    E.load_module_entries(system.extractor, entries, "extractor")
    system.generator.freeze()
    if system.config_hash() != manifest["config_hash"]:
        raise CheckpointMismatch("config hash in manifest does not match the stored architecture")
    return system


def save_system(path, system: WatermarkSystem, extra_entries: Mapping | None = None,
                extra_manifest: Mapping | None = None) -> Path:
    entries = system.entries()
    entries.update(extra_entries or {})
    return E.save_checkpoint(path, entries, system.manifest(extra_manifest))


def load_system(path) -> tuple[WatermarkSystem, dict, dict]:
    """Returns ``(system, manifest, raw_entries)``."""
    entries, manifest = E.load_checkpoint(path)
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise CheckpointMismatch(f"unsupported manifest version {manifest.get('format_version')}")
    return system_from_entries(entries, manifest), manifest, entries
