"""Shared helpers for the experiment scripts: train-or-load with a checkpoint path."""

from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path

import torch

from molm.config import ExperimentConfig, load_config
from molm.system import WatermarkSystem, build_system, load_system, save_system
from molm.training import TrainConfig, train

log = logging.getLogger("molm.scripts")


def setup(threads: int = 1, verbose: bool = True) -> None:
    torch.set_num_threads(threads)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(asctime)s %(message)s")


def experiment(config_path: str | None) -> ExperimentConfig:
    return load_config(config_path) if config_path else ExperimentConfig()


def train_or_load(path: Path, cfg: ExperimentConfig, train_cfg: TrainConfig | None = None,
                  bank_seed: int | None = None, extractor_seed: int | None = None,
                  markers=None, backbone=None) -> WatermarkSystem:
    """Load ``path`` if present, else train with ``train_cfg`` (default: the config's) and save there."""
    path = Path(path)
    if path.exists():
        log.info("loading %s", path)
        return load_system(path)[0]
    bb = backbone or cfg.backbone
    mk = markers or cfg.markers
    ext = replace(cfg.extractor_config(), key_bits=mk.key_bits(bb), image_size=bb.image_size)
    system = build_system(bb, mk, ext, cfg.seeds.backbone,
                          cfg.seeds.bank if bank_seed is None else bank_seed,
                          cfg.seeds.extractor if extractor_seed is None else extractor_seed)
    tc = train_cfg or cfg.train
    start = time.perf_counter()
    train(system, tc, log_every=500)
    log.info("trained %s in %.0fs", path.name, time.perf_counter() - start)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_system(path, system)
    return system
