"""Rendering evaluation sets and scoring decoded bits against their keys."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .generator import sample_inputs
from .keycodec import WatermarkKey, sample_key
from .system import WatermarkSystem


@dataclass
class EvalSet:
    q: torch.Tensor
    t: torch.Tensor
    keys: list[WatermarkKey]
    clean: torch.Tensor
    marked: torch.Tensor

    def __len__(self) -> int:
        return self.q.shape[0]

    @property
    def key_bits(self) -> torch.Tensor:
        return torch.tensor([k.bits for k in self.keys], dtype=torch.float32)


@torch.no_grad()
def render(system: WatermarkSystem, q: torch.Tensor, t: torch.Tensor, keys: list[WatermarkKey] | None,
           batch_size: int = 64) -> torch.Tensor:
    """Clean renders when ``keys`` is None, otherwise one key per image.

    Consecutive images that share a key are rendered in one pass.
    """
    out = []
    n = q.shape[0]
    i = 0
    while i < n:
        j = min(n, i + batch_size)
        if keys is not None:
            k = keys[i]
            stop = i + 1
            while stop < j and keys[stop] == k:
                stop += 1
            j = stop
            out.append(system.generator(q[i:j], t[i:j], bank=system.bank, path=system.bank.route(k)))
        else:
            out.append(system.generator(q[i:j], t[i:j]))
        i = j
    return torch.cat(out, dim=0)


def make_eval_set(system: WatermarkSystem, n: int, seed: int, key: WatermarkKey | None = None,
                  classes: tuple[int, ...] | None = None) -> EvalSet:
    """``n`` prompts; one shared ``key`` or, if None, a fresh random key per image."""
    rng = np.random.default_rng([seed, 1001])
    q, t = sample_inputs(system.generator.config, n, rng)
    if classes is not None:
        t = torch.from_numpy(np.asarray(classes, dtype=np.int64)[rng.integers(len(classes), size=n)])
    keys = [key] * n if key is not None else [sample_key(system.M, rng) for _ in range(n)]
    return EvalSet(q, t, keys, render(system, q, t, None), render(system, q, t, keys))


@torch.no_grad()
def decode_bits(extractor, images: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    outs = [(extractor(images[i:i + batch_size]) >= 0).float() for i in range(0, images.shape[0], batch_size)]
    return torch.cat(outs, dim=0)


def bit_accuracies(extractor, images: torch.Tensor, keys: list[WatermarkKey] | torch.Tensor) -> torch.Tensor:
    """Per-image fraction of matching bits."""
    target = keys if isinstance(keys, torch.Tensor) else torch.tensor([k.bits for k in keys], dtype=torch.float32)
    return (decode_bits(extractor, images) == target).float().mean(dim=1)


def match_counts(extractor, images: torch.Tensor, keys: list[WatermarkKey] | torch.Tensor) -> torch.Tensor:
    target = keys if isinstance(keys, torch.Tensor) else torch.tensor([k.bits for k in keys], dtype=torch.float32)
    return (decode_bits(extractor, images) == target).long().sum(dim=1)
