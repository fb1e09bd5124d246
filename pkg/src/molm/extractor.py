"""Watermark extractor: image -> M logits -> key bits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import engine as E
from .keycodec import WatermarkKey


@dataclass(frozen=True)
class ExtractorConfig:
    key_bits: int = 16
    image_size: int = 32
    widths: tuple[int, ...] = (32, 64, 64, 128)
    slope: float = 0.2


def resize_to(images: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of NCHW images to ``size x size`` (no-op if already there)."""
    if images.shape[-2:] == (size, size):
        return images
    return F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)


class Extractor(nn.Module):
    """Four stride-2 convolutions, global average pool, linear head."""

    def __init__(self, config: ExtractorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        chans = (3,) + tuple(config.widths)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            std = math.sqrt(2.0 / ((1 + config.slope ** 2) * 9 * cin))
            self.weights.append(nn.Parameter(torch.randn(cout, cin, 3, 3, generator=gen) * std))
            self.biases.append(nn.Parameter(torch.zeros(cout)))
        self.head_w = nn.Parameter(torch.randn(chans[-1], config.key_bits, generator=gen) / math.sqrt(chans[-1]))
        self.head_b = nn.Parameter(torch.zeros(config.key_bits))

    @property
    def M(self) -> int:
        return self.config.key_bits

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4 or images.shape[1] != 3:
            raise E.ShapeError(f"extractor expects (N, 3, H, W) images, got {tuple(images.shape)}")
        if not bool(torch.isfinite(images).all()):
            raise E.NonFiniteError("non-finite input image")
        h = resize_to(images, self.config.image_size) * 2.0 - 1.0
        for w, b in zip(self.weights, self.biases):
            h = E.leaky_relu(E.conv2d(h, w, b, stride=2, padding=1), self.config.slope)
        h = h.mean(dim=(2, 3))
        return E.add(E.matmul(h, self.head_w), self.head_b)


def build_extractor(config: ExtractorConfig | None = None, seed: int = 0) -> Extractor:
    return Extractor(config or ExtractorConfig(), seed)


def extract_logits(model: Extractor, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(images)


def logits_to_bits(logits: torch.Tensor) -> torch.Tensor:
    """Round sigmoid(logits) at 0.5; a probability of exactly 0.5 rounds to 1."""
    return (torch.sigmoid(logits) >= 0.5).to(torch.int64)


def extract_key(model: Extractor, image: torch.Tensor) -> WatermarkKey | list[WatermarkKey]:
    """Decode one key per image; a single CHW image gives a single key."""
    single = image.dim() == 3
    bits = logits_to_bits(extract_logits(model, image))
    keys = [WatermarkKey(tuple(row.tolist())) for row in bits]
    return keys[0] if single else keys
