"""Lossless 8-bit PNG storage with text metadata (config hash, key)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from PIL.PngImagePlugin import PngInfo


def quantize(image: torch.Tensor) -> torch.Tensor:
    """Round to the 8-bit grid that a PNG stores."""
    return torch.round(image.clamp(0.0, 1.0) * 255.0) / 255.0


def save_png(path, image: torch.Tensor, text: dict[str, str] | None = None) -> Path:
    """``image`` is CHW in ``[0, 1]``."""
    path = Path(path)
    arr = np.round(image.detach().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy() * 255.0).astype(np.uint8)
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, str(v))
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)
    return path


def load_png(path) -> tuple[torch.Tensor, dict[str, str]]:
    with Image.open(path) as im:
        text = dict(getattr(im, "text", {}) or {})
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous(), text
