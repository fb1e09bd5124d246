"""Image distortions used both as training augmentations and as attacks.

All functions take and return NCHW float tensors in ``[0, 1]`` and are
differentiable almost everywhere; the JPEG proxy passes gradients straight
through its rounding step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import engine as E

KINDS = ("identity", "crop", "rotate", "resize", "brightness", "jpeg_proxy", "gaussian_noise", "blur")

# (low, high) inclusive bounds per kind
VALID_RANGES = {
    "identity": (0.0, 0.0),
    "crop": (0.0, 0.95),          # removed area fraction
    "rotate": (-360.0, 360.0),    # degrees
    "resize": (0.05, 1.0),        # down-scale factor
    "brightness": (0.0, 4.0),     # multiplicative factor
    "jpeg_proxy": (1.0, 100.0),   # quality
    "gaussian_noise": (0.0, 1.0),  # sigma
    "blur": (0.0, 10.0),          # sigma; 0 is identity
}

# standard JPEG luminance quantisation table (ITU T.81 Annex K)
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class DistortionError(ValueError):
    pass


@dataclass(frozen=True)
class Distortion:
    kind: str
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in VALID_RANGES:
            raise DistortionError(f"unknown distortion {self.kind!r}")
        lo, hi = VALID_RANGES[self.kind]
        if not (lo <= float(self.param) <= hi):
            raise DistortionError(f"{self.kind} parameter {self.param} outside [{lo}, {hi}]")

    @property
    def label(self) -> str:
        return self.kind if self.kind == "identity" else f"{self.kind}({self.param:g})"


def quant_table(quality: float) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    q = float(min(max(quality, 1.0), 100.0))
    s = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((LUMA_TABLE * s + 50.0) / 100.0), 1.0, 255.0)


def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``X = D @ x @ D.T``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0, :] = math.sqrt(1.0 / n)
    return d


def _round_ste(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def jpeg_proxy(x: torch.Tensor, quality: float) -> torch.Tensor:
    """Per-channel 8x8 block DCT, quantise with the scaled luminance table,
    dequantise, inverse DCT, clamp.  Sizes that are not multiples of 8 are
    edge-padded and cropped back."""
    n, c, h, w = x.shape
    ph, pw = (-h) % 8, (-w) % 8
    y = F.pad(x, (0, pw, 0, ph), mode="replicate") if (ph or pw) else x
    H, W = y.shape[-2:]
    D = torch.as_tensor(dct_matrix(), dtype=x.dtype)
    Q = torch.as_tensor(quant_table(quality), dtype=x.dtype)
    blocks = (y * 255.0 - 128.0).reshape(n, c, H // 8, 8, W // 8, 8).permute(0, 1, 2, 4, 3, 5)
    coef = D @ blocks @ D.T
    coef = _round_ste(coef / Q) * Q
    rec = D.T @ coef @ D
    rec = rec.permute(0, 1, 2, 4, 3, 5).reshape(n, c, H, W)
    rec = (rec + 128.0) / 255.0
    return rec[..., :h, :w].clamp(0.0, 1.0)


def crop(x: torch.Tensor, fraction: float) -> torch.Tensor:
    """Keep the centred window holding ``1 - fraction`` of the area, resize back."""
    if fraction <= 0:
        return x
    h, w = x.shape[-2:]
    side = math.sqrt(1.0 - fraction)
    ch, cw = max(1, int(round(h * side))), max(1, int(round(w * side)))
    top, left = (h - ch) // 2, (w - cw) // 2
    window = x[..., top:top + ch, left:left + cw]
    return F.interpolate(window, size=(h, w), mode="bilinear", align_corners=False).clamp(0.0, 1.0)


def rotate(x: torch.Tensor, degrees: float) -> torch.Tensor:
    """Bilinear rotation about the image centre, reflect padding."""
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    mat = torch.tensor([[cos, -sin, 0.0], [sin, cos, 0.0]], dtype=x.dtype)
    grid = F.affine_grid(mat.expand(x.shape[0], 2, 3), list(x.shape), align_corners=False)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out.clamp(0.0, 1.0)


def resize(x: torch.Tensor, factor: float) -> torch.Tensor:
    """Bilinear down-scale by ``factor`` then back up to the original size."""
    if factor >= 1.0:
        return x
    h, w = x.shape[-2:]
    small = F.interpolate(x, size=(max(1, round(h * factor)), max(1, round(w * factor))),
                          mode="bilinear", align_corners=False)
    return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False).clamp(0.0, 1.0)


def brightness(x: torch.Tensor, factor: float) -> torch.Tensor:
    return (x * factor).clamp(0.0, 1.0)


def gaussian_noise(x: torch.Tensor, sigma: float, generator: torch.Generator | None = None) -> torch.Tensor:
    if sigma <= 0:
        return x
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return (x + sigma * noise).clamp(0.0, 1.0)


def blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma <= 0:
        return x
    return E.gaussian_blur(x, sigma).clamp(0.0, 1.0)


def apply(x: torch.Tensor, distortion: Distortion, seed: int | None = None) -> torch.Tensor:
    """Apply ``distortion`` to a batch (or a single CHW image)."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    kind, p = distortion.kind, float(distortion.param)
    if kind == "identity":
        out = x
    elif kind == "crop":
        out = crop(x, p)
    elif kind == "rotate":
        out = rotate(x, p)
    elif kind == "resize":
        out = resize(x, p)
    elif kind == "brightness":
        out = brightness(x, p)
    elif kind == "jpeg_proxy":
        out = jpeg_proxy(x, p)
    elif kind == "gaussian_noise":
        gen = torch.Generator().manual_seed(int(seed)) if seed is not None else None
        out = gaussian_noise(x, p, gen)
    else:
        out = blur(x, p)
    return out[0] if single else out


# The battery evaluated after training: two strengths per family.
BATTERY = (
    Distortion("crop", 0.1), Distortion("crop", 0.5),
    Distortion("rotate", 25.0), Distortion("rotate", 90.0),
    Distortion("resize", 0.3), Distortion("resize", 0.7),
    Distortion("brightness", 1.5), Distortion("brightness", 2.0),
    Distortion("jpeg_proxy", 80.0), Distortion("jpeg_proxy", 50.0),
)


@dataclass(frozen=True)
class AugmentationSpec:
    """Per-sample uniform choice of kind, then a uniform parameter draw."""
    kinds: tuple[str, ...] = ("identity", "crop", "rotate", "resize", "brightness", "jpeg_proxy", "gaussian_noise")
    crop: tuple[float, float] = (0.1, 0.5)
    rotate: tuple[float, float] = (-25.0, 25.0)
    resize: tuple[float, float] = (0.3, 0.7)
    brightness: tuple[float, float] = (1.0, 2.0)
    jpeg_qualities: tuple[float, ...] = (50.0, 80.0)
    noise: tuple[float, float] = (0.0, 0.05)

    def sample(self, rng: np.random.Generator) -> Distortion:
        kind = self.kinds[int(rng.integers(len(self.kinds)))]
        if kind == "identity":
            return Distortion("identity")
        if kind == "jpeg_proxy":
            return Distortion(kind, float(self.jpeg_qualities[int(rng.integers(len(self.jpeg_qualities)))]))
        lo, hi = {"crop": self.crop, "rotate": self.rotate, "resize": self.resize,
                  "brightness": self.brightness, "gaussian_noise": self.noise}[kind]
        return Distortion(kind, float(rng.uniform(lo, hi)))


def augment_batch(x: torch.Tensor, spec: AugmentationSpec, rng: np.random.Generator) -> tuple[torch.Tensor, list[Distortion]]:
    """One independent draw per sample."""
    outs, drawn = [], []
    for i in range(x.shape[0]):
        d = spec.sample(rng)
        seed = int(rng.integers(2**31 - 1))
        outs.append(apply(x[i:i + 1], d, seed=seed))
        drawn.append(d)
    return torch.cat(outs, dim=0), drawn
