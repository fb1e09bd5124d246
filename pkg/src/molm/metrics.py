"""Fidelity metrics: PSNR, SSIM and a Frechet distance over random features.

The Frechet distance here is computed in the embedding space of fixed random
convolutional features, not Inception features, so its values are only
comparable with each other (watermarked vs clean against clean vs clean).
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import engine as E

PSNR_CAP = 100.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class MetricError(ValueError):
    pass


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise E.ShapeError(f"expected CHW or NCHW images, got {tuple(x.shape)}")
    return x


def _check_pair(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise E.ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(a, b) -> float:
    """PSNR over the whole batch for images in ``[0, 1]``, capped at 100 dB."""
    a, b = _check_pair(a, b)
    return psnr_from_mse(float(((a - b) ** 2).mean()))


def psnr_per_image(a, b) -> list[float]:
    a, b = _check_pair(a, b)
    return [psnr_from_mse(float(m)) for m in ((a - b) ** 2).mean(dim=(1, 2, 3))]


def ssim_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    g = E.gaussian_kernel1d(sigma, radius=size // 2, dtype=torch.float64)
    return torch.outer(g, g)


def ssim_map(a, b, size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Per-channel SSIM map over all valid window positions, ``(N, C, H', W')``."""
    a, b = _check_pair(a, b)
    n, c, h, w = a.shape
    if h < size or w < size:
        raise MetricError(f"images must be at least {size}x{size}")
    win = ssim_window(size, sigma).expand(c, 1, size, size)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels and images."""
    return float(ssim_map(a, b).mean())


def ssim_per_image(a, b) -> list[float]:
    return [float(v) for v in ssim_map(a, b).mean(dim=(1, 2, 3))]


# ---------------------------------------------------------------------------
# Frechet distance


def sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The cross term uses ``Tr((S_a S_b)^{1/2}) = Tr((R S_b R)^{1/2})`` with
    ``R = S_a^{1/2}``; the inner product is symmetric PSD so an
    eigendecomposition gives its square root.
    """
    mu_a, mu_b = np.asarray(mu_a, np.float64), np.asarray(mu_b, np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    root = sqrtm_psd(cov_a)
    inner = root @ cov_b @ root
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    cross = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, np.float64)
    return features.mean(axis=0), np.cov(features, rowvar=False)


class FrechetFeatures(nn.Module):
    """Two fixed random conv layers, then average and max pooling; 64-d embedding."""

    def __init__(self, seed: int = 4321, channels: int = 32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w1 = nn.Parameter(torch.randn(channels, 3, 3, 3, generator=gen) * math.sqrt(2.0 / 27),
                               requires_grad=False)
        self.w2 = nn.Parameter(torch.randn(channels, channels, 3, 3, generator=gen) * math.sqrt(2.0 / (9 * channels)),
                               requires_grad=False)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = E.leaky_relu(E.conv2d(x * 2.0 - 1.0, self.w1, stride=2, padding=1))
        h = E.leaky_relu(E.conv2d(h, self.w2, stride=2, padding=1))
        return torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)


MIN_FRECHET_SAMPLES = 64


def frechet_from_features(feats_a: np.ndarray, feats_b: np.ndarray, min_samples: int = MIN_FRECHET_SAMPLES) -> float:
    if len(feats_a) < min_samples or len(feats_b) < min_samples:
        raise MetricError(f"need at least {min_samples} samples per side, got {len(feats_a)} and {len(feats_b)}")
    return frechet_distance(*gaussian_stats(feats_a), *gaussian_stats(feats_b))


def feature_frechet(images_a: torch.Tensor, images_b: torch.Tensor, embedder: FrechetFeatures | None = None,
                    min_samples: int = MIN_FRECHET_SAMPLES) -> float:
    """Frechet distance between two image sets in random-feature space."""
    embedder = embedder or FrechetFeatures()
    fa = embedder(torch.as_tensor(images_a, dtype=torch.float32)).double().numpy()
    fb = embedder(torch.as_tensor(images_b, dtype=torch.float32)).double().numpy()
    return frechet_from_features(fa, fb, min_samples)
