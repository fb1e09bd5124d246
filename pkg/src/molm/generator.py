"""Frozen convolutional decoder plus the routed bank of low-rank markers.

The backbone maps a latent ``q`` and a class id ``t`` to a ``3 x H x W``
image in ``[0, 1]``.  It is a stack of residual blocks::

    x   = upsample(h) if the block upsamples else h
    out = x + conv2(leaky(conv1(x)))

A routed block adds the output of exactly one of its ``P`` markers::

    h_out = F(h_in) + alpha * up(B @ A @ h_in)

where the marker is a pair of 1x1 convolutions (``d_in -> r -> d_out``)
reading the block input.  ``up`` is the block's own nearest upsampling, so
the marker term lands on the block output grid.  With ``per_conv=True``
every convolution inside a block becomes its own routing site and the
marker wraps that convolution instead (twice the key bits per block).

A fixed periodic texture is added to the features at every resolution
(``texture_gain``).  Random frozen weights alone give features that are
pure functions of the content; the texture stands in for the spatial
structure a trained decoder carries, which the markers can remix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from . import engine as E
from .keycodec import RoutingPath, WatermarkKey, bits_per_block, encode_routing


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    num_blocks: int = 8
    channels: int = 32
    latent_dim: int = 64
    num_classes: int = 16
    base_size: int = 4
    slope: float = 0.2
    # init gain of the second conv in each block; keeps residual growth tame
    residual_gain: float = 0.5
    # keeps pre-sigmoid activations mostly out of saturation
    output_gain: float = 0.35
    # nonzero channel means in the features, as in a trained decoder
    bias_std: float = 0.05
    # gain of the fixed periodic texture added at every resolution
    texture_gain: float = 2.0
    # shift that texture by a latent-driven offset per image
    texture_shift: bool = False

    def validate(self) -> None:
        if self.image_size < self.base_size or self.image_size % self.base_size:
            raise ConfigError("image_size must be a multiple of base_size")
        ratio = self.image_size // self.base_size
        if ratio & (ratio - 1):
            raise ConfigError("image_size / base_size must be a power of two")
        if self.num_blocks < self.num_upsamples:
            raise ConfigError(f"need at least {self.num_upsamples} blocks to reach {self.image_size}px")
        if min(self.channels, self.latent_dim, self.num_classes, self.num_blocks) < 1:
            raise ConfigError("sizes must be positive")

    @property
    def num_upsamples(self) -> int:
        return int(round(math.log2(self.image_size // self.base_size)))

    @property
    def upsample_blocks(self) -> tuple[int, ...]:
        # upsampling happens late (every other block at the end) so most
        # blocks run at low resolution; short stacks upsample from block 0
        n = self.num_upsamples
        return tuple(max(i, self.num_blocks - 2 * (n - i)) for i in range(n))


@dataclass(frozen=True)
class MarkerConfig:
    paths: int = 4
    rank: int = 8
    alpha: float = 1.0
    routed_blocks: tuple[int, ...] | None = None  # None routes every block
    per_conv: bool = False
    init_std: float = 0.02
    kernel_size: int = 1

    def sites(self, backbone: BackboneConfig) -> list[tuple[int, int | None]]:
        blocks = tuple(range(backbone.num_blocks)) if self.routed_blocks is None else tuple(self.routed_blocks)
        if len(set(blocks)) != len(blocks) or any(b < 0 or b >= backbone.num_blocks for b in blocks):
            raise ConfigError(f"invalid routed blocks {blocks}")
        if self.per_conv:
            return [(b, c) for b in blocks for c in (0, 1)]
        return [(b, None) for b in blocks]

    def num_sites(self, backbone: BackboneConfig) -> int:
        return len(self.sites(backbone))

    def key_bits(self, backbone: BackboneConfig) -> int:
        return self.num_sites(backbone) * bits_per_block(self.paths)


def _he(gen: torch.Generator, shape, fan_in: int, gain: float = 1.0, slope: float = 0.2) -> torch.Tensor:
    std = gain * math.sqrt(2.0 / ((1.0 + slope ** 2) * fan_in))
    return torch.randn(shape, generator=gen) * std


def _periodic_pattern(channels: int, size: int, gain: float, gen: torch.Generator) -> torch.Tensor:
    """Random mix of sin/cos waves with integer wave vectors up to Nyquist,
    so the pattern tiles the grid seamlessly."""
    kmax = max(1, size // 2)
    coords = torch.arange(size, dtype=torch.float64) / size
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    feats = []
    for kx in range(-kmax + 1, kmax + 1):
        for ky in range(0, kmax + 1):
            if ky == 0 and kx <= 0:
                continue
            arg = 2 * math.pi * (kx * xx + ky * yy)
            feats += [torch.sin(arg), torch.cos(arg)]
    f = torch.stack(feats).float()
    mix = torch.randn(channels, f.shape[0], generator=gen) * (gain / math.sqrt(f.shape[0] / 2))
    return torch.einsum("cf,fhw->chw", mix, f)


class TextureCode(nn.Module):
    """A fixed periodic texture at every resolution of the backbone.

    It gives the markers spatial carriers that do not depend on the content.
    With ``shift=True`` the whole stack is circularly translated by an offset
    drawn from the latent, so that averaged over images it cancels to zero.
    """

    def __init__(self, channels: int, base_size: int, levels: int, latent_dim: int, gain: float,
                 gen: torch.Generator, shift: bool = False):
        super().__init__()
        self.shift = shift
        self.patterns = nn.ParameterList(
            nn.Parameter(_periodic_pattern(channels, base_size * 2 ** i, gain, gen)) for i in range(levels))
        self.shift_dirs = nn.Parameter(torch.randn(2, latent_dim, generator=gen) / math.sqrt(latent_dim))

    def offsets(self, q: torch.Tensor) -> torch.Tensor:
        """Fractional offsets in ``[0, 1)``, shape ``(N, 2)``."""
        return torch.special.ndtr(E.matmul(q, self.shift_dirs.T)).clamp(0.0, 1.0 - 1e-7)

    def forward(self, q: torch.Tensor, level: int) -> torch.Tensor:
        pat = self.patterns[level]
        if not self.shift:
            return pat.unsqueeze(0).expand(q.shape[0], -1, -1, -1)
        size = pat.shape[-1]
        shifts = (self.offsets(q) * size).long()
        return torch.stack([torch.roll(pat, (int(dy), int(dx)), dims=(1, 2)) for dx, dy in shifts.tolist()])


class Block(nn.Module):
    def __init__(self, channels: int, upsample: bool, gen: torch.Generator, slope: float, gain: float,
                 bias_std: float):
        super().__init__()
        c = channels
        self.upsample = upsample
        self.slope = slope
        self.w1 = nn.Parameter(_he(gen, (c, c, 3, 3), 9 * c, slope=slope))
        self.b1 = nn.Parameter(torch.randn(c, generator=gen) * bias_std)
        self.w2 = nn.Parameter(_he(gen, (c, c, 3, 3), 9 * c, gain=gain, slope=slope))
        self.b2 = nn.Parameter(torch.randn(c, generator=gen) * bias_std)

    def forward(self, h, marker=None, conv_markers=(None, None), alpha: float = 1.0):
        x = E.upsample2x_nearest(h) if self.upsample else h
        y = E.conv2d(x, self.w1, self.b1, padding=1)
        if conv_markers[0] is not None:
            y = E.add(y, E.scale(conv_markers[0](x), alpha))
        a = E.leaky_relu(y, self.slope)
        y = E.conv2d(a, self.w2, self.b2, padding=1)
        if conv_markers[1] is not None:
            y = E.add(y, E.scale(conv_markers[1](a), alpha))
        out = E.add(x, y)
        if marker is not None:
            m = marker(h)
            if self.upsample:
                m = E.upsample2x_nearest(m)
            out = E.add(out, E.scale(m, alpha))
        return out


class GeneratorModel(nn.Module):
    """The frozen backbone.  All parameters have ``requires_grad=False``."""

    def __init__(self, config: BackboneConfig, seed: int):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        gen = torch.Generator().manual_seed(int(seed))
        c, d, b = config.channels, config.latent_dim, config.base_size
        self.embedding = nn.Parameter(torch.randn(config.num_classes, d, generator=gen))
        self.w_in = nn.Parameter(torch.randn(2 * d, c * b * b, generator=gen) / math.sqrt(2 * d))
        self.b_in = nn.Parameter(torch.zeros(c * b * b))
        ups = set(config.upsample_blocks)
        self.blocks = nn.ModuleList(
            Block(c, i in ups, gen, config.slope, config.residual_gain, config.bias_std) for i in range(config.num_blocks)
        )
        self.texture = (TextureCode(c, b, config.num_upsamples + 1, d, config.texture_gain, gen,
                                   config.texture_shift)
                        if config.texture_gain else None)
        self.w_out = nn.Parameter(_he(gen, (3, c, 3, 3), 9 * c, gain=config.output_gain, slope=config.slope))
        self.b_out = nn.Parameter(torch.zeros(3))
        self.freeze()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, q: torch.Tensor, t: torch.Tensor, bank: "MarkerBank | None" = None,
                path: RoutingPath | None = None) -> torch.Tensor:
        cfg = self.config
        if q.dim() != 2 or q.shape[1] != cfg.latent_dim:
            raise E.ShapeError(f"latent must be (N, {cfg.latent_dim}), got {tuple(q.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.shape[0] != q.shape[0]:
            raise E.ShapeError("latent/class batch mismatch")
        if bool(((t < 0) | (t >= cfg.num_classes)).any()):
            raise ValueError(f"class ids must lie in [0, {cfg.num_classes})")
        site_of: dict[tuple[int, int | None], nn.Module] = {}
        alpha = 1.0
        if bank is not None:
            if path is None:
                raise ValueError("a marker bank needs a routing path")
            site_of = bank.active(path)
            alpha = bank.config.alpha
        z = torch.cat([q, self.embedding[t]], dim=1)
        h = E.add(E.matmul(z, self.w_in), self.b_in)
        h = h.view(q.shape[0], cfg.channels, cfg.base_size, cfg.base_size)
        level = 0
        if self.texture is not None:
            h = E.add(h, self.texture(q, 0))
        for i, block in enumerate(self.blocks):
            h = block(h, marker=site_of.get((i, None)),
                      conv_markers=(site_of.get((i, 0)), site_of.get((i, 1))), alpha=alpha)
            if block.upsample:
                level += 1
                if self.texture is not None:
                    h = E.add(h, self.texture(q, level))
        return E.sigmoid(E.conv2d(h, self.w_out, self.b_out, padding=1))


class LoraMarker(nn.Module):
    """``h -> B @ (A @ h)`` per pixel.  ``A`` is ``r x d_in``, ``B`` is ``d_out x r``.

    ``ksize > 1`` widens ``A`` to a ``ksize x ksize`` convolution, which is
    how adapters on 3x3 convolutions are often built; the default stays 1.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, init_std: float, gen: torch.Generator, ksize: int = 1):
        super().__init__()
        self.A = nn.Parameter(torch.randn(rank, d_in, ksize, ksize, generator=gen) * init_std)
        self.B = nn.Parameter(torch.zeros(d_out, rank))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        r = self.A.shape[0]
        u = E.conv2d(h, self.A, padding=self.A.shape[-1] // 2)
        return E.conv2d(u, self.B.view(self.B.shape[0], r, 1, 1))


class MarkerBank(nn.Module):
    """``L x P`` markers.  ``markers[l][p]`` belongs to routing site ``l``."""

    def __init__(self, backbone: BackboneConfig, config: MarkerConfig, seed: int):
        super().__init__()
        bits_per_block(config.paths)
        self.backbone_config = backbone
        self.config = config
        self.seed = seed
        self.sites = config.sites(backbone)
        c = backbone.channels
        if config.rank < 1 or config.rank > c:
            raise ConfigError(f"rank must lie in [1, {c}]")
        gen = torch.Generator().manual_seed(int(seed))
        self.markers = nn.ModuleList(
            nn.ModuleList(LoraMarker(c, c, config.rank, config.init_std, gen, config.kernel_size) for _ in range(config.paths))
            for _ in self.sites
        )

    @property
    def L(self) -> int:
        return len(self.sites)

    @property
    def P(self) -> int:
        return self.config.paths

    @property
    def M(self) -> int:
        return self.L * bits_per_block(self.P)

    def route(self, key: WatermarkKey) -> RoutingPath:
        return encode_routing(key, self.L, self.P)

    def active(self, path: RoutingPath) -> dict[tuple[int, int | None], LoraMarker]:
        if path.L != self.L or path.P != self.P:
            raise ValueError(f"path (L={path.L}, P={path.P}) does not match bank (L={self.L}, P={self.P})")
        return {site: self.markers[l][p] for l, (site, p) in enumerate(zip(self.sites, path.indices))}

    def path_parameters(self, path: RoutingPath) -> list[nn.Parameter]:
        return [p for m in self.active(path).values() for p in m.parameters()]

    def manifest(self) -> dict:
        return {
            "L": self.L, "P": self.P, "rank": self.config.rank, "alpha": self.config.alpha,
            "sites": [[b, c] for b, c in self.sites], "per_conv": self.config.per_conv,
            "init_std": self.config.init_std, "seed": self.seed,
        }


def build_backbone(config: BackboneConfig | None = None, seed: int = 0) -> GeneratorModel:
    return GeneratorModel(config or BackboneConfig(), seed)


def build_bank(backbone: BackboneConfig, config: MarkerConfig | None = None, seed: int = 0) -> MarkerBank:
    return MarkerBank(backbone, config or MarkerConfig(), seed)


def forward_clean(model: GeneratorModel, q: torch.Tensor, t) -> torch.Tensor:
    return model(q, t)


def forward_marked(model: GeneratorModel, bank: MarkerBank, path: RoutingPath | WatermarkKey,
                   q: torch.Tensor, t) -> torch.Tensor:
    """Watermarked render; one marker per routed site, fixed for the whole pass."""
    if isinstance(path, WatermarkKey):
        path = bank.route(path)
    return model(q, t, bank=bank, path=path)


def sample_inputs(config: BackboneConfig, n: int, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    q = torch.from_numpy(rng.standard_normal((n, config.latent_dim)).astype(np.float32))
    t = torch.from_numpy(rng.integers(0, config.num_classes, size=n).astype(np.int64))
    return q, t


def backbone_manifest(config: BackboneConfig, seed: int) -> dict:
    return {"config": asdict(config), "seed": seed}
