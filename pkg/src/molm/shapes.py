"""Procedural shapes data and backbone pretraining.

``render(q, t)`` draws one coloured rectangle or ellipse on a two-tone
vertical gradient.  Geometry and colour jitter come from the first few
latent coordinates pushed through a sigmoid, the class id picks the shape
type (even: rectangle, odd: ellipse) and one of eight base palettes.  Since
the renderer is a deterministic function of ``(q, t)``, fitting the decoder
to it by regression makes ``q ~ N(0, I)`` sampling reproduce the data
distribution without an encoder.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch

from . import engine as E
from .generator import GeneratorModel, sample_inputs

log = logging.getLogger(__name__)

PALETTES = np.array([
    [0.90, 0.20, 0.15], [0.15, 0.55, 0.90], [0.20, 0.75, 0.30], [0.95, 0.80, 0.15],
    [0.60, 0.25, 0.75], [0.95, 0.50, 0.10], [0.10, 0.70, 0.70], [0.85, 0.85, 0.85],
], dtype=np.float32)


def render(q: torch.Tensor, t: torch.Tensor, size: int) -> torch.Tensor:
    """Anti-aliased shapes, ``(N, 3, size, size)`` in ``[0, 1]``."""
    q = q[:, :12].double()
    if q.shape[1] < 12:
        # short latents leave the remaining shape parameters at their midpoint
        q = torch.nn.functional.pad(q, (0, 12 - q.shape[1]))
    u = torch.sigmoid(q)
    n = q.shape[0]
    t = torch.as_tensor(t, dtype=torch.long)
    cx, cy = 0.25 + 0.5 * u[:, 0], 0.25 + 0.5 * u[:, 1]
    hw, hh = 0.12 + 0.22 * u[:, 2], 0.12 + 0.22 * u[:, 3]
    top = 0.15 + 0.7 * u[:, 4:7]
    bottom = 0.15 + 0.7 * u[:, 7:10]
    pal = torch.from_numpy(PALETTES).double()[(t // 2) % len(PALETTES)]
    fg = (0.75 * pal + 0.25 * u[:, 9:12]).clamp(0, 1)

    coords = (torch.arange(size, dtype=torch.float64) + 0.5) / size
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    ramp = yy.view(1, 1, size, size)
    bg = top.view(n, 3, 1, 1) * (1 - ramp) + bottom.view(n, 3, 1, 1) * ramp

    dx = (xx.view(1, size, size) - cx.view(n, 1, 1)) / hw.view(n, 1, 1)
    dy = (yy.view(1, size, size) - cy.view(n, 1, 1)) / hh.view(n, 1, 1)
    rect = torch.maximum(dx.abs(), dy.abs())
    ell = torch.sqrt(dx ** 2 + dy ** 2)
    dist = torch.where((t % 2 == 0).view(n, 1, 1), rect, ell)
    # soft edge about one pixel wide
    edge = 1.0 / (size * torch.minimum(hw, hh)).view(n, 1, 1)
    mask = torch.clamp((1.0 - dist) / edge + 0.5, 0.0, 1.0).unsqueeze(1)
    img = bg * (1 - mask) + fg.view(n, 3, 1, 1) * mask
    return img.float()


def pretrain_backbone(model: GeneratorModel, steps: int = 2000, batch_size: int = 16, lr: float = 2e-3,
                      seed: int = 0, log_every: int = 0) -> list[float]:
    """Fit the backbone to the renderer by pixel MSE, then freeze it again."""
    cfg = model.config
    params = list(model.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = E.make_optimizer(params, E.OptimConfig(lr=lr, weight_decay=0.0))
    losses = []
    try:
        for step in range(steps):
            rng = np.random.default_rng([seed, step, 7])
            q, t = sample_inputs(cfg, batch_size, rng)
            target = render(q, t, cfg.image_size)
            # cosine decay to 5% of the base rate
            for g in opt.param_groups:
                g["lr"] = lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * step / max(1, steps))))
            loss = E.mse(model(q, t), target)
            E.optimizer_step(opt, params, E.backward(loss, params))
            losses.append(float(loss.detach()))
            if log_every and step % log_every == 0:
                log.info("pretrain step %d mse %.5f", step, losses[-1])
    finally:
        model.freeze()
    return losses
