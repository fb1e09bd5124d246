"""Removal and forgery attacks, and the CSV rows they report.

* parametric distortions (see :mod:`molm.distortions`)
* averaging: estimate the watermark as a mean residual over ``k`` images
  and subtract it (removal) or paste it onto clean images (forgery)
* white-box PGD on ``L_rem = mean_m (sigmoid(u_m) - 1/2)^2`` inside an MSE
  ball around the watermarked image
* a regeneration proxy: noise injection followed by Gaussian denoising
* the flip probe: randomise one active marker at a time and record which
  decoded bits change
* full-knowledge retraining: an independent bank and extractor trained on
  the same backbone with other seeds and data, scored crosswise
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import engine as E
from . import metrics
from .distortions import BATTERY, Distortion, apply as apply_distortion
from .evaluation import EvalSet, bit_accuracies, make_eval_set, match_counts, render
from .extractor import Extractor
from .generator import MarkerBank, sample_inputs
from .keycodec import WatermarkKey, sample_key
from .system import WatermarkSystem
from .training import train
from .verification import threshold_for_fpr

log = logging.getLogger(__name__)

__all__ = [
    "AttackError", "AttackRow", "BATTERY", "CrossReport", "FlipMatrix", "PgdConfig", "PgdResult",
    "apply_distortion", "averaging_attack", "averaging_experiment", "estimate_watermark", "flip_probe",
    "full_knowledge_attack", "pgd_removal", "psnr_to_mse_bound", "randomize_all_accuracy",
    "regeneration_proxy", "removal_loss", "write_rows",
]


class AttackError(ValueError):
    pass


def psnr_to_mse_bound(psnr_db: float) -> float:
    """MSE budget of a PSNR floor for images in ``[0, 1]``."""
    if psnr_db <= 0:
        raise AttackError("psnr_db must be positive")
    return 10.0 ** (-psnr_db / 10.0)


# ---------------------------------------------------------------------------
# result rows

SCHEMA = "attacks-v1"
CSV_HEADER = ("schema", "attack", "params", "n", "bit_acc", "psnr", "ssim", "detect_rate", "config_hash", "seed")


@dataclass
class AttackRow:
    attack: str
    params: str
    n: int
    bit_acc: float
    psnr: float
    ssim: float
    detect_rate: float
    config_hash: str = ""
    seed: int = 0

    def as_list(self) -> list:
        return [SCHEMA, self.attack, self.params, self.n, f"{self.bit_acc:.6f}", f"{self.psnr:.4f}",
                f"{self.ssim:.6f}", f"{self.detect_rate:.6f}", self.config_hash, self.seed]


def write_rows(path, rows: Iterable[AttackRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow(r.as_list())
    return path


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if r.get("schema") != SCHEMA:
            raise AttackError(f"{path}: unknown result schema {r.get('schema')!r}")
    return rows


def score(system: WatermarkSystem, attacked: torch.Tensor, reference: torch.Tensor, keys,
          attack: str, params: str, seed: int = 0, target_fpr: float = 0.01) -> AttackRow:
    """Bit accuracy and detection rate of ``attacked`` against ``keys``;
    PSNR/SSIM against ``reference``."""
    tau = threshold_for_fpr(system.M, target_fpr)
    acc = bit_accuracies(system.extractor, attacked, keys)
    matches = match_counts(system.extractor, attacked, keys)
    # SSIM needs an 11x11 window; tiny test models render smaller images
    ssim = metrics.ssim(attacked, reference) if min(attacked.shape[-2:]) >= 11 else float("nan")
    return AttackRow(attack, params, attacked.shape[0], float(acc.mean()), metrics.psnr(attacked, reference),
                     ssim, float((matches > tau).float().mean()),
                     system.config_hash(), seed)


# ---------------------------------------------------------------------------
# distortions and the regeneration proxy

# noise sigma, then denoising blur sigma
REGEN_LEVELS = {"off": (0.0, 0.0), "weak": (0.02, 0.35), "medium": (0.06, 0.8), "strong": (0.12, 1.2)}


def regeneration_proxy(images: torch.Tensor, strength: str, seed: int = 0) -> torch.Tensor:
    """Noise injection at a calibrated sigma, then Gaussian-blur denoising.

    A stand-in for diffusion regeneration: both push the image off its fine
    detail and back onto a smoothed version of it.
    """
    if strength not in REGEN_LEVELS:
        raise AttackError(f"unknown regeneration strength {strength!r}; choose from {sorted(REGEN_LEVELS)}")
    sigma, blur_sigma = REGEN_LEVELS[strength]
    if sigma == 0.0:
        return images
    gen = torch.Generator().manual_seed(int(seed))
    noisy = (images + sigma * torch.randn(images.shape, generator=gen, dtype=images.dtype)).clamp(0.0, 1.0)
    return E.gaussian_blur(noisy, blur_sigma).clamp(0.0, 1.0)


def distortion_rows(system: WatermarkSystem, ev: EvalSet, distortions: Sequence[Distortion] = BATTERY,
                    seed: int = 0, target_fpr: float = 0.01) -> list[AttackRow]:
    rows = [score(system, ev.marked, ev.marked, ev.keys, "none", "", seed, target_fpr)]
    for i, d in enumerate(distortions):
        with torch.no_grad():
            out = apply_distortion(ev.marked, d, seed=seed + i)
        rows.append(score(system, out, ev.marked, ev.keys, d.kind, f"{d.param:g}", seed, target_fpr))
    return rows


def regeneration_rows(system: WatermarkSystem, ev: EvalSet, levels: Sequence[str] = ("weak", "medium", "strong"),
                      seed: int = 0, target_fpr: float = 0.01) -> list[AttackRow]:
    rows = []
    for lvl in levels:
        out = regeneration_proxy(ev.marked, lvl, seed)
        rows.append(score(system, out, ev.marked, ev.keys, "regeneration_proxy", lvl, seed, target_fpr))
    return rows


# ---------------------------------------------------------------------------
# averaging

K_SCHEDULE = (5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000)
DESK_K_SCHEDULE = tuple(k for k in K_SCHEDULE if k <= 1000)


def estimate_watermark(watermarked: torch.Tensor, clean: torch.Tensor | None = None,
                       access: str = "grey") -> torch.Tensor:
    """Watermark estimate ``(C, H, W)`` from a pool of generated images.

    grey:  mean(watermarked) - mean(clean), with ``clean`` paired renders
    black: mean(watermarked) - its global mean pixel (per channel)
    """
    if watermarked.dim() != 4 or watermarked.shape[0] < 2:
        raise AttackError("averaging needs at least 2 images")
    if access == "grey":
        if clean is None or clean.shape != watermarked.shape:
            raise AttackError("grey-box averaging needs clean renders paired with the watermarked ones")
        return (watermarked - clean).mean(dim=0)
    if access == "black":
        avg = watermarked.mean(dim=0)
        return avg - avg.mean(dim=(1, 2), keepdim=True)
    raise AttackError(f"unknown access {access!r}")


def averaging_attack(pool: torch.Tensor, targets: torch.Tensor, mode: str, access: str = "grey",
                     k: int | None = None, pool_clean: torch.Tensor | None = None) -> torch.Tensor:
    """Estimate the watermark from the first ``k`` pool images and apply it to ``targets``."""
    k = pool.shape[0] if k is None else k
    if k < 2 or k > pool.shape[0]:
        raise AttackError(f"k must lie in [2, {pool.shape[0]}], got {k}")
    w = estimate_watermark(pool[:k], None if pool_clean is None else pool_clean[:k], access)
    if mode == "removal":
        return (targets - w).clamp(0.0, 1.0)
    if mode == "forgery":
        return (targets + w).clamp(0.0, 1.0)
    raise AttackError(f"unknown mode {mode!r}")


def averaging_experiment(system: WatermarkSystem, key: WatermarkKey, ks: Sequence[int], mode: str,
                         access: str = "grey", same_message: bool = True, n_targets: int = 200,
                         seed: int = 0, target_fpr: float = 0.01) -> list[AttackRow]:
    """Rows for one (mode, access) pair over the k schedule.

    The pool is rendered with ``key`` on every image when ``same_message``,
    else with a fresh random key per image.  Removal targets are fresh images
    watermarked with ``key``; forgery targets are clean renders.  Both are
    scored against ``key``.
    """
    kmax = max(ks)
    rng = np.random.default_rng([seed, 2002])
    q, t = sample_inputs(system.generator.config, kmax, rng)
    pool_keys = [key] * kmax if same_message else [sample_key(system.M, rng) for _ in range(kmax)]
    pool = render(system, q, t, pool_keys)
    pool_clean = render(system, q, t, None) if access == "grey" else None
    tq, tt = sample_inputs(system.generator.config, n_targets, rng)
    targets = render(system, tq, tt, [key] * n_targets if mode == "removal" else None)
    tag = f"averaging_{mode}_{access}" + ("_same" if same_message else "")
    rows = []
    for k in ks:
        out = averaging_attack(pool, targets, mode, access, k, pool_clean)
        rows.append(score(system, out, targets, [key] * n_targets, tag, f"k={k}", seed, target_fpr))
    return rows


# ---------------------------------------------------------------------------
# white-box PGD


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float
    steps: int = 100
    # per-pixel RMS length of one step; None means 2 * sqrt(epsilon) / steps
    step_size: float | None = None
    seed: int = 0
    random_start: bool = False
    target_fpr: float = 0.01

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise AttackError("epsilon must be > 0")
        if self.steps < 0:
            raise AttackError("steps must be >= 0")

    @property
    def rate(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.0 * math.sqrt(self.epsilon) / max(1, self.steps)


@dataclass
class PgdResult:
    images: torch.Tensor
    losses: list[float]
    matches: torch.Tensor
    bit_accuracy: torch.Tensor
    success: torch.Tensor
    threshold: int
    mse: torch.Tensor = field(default_factory=lambda: torch.zeros(0))

    @property
    def success_rate(self) -> float:
        return float(self.success.float().mean())


def removal_loss(logits: torch.Tensor) -> torch.Tensor:
    """Per-image ``mean_m (sigmoid(u_m) - 1/2)^2``; lies in ``[0, 1/4]``."""
    return ((torch.sigmoid(logits) - 0.5) ** 2).mean(dim=-1)


def project_mse_ball(x: torch.Tensor, ref: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Closest point (per image) with ``mean((x - ref)^2) <= epsilon``, then pixel clamp.

    The clamp only moves pixels toward ``ref`` (which lies in the box), so the
    MSE bound survives it.
    """
    d = x - ref
    m = (d ** 2).mean(dim=(1, 2, 3), keepdim=True)
    factor = torch.where(m > epsilon, torch.sqrt(epsilon / m.clamp_min(1e-30)), torch.ones_like(m))
    return (ref + d * factor).clamp(0.0, 1.0)


def pgd_removal(extractor: Extractor, ref: torch.Tensor, keys: WatermarkKey | Sequence[WatermarkKey],
                config: PgdConfig) -> PgdResult:
    """Gradient descent on ``L_rem`` with projection onto the MSE ball.

    Each step moves ``rate`` in per-pixel RMS along the normalised true
    gradient.  Removal succeeds on an image when the decoded bits no longer
    pass detection, i.e. at most ``tau`` of them match the key.
    """
    config.validate()
    if ref.dim() == 3:
        ref = ref.unsqueeze(0)
    ref = ref.detach()
    n = ref.shape[0]
    keys = [keys] * n if isinstance(keys, WatermarkKey) else list(keys)
    tau = threshold_for_fpr(extractor.M, config.target_fpr)
    x = ref.clone()
    if config.random_start:
        gen = torch.Generator().manual_seed(int(config.seed))
        x = project_mse_ball(ref + math.sqrt(config.epsilon) * torch.randn(ref.shape, generator=gen), ref,
                             config.epsilon)
    losses = []
    for _ in range(config.steps):
        x.requires_grad_(True)
        loss = removal_loss(extractor(x))
        (grad,) = torch.autograd.grad(loss.sum(), x)
        losses.append(float(loss.mean().detach()))
        with torch.no_grad():
            rms = torch.sqrt((grad ** 2).mean(dim=(1, 2, 3), keepdim=True)).clamp_min(1e-20)
            x = project_mse_ball(x - config.rate * grad / rms, ref, config.epsilon)
    x = x.detach()
    with torch.no_grad():
        losses.append(float(removal_loss(extractor(x)).mean()))
    matches = match_counts(extractor, x, keys)
    return PgdResult(x, losses, matches, matches.float() / extractor.M, matches <= tau, tau,
                     ((x - ref) ** 2).mean(dim=(1, 2, 3)))


def pgd_rows(system: WatermarkSystem, ev: EvalSet, epsilons: Sequence[float], steps: int = 100,
             seed: int = 0, target_fpr: float = 0.01) -> list[AttackRow]:
    rows = []
    for eps in epsilons:
        res = pgd_removal(system.extractor, ev.marked, ev.keys, PgdConfig(eps, steps, seed=seed, target_fpr=target_fpr))
        row = score(system, res.images, ev.marked, ev.keys, "pgd", f"eps={eps:g}", seed, target_fpr)
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# flip probe


@dataclass
class FlipMatrix:
    """``freq[b, j]``: share of prompts on which randomising site ``b`` flipped bit ``j``."""
    freq: np.ndarray
    sites: list
    key: WatermarkKey
    n_prompts: int

    def blocks_per_bit(self, threshold: float = 0.0) -> np.ndarray:
        return (self.freq > threshold).sum(axis=0)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site"] + [f"bit{j}" for j in range(self.freq.shape[1])])
            for site, row in zip(self.sites, self.freq):
                w.writerow([site] + [f"{v:.4f}" for v in row])
        return path


def _randomize_(marker: torch.nn.Module, gen: torch.Generator, fallback_std: float) -> None:
    """Fresh Gaussian values with each tensor's own standard deviation."""
    with torch.no_grad():
        for p in marker.parameters():
            std = float(p.std()) if p.numel() > 1 else 0.0
            std = std if std > 0 else fallback_std
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def _snapshot(bank: MarkerBank) -> list[torch.Tensor]:
    return [p.detach().clone() for p in bank.parameters()]


def _restore(bank: MarkerBank, snap: list[torch.Tensor]) -> None:
    with torch.no_grad():
        for p, s in zip(bank.parameters(), snap):
            p.copy_(s)


def _warn_if_untrained(bank: MarkerBank) -> None:
    if all(float(m.B.detach().abs().max()) == 0.0 for row in bank.markers for m in row):
        warnings.warn("every marker has B = 0; the bank looks untrained", stacklevel=3)


def flip_probe(system: WatermarkSystem, key: WatermarkKey, q: torch.Tensor, t: torch.Tensor, seed: int = 0,
               sites: Sequence[int] | None = None) -> FlipMatrix:
    """Randomise the active marker of each routed site in turn (path unchanged),
    re-render, decode, and record which bits differ from ``key``."""
    bank = system.bank
    _warn_if_untrained(bank)
    path = bank.route(key)
    sites = list(range(bank.L)) if sites is None else list(sites)
    target = torch.tensor(key.bits, dtype=torch.float32)
    gen = torch.Generator().manual_seed(int(seed))
    snap = _snapshot(bank)
    freq = np.zeros((len(sites), key.M))
    try:
        for row, b in enumerate(sites):
            _randomize_(bank.markers[b][path.indices[b]], gen, bank.config.init_std)
            with torch.no_grad():
                bits = (system.extractor(system.generator(q, t, bank=bank, path=path)) >= 0).float()
            freq[row] = (bits != target).float().mean(dim=0).numpy()
            _restore(bank, snap)
    finally:
        _restore(bank, snap)
    return FlipMatrix(freq, [bank.sites[b] for b in sites], key, q.shape[0])


def randomize_all_accuracy(system: WatermarkSystem, key: WatermarkKey, q: torch.Tensor, t: torch.Tensor,
                           seed: int = 0) -> float:
    """Bit accuracy when every active marker is randomised at once."""
    bank = system.bank
    path = bank.route(key)
    gen = torch.Generator().manual_seed(int(seed))
    snap = _snapshot(bank)
    try:
        for b in range(bank.L):
            _randomize_(bank.markers[b][path.indices[b]], gen, bank.config.init_std)
        with torch.no_grad():
            x = system.generator(q, t, bank=bank, path=path)
        return float(bit_accuracies(system.extractor, x, [key] * q.shape[0]).mean())
    finally:
        _restore(bank, snap)


# ---------------------------------------------------------------------------
# full-knowledge retraining


@dataclass
class CrossReport:
    defender_on_defender: float
    defender_on_attacker: float
    attacker_on_attacker: float
    attacker_on_defender: float
    n: int

    def rows(self, config_hash: str = "", seed: int = 0) -> list[AttackRow]:
        nan = float("nan")
        return [AttackRow("full_knowledge", name, self.n, v, nan, nan, nan, config_hash, seed)
                for name, v in (("defender_on_defender", self.defender_on_defender),
                                ("defender_on_attacker", self.defender_on_attacker),
                                ("attacker_on_attacker", self.attacker_on_attacker),
                                ("attacker_on_defender", self.attacker_on_defender))]


def cross_extraction(defender: WatermarkSystem, attacker: WatermarkSystem, n: int = 400, seed: int = 0) -> CrossReport:
    """Both extractors on both sets of images; one random key per prompt."""
    if defender.M != attacker.M:
        raise AttackError("defender and attacker must use the same key length")
    d = make_eval_set(defender, n, seed)
    a = EvalSet(d.q, d.t, d.keys, d.clean, render(attacker, d.q, d.t, d.keys))
    return CrossReport(
        float(bit_accuracies(defender.extractor, d.marked, d.keys).mean()),
        float(bit_accuracies(defender.extractor, a.marked, a.keys).mean()),
        float(bit_accuracies(attacker.extractor, a.marked, a.keys).mean()),
        float(bit_accuracies(attacker.extractor, d.marked, d.keys).mean()),
        n,
    )


def independent_system(defender: WatermarkSystem, bank_seed: int, extractor_seed: int) -> WatermarkSystem:
    """Same frozen backbone, freshly initialised bank and extractor."""
    gen = copy.deepcopy(defender.generator)
    bank = MarkerBank(defender.bank.backbone_config, defender.bank.config, bank_seed)
    ext = Extractor(defender.extractor.config, extractor_seed)
    return WatermarkSystem(gen, bank, ext)


def full_knowledge_attack(defender: WatermarkSystem, train_config, bank_seed: int = 101,
                          extractor_seed: int = 102, n_eval: int = 400, seed: int = 0,
                          out_path=None) -> tuple[WatermarkSystem, CrossReport]:
    """Train an attacker's own bank and extractor with the defender's recipe
    but other seeds (and whatever data subset ``train_config`` selects)."""
    attacker = independent_system(defender, bank_seed, extractor_seed)
    train(attacker, train_config, out_path=out_path)
    return attacker, cross_extraction(defender, attacker, n_eval, seed)
