"""Joint training of the marker bank and the extractor.

Objective per batch::

    L = L_ver(V(T(x_marked)), key) + lam * L_imp(x_marked, x_clean)

``L_imp`` compares fixed random-feature embeddings of the clean and marked
renders of the same ``(q, t)``; ``L_ver`` is bitwise BCE on the extractor
logits of an augmented copy of the marked render.  One key is drawn per
batch, so the expectation over keys is a Monte-Carlo average across steps.

Randomness for step ``s`` comes from ``np.random.default_rng([seed, s])``,
which makes a resumed run replay exactly the draws of an uninterrupted one.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import engine as E
from .distortions import AugmentationSpec, augment_batch
from .generator import sample_inputs
from .keycodec import sample_key
from .system import WatermarkSystem, load_system, save_system

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class FeatureSpec:
    scales: tuple[int, ...] = (1, 2, 4)
    weights: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    channels: int = 16
    seed: int = 1234
    # unit-normalise each feature vector across channels (LPIPS does)
    unit_norm: bool = False


class RandomFeatures(nn.Module):
    """Average-pool by ``scale`` then two fixed random 3x3 conv layers."""

    def __init__(self, scale: int, channels: int, gen: torch.Generator, unit_norm: bool = False):
        super().__init__()
        self.scale = scale
        self.unit_norm = unit_norm
        self.w1 = nn.Parameter(torch.randn(channels, 3, 3, 3, generator=gen) * math.sqrt(2.0 / 27), requires_grad=False)
        self.w2 = nn.Parameter(torch.randn(channels, channels, 3, 3, generator=gen) * math.sqrt(2.0 / (9 * channels)),
                               requires_grad=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.scale > 1:
            x = nn.functional.avg_pool2d(x, self.scale)
        h = E.leaky_relu(E.conv2d(x, self.w1, padding=1))
        f = E.conv2d(h, self.w2, padding=1)
        if self.unit_norm:
            f = f / torch.sqrt((f ** 2).sum(1, keepdim=True) + 1e-10)
        # the squared norm then averages over positions instead of summing
        return f / math.sqrt(f.shape[-1] * f.shape[-2])


class PerceptualFeatures(nn.Module):
    def __init__(self, spec: FeatureSpec = FeatureSpec()):
        super().__init__()
        if len(spec.scales) != len(spec.weights):
            raise ValueError("one weight per feature scale")
        self.spec = spec
        gen = torch.Generator().manual_seed(spec.seed)
        self.nets = nn.ModuleList(RandomFeatures(s, spec.channels, gen, spec.unit_norm) for s in spec.scales)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [net(x) for net in self.nets]


def loss_imp(marked: torch.Tensor, clean: torch.Tensor, features) -> torch.Tensor:
    """``sum_k w_k ||phi_k(marked) - phi_k(clean)||^2`` averaged over the batch.

    The norm is a plain sum over feature elements, so with a single identity
    feature of weight 1 the loss is ``C * H * W * mse(marked, clean)``.
    ``features`` is a :class:`PerceptualFeatures` or a list of
    ``(weight, callable)`` pairs.
    """
    if marked.shape != clean.shape:
        raise E.ShapeError(f"loss_imp shape mismatch {tuple(marked.shape)} vs {tuple(clean.shape)}")
    if isinstance(features, PerceptualFeatures):
        pairs = list(zip(features.spec.weights, features.nets))
    else:
        pairs = list(features)
    n = marked.shape[0]
    total = marked.new_zeros(())
    for w, phi in pairs:
        diff = phi(marked) - phi(clean)
        total = total + w * (diff ** 2).sum() / n
    return total


def loss_ver(logits: torch.Tensor, key_bits: torch.Tensor) -> torch.Tensor:
    """Mean bitwise BCE in the stable form ``max(u,0) - u*k + log1p(exp(-|u|))``."""
    key_bits = key_bits.to(logits.dtype)
    if key_bits.dim() == 1:
        key_bits = key_bits.expand_as(logits)
    if logits.shape != key_bits.shape:
        raise E.ShapeError(f"loss_ver: logits {tuple(logits.shape)} vs key {tuple(key_bits.shape)}")
    per_bit = logits.clamp(min=0) - logits * key_bits + torch.log1p(torch.exp(-logits.abs()))
    return per_bit.mean()


# ---------------------------------------------------------------------------
# config / records


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    # lam is held at 0 for lam_delay steps, then ramps linearly to lam over lam_warmup steps
    lam_delay: int = 1000
    lam_warmup: int = 1000
    steps: int = 3000
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    optim: E.OptimConfig = field(default_factory=E.OptimConfig)
    # class ids the training batches draw from; None means all classes
    class_subset: tuple[int, ...] | None = None
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lam_warmup < 0 or self.lam_delay < 0:
            raise ValueError("lam_delay and lam_warmup must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    step: int
    l_imp: float
    l_ver: float
    bit_acc: float
    psnr: float
    seconds: float


CSV_FIELDS = ("step", "l_imp", "l_ver", "bit_acc", "psnr", "seconds")


def append_records(path, records: list[TrainRecord]) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.step, f"{r.l_imp:.6g}", f"{r.l_ver:.6g}", f"{r.bit_acc:.4f}", f"{r.psnr:.3f}",
                        f"{r.seconds:.4f}"])


# ---------------------------------------------------------------------------
# trainer


def _batch_psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    m = float(((a - b) ** 2).mean())
    return 100.0 if m <= 1e-10 else min(100.0, 10.0 * math.log10(1.0 / m))


class Trainer:
    """Owns the optimizer and step counter for one :class:`WatermarkSystem`."""

    def __init__(self, system: WatermarkSystem, config: TrainConfig):
        config.validate()
        self.system = system
        self.config = config
        self.features = PerceptualFeatures(config.features)
        self.params = list(system.bank.parameters()) + list(system.extractor.parameters())
        for p in self.params:
            p.requires_grad_(True)
        system.generator.freeze()
        self.opt = E.make_optimizer(self.params, config.optim)
        self.step = 0
        self.records: list[TrainRecord] = []

    def lam_at(self, step: int) -> float:
        c = self.config
        if step < c.lam_delay:
            return 0.0
        if c.lam_warmup == 0:
            return c.lam
        return c.lam * min(1.0, (step - c.lam_delay) / c.lam_warmup)

    def rng_for(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, step])

    def _sample_batch(self, rng: np.random.Generator):
        cfg = self.system.generator.config
        q, t = sample_inputs(cfg, self.config.batch_size, rng)
        if self.config.class_subset is not None:
            subset = np.asarray(self.config.class_subset, dtype=np.int64)
            t = torch.from_numpy(subset[rng.integers(len(subset), size=self.config.batch_size)])
        return q, t

    def train_step(self) -> TrainRecord:
        start = time.perf_counter()
        sys_ = self.system
        rng = self.rng_for(self.step)
        key = sample_key(sys_.M, rng)
        path = sys_.bank.route(key)
        q, t = self._sample_batch(rng)
        with torch.no_grad():
            clean = sys_.generator(q, t)
        marked = sys_.generator(q, t, bank=sys_.bank, path=path)
        if self.config.augment:
            seen, _ = augment_batch(marked, self.config.augmentation, rng)
        else:
            seen = marked
        logits = sys_.extractor(seen)
        target = torch.as_tensor(key.bits, dtype=torch.float32)
        l_ver = loss_ver(logits, target)
        l_imp = loss_imp(marked, clean, self.features)
        loss = l_ver + self.lam_at(self.step) * l_imp
        if not bool(torch.isfinite(loss)):
            raise TrainingError(f"non-finite loss at step {self.step}: l_ver={l_ver.item()} l_imp={l_imp.item()}")
        grads = E.backward(loss, self.params)
        E.optimizer_step(self.opt, self.params, grads)
        with torch.no_grad():
            clean_logits = sys_.extractor(marked)
            bit_acc = float(((clean_logits >= 0).float() == target).float().mean())
        rec = TrainRecord(self.step, float(l_imp.detach()), float(l_ver.detach()), bit_acc, _batch_psnr(marked.detach(), clean),
                          time.perf_counter() - start)
        self.records.append(rec)
        self.step += 1
        return rec

    # -- checkpointing -----------------------------------------------------

    def save(self, path) -> Path:
        extra = E.optimizer_state_entries(self.opt)
        return save_system(path, self.system, extra, {"train": self.config.as_dict(), "step": self.step})

    @classmethod
    def resume(cls, path, config: TrainConfig | None = None) -> "Trainer":
        system, manifest, entries = load_system(path)
        cfg = config or train_config_from_dict(manifest["train"])
        trainer = cls(system, cfg)
        E.load_optimizer_state(trainer.opt, entries)
        trainer.step = int(manifest.get("step", 0))
        return trainer


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    aug = dict(d.pop("augmentation"))
    for k in list(aug):
        aug[k] = tuple(aug[k])
    feats = dict(d.pop("features"))
    feats["scales"] = tuple(feats["scales"])
    feats["weights"] = tuple(feats["weights"])
    optim = dict(d.pop("optim"))
    optim["betas"] = tuple(optim["betas"])
    if d.get("class_subset") is not None:
        d["class_subset"] = tuple(d["class_subset"])
    return TrainConfig(augmentation=AugmentationSpec(**aug), features=FeatureSpec(**feats),
                       optim=E.OptimConfig(**optim), **d)


def train(system: WatermarkSystem, config: TrainConfig, out_path=None, records_csv=None,
          log_every: int = 0, trainer: Trainer | None = None) -> tuple[Trainer, list[TrainRecord]]:
    """Run (or continue) training up to ``config.steps`` total steps.

    Writes the checkpoint atomically to ``out_path`` every
    ``config.checkpoint_every`` steps and at the end.
    """
    trainer = trainer or Trainer(system, config)
    new_records: list[TrainRecord] = []
    while trainer.step < config.steps:
        rec = trainer.train_step()
        new_records.append(rec)
        if log_every and rec.step % log_every == 0:
            log.info("step %d l_ver=%.4f l_imp=%.4g acc=%.3f psnr=%.1f", rec.step, rec.l_ver, rec.l_imp,
                     rec.bit_acc, rec.psnr)
        if out_path is not None and config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
            trainer.save(out_path)
            if records_csv is not None:
                append_records(records_csv, new_records)
                new_records = []
    if out_path is not None:
        trainer.save(out_path)
    if records_csv is not None and new_records:
        append_records(records_csv, new_records)
    return trainer, trainer.records
