"""Bit accuracy, the binomial detection test, and key-database attribution.

Under the null hypothesis (image carries no watermark for this key) the
match count ``D`` between a fixed key and the decoded bits is
Binomial(M, 1/2).  The false-positive rate of threshold ``tau`` is the
upper tail::

    fpr(tau, M) = P(D > tau) = I_{1/2}(tau + 1, M - tau)

with ``I`` the regularized incomplete beta function.  ``threshold_for_fpr``
returns the smallest ``tau`` whose tail is within the target, and a
watermark is declared when ``D > tau`` -- that is, when at least
``tau + 1`` bits match.  Deciding on ``D >= tau`` instead would make the
realised false-positive rate ``P(D >= tau)``, which is larger than the
calibrated one (for M=28, tau=20 it is 1.8% rather than 0.63%).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .extractor import Extractor, logits_to_bits
from .keycodec import WatermarkKey, hamming

log = logging.getLogger(__name__)


class VerificationError(ValueError):
    pass


def bit_accuracy(key: WatermarkKey, decoded: WatermarkKey) -> float:
    if key.M != decoded.M:
        raise VerificationError(f"key length mismatch {key.M} vs {decoded.M}")
    return 1.0 - hamming(key, decoded) / key.M


# ---------------------------------------------------------------------------
# binomial tail, two independent routes


def fpr_exact(tau: int, M: int) -> Fraction:
    """``P(D > tau)`` for ``D ~ Binomial(M, 1/2)`` as an exact rational."""
    _check_tau(tau, M)
    return Fraction(sum(math.comb(M, k) for k in range(tau + 1, M + 1)), 2 ** M)


def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast for x < (a+1)/(a+b+2); use the symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def fpr(tau: int, M: int) -> float:
    """``P(D > tau)`` via the regularized incomplete beta ``I_{1/2}(tau+1, M-tau)``."""
    _check_tau(tau, M)
    if tau == M:
        return 0.0
    return betainc_regularized(tau + 1.0, float(M - tau), 0.5)


def _check_tau(tau: int, M: int) -> None:
    if M < 1:
        raise VerificationError(f"M must be >= 1, got {M}")
    if not 0 <= tau <= M:
        raise VerificationError(f"tau must lie in [0, {M}], got {tau}")


def threshold_for_fpr(M: int, target: float) -> int:
    """Smallest ``tau`` with ``fpr(tau, M) <= target`` (exact arithmetic)."""
    if not 0.0 < target < 1.0:
        raise VerificationError(f"target FPR must lie in (0, 1), got {target}")
    goal = Fraction(target)
    for tau in range(M + 1):
        if fpr_exact(tau, M) <= goal:
            return tau
    return M  # unreachable: fpr(M, M) = 0


def binomial_band(n: int, p: float, level: float = 0.99) -> tuple[int, int]:
    """Central ``level`` acceptance interval for a Binomial(n, p) count."""
    from scipy.stats import binom

    alpha = 1.0 - level
    lo = int(binom.ppf(alpha / 2, n, p))
    hi = int(binom.ppf(1 - alpha / 2, n, p))
    return lo, hi


# ---------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class DetectionReport:
    matches: int
    M: int
    threshold: int
    fpr_at_threshold: float
    target_fpr: float

    @property
    def bit_accuracy(self) -> float:
        return self.matches / self.M

    @property
    def min_matches(self) -> int:
        return self.threshold + 1

    @property
    def watermarked(self) -> bool:
        return self.matches > self.threshold

    CSV_HEADER = ("matches", "M", "bit_accuracy", "threshold", "min_matches", "fpr_at_threshold", "target_fpr",
                  "decision")

    def csv_row(self) -> list:
        return [self.matches, self.M, f"{self.bit_accuracy:.6f}", self.threshold, self.min_matches,
                f"{self.fpr_at_threshold:.6e}", self.target_fpr,
                "watermarked" if self.watermarked else "not_watermarked"]

    def text(self) -> str:
        return (f"matches      {self.matches}/{self.M}\n"
                f"bit_accuracy {self.bit_accuracy:.4f}\n"
                f"threshold    {self.threshold} (declare if > {self.threshold}, i.e. >= {self.min_matches})\n"
                f"fpr          {self.fpr_at_threshold:.4e} (target {self.target_fpr:g})\n"
                f"decision     {'watermarked' if self.watermarked else 'not watermarked'}")


def report_for(key: WatermarkKey, decoded: WatermarkKey, target_fpr: float = 0.01) -> DetectionReport:
    if key.M != decoded.M:
        raise VerificationError(f"key has {key.M} bits, extractor decoded {decoded.M}")
    tau = threshold_for_fpr(key.M, target_fpr)
    return DetectionReport(key.M - hamming(key, decoded), key.M, tau, fpr(tau, key.M), target_fpr)


def decode_batch(extractor: Extractor, images: torch.Tensor, batch_size: int = 64) -> list[WatermarkKey]:
    if images.dim() == 3:
        images = images.unsqueeze(0)
    out: list[WatermarkKey] = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            bits = logits_to_bits(extractor(images[i:i + batch_size]))
            out.extend(WatermarkKey(tuple(r.tolist())) for r in bits)
    return out


def detect(extractor: Extractor, image: torch.Tensor, key: WatermarkKey,
           target_fpr: float = 0.01) -> DetectionReport:
    if key.M != extractor.M:
        raise VerificationError(f"key has {key.M} bits, extractor emits {extractor.M}")
    return report_for(key, decode_batch(extractor, image)[0], target_fpr)


def detect_batch(extractor: Extractor, images: torch.Tensor, keys: Sequence[WatermarkKey] | WatermarkKey,
                 target_fpr: float = 0.01) -> list[DetectionReport]:
    decoded = decode_batch(extractor, images)
    if isinstance(keys, WatermarkKey):
        keys = [keys] * len(decoded)
    if len(keys) != len(decoded):
        raise VerificationError("one key per image required")
    for k in keys:
        if k.M != extractor.M:
            raise VerificationError(f"key has {k.M} bits, extractor emits {extractor.M}")
    return [report_for(k, d, target_fpr) for k, d in zip(keys, decoded)]


# ---------------------------------------------------------------------------
# attribution


class KeyDatabase:
    """Owner id -> key.  File format: one ``owner_id<TAB>M:hexkey`` per line;
    blank lines and ``#`` comments are ignored."""

    def __init__(self, records: Iterable[tuple[str, WatermarkKey]] = ()):
        self.records: list[tuple[str, WatermarkKey]] = []
        for owner, key in records:
            self.add(owner, key)

    def add(self, owner: str, key: WatermarkKey) -> None:
        owner = str(owner)
        if "\t" in owner or "\n" in owner or not owner:
            raise VerificationError(f"invalid owner id {owner!r}")
        if any(o == owner for o, _ in self.records):
            raise VerificationError(f"duplicate owner id {owner!r}")
        if self.records and key.M != self.M:
            raise VerificationError(f"key length {key.M} differs from database M={self.M}")
        if any(k == key for _, k in self.records):
            warnings.warn(f"key for owner {owner!r} duplicates an existing key", stacklevel=2)
        self.records.append((owner, key))

    @property
    def M(self) -> int:
        if not self.records:
            raise VerificationError("empty key database")
        return self.records[0][1].M

    def __len__(self) -> int:
        return len(self.records)

    def duplicates(self) -> list[list[str]]:
        groups: dict[WatermarkKey, list[str]] = {}
        for owner, key in self.records:
            groups.setdefault(key, []).append(owner)
        return [sorted(v) for v in groups.values() if len(v) > 1]

    @classmethod
    def load(cls, path) -> "KeyDatabase":
        db = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                owner, key_text = line.rstrip("\n").split("\t")
            except ValueError as exc:
                raise VerificationError(f"{path}:{lineno}: expected 'owner<TAB>M:hex'") from exc
            db.add(owner, WatermarkKey.from_hex(key_text))
        return db

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{o}\t{k.to_hex()}\n" for o, k in self.records))


def nearest_owner(decoded: WatermarkKey, db: KeyDatabase) -> tuple[str, WatermarkKey]:
    """Minimal Hamming distance; ties go to the lexicographically smallest owner id."""
    if len(db) == 0:
        raise VerificationError("empty key database")
    if decoded.M != db.M:
        raise VerificationError(f"decoded key has {decoded.M} bits, database keys have {db.M}")
    owner, key = min(db.records, key=lambda r: (hamming(decoded, r[1]), r[0]))
    return owner, key


def attribute(extractor: Extractor, image: torch.Tensor, db: KeyDatabase,
              target_fpr: float = 0.01) -> tuple[str, DetectionReport]:
    if len(db) == 0:
        raise VerificationError("empty key database")
    decoded = decode_batch(extractor, image)[0]
    owner, key = nearest_owner(decoded, db)
    return owner, report_for(key, decoded, target_fpr)
