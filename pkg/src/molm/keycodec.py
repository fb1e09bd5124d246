"""Watermark keys and the key -> adapter routing path mapping.

A key of ``M = L * log2(P)`` bits is cut into ``L`` consecutive chunks of
``log2(P)`` bits.  Chunk ``l`` read most-significant-bit first is the index
of the adapter activated in routed block ``l``.  Indices are 0-based
(``0 <= index < P``).

Keys serialize as ``"<M>:<hex>"``: the bit length in decimal, a colon, then
the key read as one MSB-first binary number written in lowercase hex,
zero-padded to ``ceil(M / 4)`` digits.  ``1101`` is ``"4:d"``; the 5-bit key
``00011`` is ``"5:03"``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class KeyFormatError(ValueError):
    """Malformed key, or key incompatible with a routing configuration."""


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def bits_per_block(P: int) -> int:
    if not is_power_of_two(P) or P < 2:
        raise KeyFormatError(f"P must be a power of two >= 2, got {P}")
    return P.bit_length() - 1


@dataclass(frozen=True)
class WatermarkKey:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise KeyFormatError("key must have at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise KeyFormatError(f"key bits must be 0/1, got {self.bits}")
        object.__setattr__(self, "bits", bits)

    @property
    def M(self) -> int:
        return len(self.bits)

    def __len__(self) -> int:
        return len(self.bits)

    def array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.int64)

    def to_hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        width = (self.M + 3) // 4
        return f"{self.M}:{value:0{width}x}"

    @classmethod
    def from_hex(cls, text: str) -> "WatermarkKey":
        try:
            m_str, hex_str = text.strip().split(":")
            M = int(m_str)
            value = int(hex_str, 16)
        except ValueError as exc:
            raise KeyFormatError(f"malformed key string {text!r}") from exc
        if M < 1 or hex_str != hex_str.lower() or len(hex_str) != (M + 3) // 4:
            raise KeyFormatError(f"malformed key string {text!r}")
        if value >> M:
            raise KeyFormatError(f"key value does not fit in {M} bits: {text!r}")
        return cls(tuple((value >> (M - 1 - i)) & 1 for i in range(M)))

    @classmethod
    def from_bits(cls, bits: Sequence[int]) -> "WatermarkKey":
        return cls(tuple(bits))

    def __str__(self) -> str:
        return self.to_hex()


@dataclass(frozen=True)
class RoutingPath:
    indices: tuple[int, ...]
    P: int

    def __post_init__(self):
        bits_per_block(self.P)
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise KeyFormatError("routing path must cover at least one block")
        if any(i < 0 or i >= self.P for i in idx):
            raise KeyFormatError(f"routing indices must lie in [0, {self.P}), got {idx}")
        object.__setattr__(self, "indices", idx)

    @property
    def L(self) -> int:
        return len(self.indices)


def encode_routing(key: WatermarkKey, L: int, P: int) -> RoutingPath:
    width = bits_per_block(P)
    if key.M != L * width:
        raise KeyFormatError(f"key has {key.M} bits but L={L}, P={P} needs {L * width}")
    indices = []
    for ell in range(L):
        value = 0
        for b in key.bits[ell * width:(ell + 1) * width]:
            value = (value << 1) | b
        indices.append(value)
    return RoutingPath(tuple(indices), P)


def decode_key(path: RoutingPath) -> WatermarkKey:
    width = bits_per_block(path.P)
    bits = []
    for idx in path.indices:
        bits.extend((idx >> (width - 1 - i)) & 1 for i in range(width))
    return WatermarkKey(tuple(bits))


def sample_key(M: int, seed: int | np.random.Generator) -> WatermarkKey:
    """Uniform random key; deterministic for an integer seed."""
    if M < 1:
        raise KeyFormatError(f"M must be >= 1, got {M}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return WatermarkKey(tuple(int(b) for b in rng.integers(0, 2, size=M)))


def hamming(a: WatermarkKey, b: WatermarkKey) -> int:
    if a.M != b.M:
        raise KeyFormatError(f"key length mismatch {a.M} vs {b.M}")
    return sum(x != y for x, y in zip(a.bits, b.bits))
