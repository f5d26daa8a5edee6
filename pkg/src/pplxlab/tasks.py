"""Bitstring copy and parity tasks: generators, brute-force oracles, alpha/beta pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

BitString = np.ndarray  # 1-d int64 array over {0, 1}


def as_bits(x: str | Sequence[int]) -> BitString:
    """Accept ``"0101"`` or any integer sequence; validates the alphabet."""
    if isinstance(x, str):
        if set(x) - {"0", "1"}:
            raise ValueError(f"not a bitstring: {x!r}")
        return np.array([int(c) for c in x], dtype=np.int64)
    arr = np.asarray(x, dtype=np.int64).reshape(-1)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("bitstring entries must be 0 or 1")
    return arr


def bits_str(bits: Sequence[int]) -> str:
    return "".join(str(int(b)) for b in bits)


def make_alpha(n: int, pattern: str | Sequence[int] = "0") -> BitString:
    """Length-``n`` tiling of ``pattern`` (all zeros by default)."""
    if n < 1:
        raise ValueError("N must be at least 1")
    pat = as_bits(pattern)
    if pat.size == 0:
        raise ValueError("pattern must be non-empty")
    return np.resize(pat, n)


def make_beta(alpha: Sequence[int], flip_pos: int | None = None) -> BitString:
    """Copy of ``alpha`` with one bit flipped (the last one by default)."""
    a = as_bits(alpha)
    n = len(a)
    pos = n - 1 if flip_pos is None else flip_pos
    if not 0 <= pos < n:
        raise IndexError(f"flip position {pos} outside [0, {n})")
    b = a.copy()
    b[pos] ^= 1
    return b


def hamming_rel(x: Sequence[int], y: Sequence[int]) -> float:
    """Fraction of positions where ``x`` and ``y`` differ."""
    a, b = as_bits(x), as_bits(y)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        return 0.0
    return float(np.count_nonzero(a != b)) / len(a)


def parity_oracle(bits: Sequence[int]) -> int:
    return int(as_bits(bits).sum() % 2)


def running_parity(bits: Sequence[int]) -> BitString:
    """Prefix XORs: entry ``k`` is the parity of ``bits[:k+1]``."""
    return np.cumsum(as_bits(bits)) % 2


@dataclass(frozen=True)
class ParityInstance:
    bits: BitString
    running_parity: BitString

    @classmethod
    def of(cls, bits: Sequence[int]) -> ParityInstance:
        b = as_bits(bits)
        return cls(b, running_parity(b))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_dataset(task: str, length_range: tuple[int, int], count: int, rng) -> list:
    """``count`` uniform random bitstrings with lengths uniform on the inclusive range.

    ``task`` is ``"copy"`` (returns bitstrings) or ``"parity"`` (returns
    :class:`ParityInstance`).  ``rng`` is a Generator or an integer seed.
    """
    lo, hi = length_range
    if count < 1:
        raise ValueError("count must be at least 1")
    if lo > hi or lo < 0:
        raise ValueError(f"empty length range {length_range}")
    if task not in ("copy", "parity"):
        raise ValueError(f"unknown task {task!r}")
    g = _rng(rng)
    lengths = g.integers(lo, hi + 1, size=count)
    out = [g.integers(0, 2, size=n).astype(np.int64) for n in lengths]
    if task == "parity":
        return [ParityInstance.of(b) for b in out]
    return out
