"""Inverse-CDF categorical sampling and the multinomial mask samplers.

All samplers draw ``k`` uniforms, sort them and binary-search them into a
prefix-sum CDF: O(d) to build, O(k log d) to draw, O(k + d) memory.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class CategoricalDist:
    probs: np.ndarray
    cdf: np.ndarray

    @property
    def size(self) -> int:
        return self.probs.size


@dataclass(frozen=True, eq=False)
class Mask:
    """Sorted distinct retained indices out of ``d``."""

    indices: np.ndarray
    d: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.d:
                raise ValueError(f"mask index out of range [0, {self.d})")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("mask indices must be sorted and distinct")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_indices(cls, indices, d: int) -> "Mask":
        return cls(np.unique(np.asarray(indices, dtype=np.int64)), d)

    @classmethod
    def from_dense(cls, m) -> "Mask":
        m = np.asarray(m)
        return cls(np.flatnonzero(m), m.size)

    def to_dense(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros(self.d, dtype=dtype)
        out[self.indices] = 1
        return out

    def __len__(self):
        return self.indices.size


class SamplerKind(str, enum.Enum):
    WR = "wr"
    WR_PLUS_U = "wr+u"
    WOR_B = "worb"
    TOP_N = "tn"


@dataclass(frozen=True)
class SamplerStrategy:
    """Mask sampler choice. ``batches`` is used by WOR_B, ``multiplier`` by TOP_N."""

    kind: SamplerKind = SamplerKind.TOP_N
    batches: int = 1
    multiplier: int = 5

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.batches < 1:
            raise ValueError("batches must be >= 1")
        if self.multiplier < 2:
            raise ValueError("multiplier must be >= 2")

    @classmethod
    def wr(cls):
        return cls(SamplerKind.WR)

    @classmethod
    def wr_plus_u(cls):
        return cls(SamplerKind.WR_PLUS_U)

    @classmethod
    def wor_b(cls, batches: int):
        return cls(SamplerKind.WOR_B, batches=batches)

    @classmethod
    def top_n(cls, multiplier: int = 5):
        return cls(SamplerKind.TOP_N, multiplier=multiplier)

    @classmethod
    def parse(cls, text: str) -> "SamplerStrategy":
        """Parse ``wr``, ``wr+u``, ``worb:<b>`` or ``tn:<M>``."""
        name, _, arg = text.strip().lower().partition(":")
        if name == "wr":
            return cls.wr()
        if name in ("wr+u", "wru"):
            return cls.wr_plus_u()
        if name == "worb":
            return cls.wor_b(int(arg or 1))
        if name in ("tn", "topn"):
            return cls.top_n(int(arg or 5))
        raise ValueError(f"unknown sampler {text!r}")

    def label(self) -> str:
        if self.kind is SamplerKind.WOR_B:
            return f"worb:{self.batches}"
        if self.kind is SamplerKind.TOP_N:
            return f"tn:{self.multiplier}"
        return self.kind.value


def build_cdf(probs) -> CategoricalDist:
    p = np.array(probs, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty probability vector")
    if not np.isfinite(p).all():
        raise ValueError("non-finite probability")
    if (p < 0).any():
        raise ValueError("negative probability")
    total = p.sum()
    if total <= 0:
        raise ValueError("probabilities are all zero")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {total}, expected 1")
    p /= total
    cdf = np.cumsum(p)
    # Pin the top of the CDF so no u < 1 can land on a trailing zero-mass index.
    last = np.flatnonzero(p)[-1]
    cdf[last:] = 1.0
    p.setflags(write=False)
    cdf.setflags(write=False)
    return CategoricalDist(p, cdf)


def draw(dist: CategoricalDist, u: float) -> int:
    """Smallest index j with ``u < cdf[j]``."""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"uniform {u} outside [0, 1)")
    return int(np.searchsorted(dist.cdf, u, side="right"))


def _draw_sorted(cdf: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    u = np.sort(rng.random(k))
    return np.searchsorted(cdf, u, side="right")


def draw_k_sorted(dist: CategoricalDist, k: int, seed) -> np.ndarray:
    """``k`` i.i.d. draws (ascending) from one sorted batch of uniforms."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return _draw_sorted(dist.cdf, k, np.random.default_rng(seed))


def _sample_wr(dist, k, rng):
    return np.unique(_draw_sorted(dist.cdf, k, rng))


def _sample_wr_plus_u(dist, k, rng):
    taken = _sample_wr(dist, k, rng)
    missing = k - taken.size
    if missing:
        free = np.setdiff1d(np.arange(dist.size), taken, assume_unique=True)
        taken = np.union1d(taken, rng.choice(free, size=missing, replace=False))
    return taken


def _sample_wor_b(dist, k, batches, rng):
    per_round = math.ceil(k / batches)
    p = dist.probs.copy()
    cdf = dist.cdf
    taken = np.empty(0, dtype=np.int64)
    drawn = 0
    for _ in range(batches):
        count = min(per_round, k - drawn)
        if count <= 0:
            break
        new = np.unique(_draw_sorted(cdf, count, rng))
        taken = np.union1d(taken, new)
        drawn += count
        p[new] = 0.0
        remaining = p.sum()
        if remaining <= 0:
            break
        cdf = np.cumsum(p / remaining)
        cdf[np.flatnonzero(p)[-1]:] = 1.0
    return taken


def _sample_top_n(dist, k, multiplier, rng):
    hist = np.bincount(_draw_sorted(dist.cdf, multiplier * k, rng), minlength=dist.size)
    # Noise in [0, 1e-3) breaks count ties without reordering distinct counts.
    score = hist + rng.uniform(0.0, 1e-3, size=dist.size)
    if k == dist.size:
        return np.arange(dist.size)
    return np.sort(np.argpartition(-score, k - 1)[:k])


def sample_mask(dist: CategoricalDist, k: int, strategy: SamplerStrategy, seed) -> Mask:
    d = dist.size
    if not 1 <= k <= d:
        raise ValueError(f"k={k} outside [1, {d}]")
    rng = np.random.default_rng(seed)
    kind = strategy.kind
    if kind is SamplerKind.WR:
        idx = _sample_wr(dist, k, rng)
    elif kind is SamplerKind.WR_PLUS_U:
        idx = _sample_wr_plus_u(dist, k, rng)
    elif kind is SamplerKind.WOR_B:
        idx = _sample_wor_b(dist, k, strategy.batches, rng)
    else:
        idx = _sample_top_n(dist, k, strategy.multiplier, rng)
    return Mask(idx, d)
