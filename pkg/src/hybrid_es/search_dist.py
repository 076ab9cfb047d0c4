"""Separable Gaussian search distribution (SNES).

The distribution keeps a mean vector and per-coordinate standard deviations.
Samples are ``mean + sigma * z`` with ``z`` drawn from a standard normal
stream that is a pure function of ``(seed, index)``, so any process holding
the seed can rebuild any sample without communication.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np


class SigmaGradForm(str, enum.Enum):
    """Per-sample term used for the sigma gradient."""

    CANONICAL = "z_sq_minus_one"  # z**2 - 1
    SHIFTED_SQUARE = "z_minus_one_sq"  # (z - 1)**2


class InvalidFitnessError(ValueError):
    """Raised when a fitness vector contains NaN."""


@dataclass(frozen=True)
class ShapingConfig:
    nu: float = 2.0

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be > 0, got {self.nu}")


@dataclass(frozen=True, eq=False)
class GaussianSearchDist:
    """Immutable diagonal Gaussian with SNES learning rates.

    Updates return a new instance; the arrays are never written in place.
    """

    mean: np.ndarray
    sigma: np.ndarray
    eta_mean: float
    eta_sigma: float
    sigma_grad_form: SigmaGradForm = SigmaGradForm.CANONICAL
    generation: int = 0  # RNG stream position

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).ravel()
        sigma = np.array(self.sigma, dtype=np.float64).ravel()
        if mean.size < 1:
            raise ValueError("dimension must be >= 1")
        if mean.shape != sigma.shape:
            raise ValueError(f"mean/sigma length mismatch: {mean.size} vs {sigma.size}")
        if not np.all(sigma > 0):
            raise ValueError("sigma must be strictly positive")
        mean.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sigma_grad_form", SigmaGradForm(self.sigma_grad_form))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def create(cls, mean, sigma=1.0, eta_mean=None, eta_sigma=None,
               sigma_grad_form=SigmaGradForm.CANONICAL) -> "GaussianSearchDist":
        """Build a distribution, filling unspecified learning rates with the defaults."""
        mean = np.asarray(mean, dtype=np.float64).ravel()
        sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mean.shape).copy()
        default_mean_lr, default_sigma_lr = default_learning_rates(mean.size)
        return cls(
            mean=mean,
            sigma=sigma,
            eta_mean=default_mean_lr if eta_mean is None else float(eta_mean),
            eta_sigma=default_sigma_lr if eta_sigma is None else float(eta_sigma),
            sigma_grad_form=sigma_grad_form,
        )

    def to_dict(self) -> dict:
        return {
            "format": "snes-dist/1",
            "d": self.dim,
            "mean": self.mean.tolist(),
            "sigma": self.sigma.tolist(),
            "eta_mean": self.eta_mean,
            "eta_sigma": self.eta_sigma,
            "sigma_grad_form": self.sigma_grad_form.value,
            "generation": self.generation,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianSearchDist":
        if data.get("format") != "snes-dist/1":
            raise ValueError(f"unknown checkpoint format {data.get('format')!r}")
        dist = cls(
            mean=data["mean"],
            sigma=data["sigma"],
            eta_mean=data["eta_mean"],
            eta_sigma=data["eta_sigma"],
            sigma_grad_form=SigmaGradForm(data["sigma_grad_form"]),
            generation=int(data["generation"]),
        )
        if dist.dim != data["d"]:
            raise ValueError("checkpoint dimension does not match payload")
        return dist

    def save(self, path):
        # repr() of a float64 round-trips exactly through JSON
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "GaussianSearchDist":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class Sample:
    z: np.ndarray
    fitness: float = math.nan
    utility: float = math.nan


@dataclass
class Generation:
    """One seeded batch of samples; ``z`` of sample i is ``sample_noise(d, seed, i)``."""

    seed: int
    samples: list = field(default_factory=list)

    @property
    def noise(self) -> np.ndarray:
        return np.stack([s.z for s in self.samples])

    @property
    def fitnesses(self) -> np.ndarray:
        return np.array([s.fitness for s in self.samples], dtype=np.float64)

    @property
    def utilities(self) -> np.ndarray:
        return np.array([s.utility for s in self.samples], dtype=np.float64)

    def assign_utilities(self, cfg: ShapingConfig = ShapingConfig()):
        for s, u in zip(self.samples, shape_utilities(self.fitnesses, cfg)):
            s.utility = float(u)


def noise_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(index),)))


def sample_noise(d: int, seed: int, index: int) -> np.ndarray:
    """Standard-normal vector determined by ``(seed, index)`` alone."""
    return noise_rng(seed, index).standard_normal(d)


def sample_params(dist: GaussianSearchDist, seed: int, index: int) -> np.ndarray:
    z = sample_noise(dist.dim, seed, index)
    return dist.mean + dist.sigma * z


def rank_weights(n: int, nu: float = 2.0) -> np.ndarray:
    """Utility of rank 1..n (rank 1 = best)."""
    ranks = np.arange(1, n + 1, dtype=np.float64)
    raw = np.maximum(0.0, math.log(n / nu + 1.0) - np.log(ranks))
    return raw / raw.sum() - 1.0 / n


def shape_utilities(fitnesses, cfg: ShapingConfig = ShapingConfig()) -> np.ndarray:
    """Rank-based zero-sum utilities; ties go to the lower sample index."""
    f = np.asarray(fitnesses, dtype=np.float64).ravel()
    if f.size < 1:
        raise ValueError("need at least one fitness")
    if np.isnan(f).any():
        raise InvalidFitnessError(f"NaN fitness at indices {np.flatnonzero(np.isnan(f)).tolist()}")
    order = np.argsort(-f, kind="stable")
    u = np.empty_like(f)
    u[order] = rank_weights(f.size, cfg.nu)
    return u


def _sigma_term(z: np.ndarray, form: SigmaGradForm) -> np.ndarray:
    if form is SigmaGradForm.CANONICAL:
        return z * z - 1.0
    return (z - 1.0) ** 2


def natural_gradient_from(noise, utilities, form=SigmaGradForm.CANONICAL):
    """Return ``(sum u_i z_i, sum u_i g(z_i))`` for stacked noise of shape (n, d).

    The sigma gradient omits the leading ``sigma *`` factor; `apply_update`
    folds it into the multiplicative step.
    """
    z = np.asarray(noise, dtype=np.float64)
    u = np.asarray(utilities, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != u.size:
        raise ValueError(f"noise shape {z.shape} does not match {u.size} utilities")
    return u @ z, u @ _sigma_term(z, SigmaGradForm(form))


def natural_gradient(gen: Generation, form=SigmaGradForm.CANONICAL):
    u = gen.utilities
    if np.isnan(u).any():
        raise ValueError("utilities not assigned")
    return natural_gradient_from(gen.noise, u, form)


_TINY = np.finfo(np.float64).tiny
_HUGE = np.finfo(np.float64).max


def apply_update(dist: GaussianSearchDist, grad_mean, grad_sigma) -> GaussianSearchDist:
    """Mean step scaled by sigma; multiplicative exponential step on sigma."""
    gm = np.asarray(grad_mean, dtype=np.float64)
    gs = np.asarray(grad_sigma, dtype=np.float64)
    if gm.shape != dist.mean.shape or gs.shape != dist.sigma.shape:
        raise ValueError("gradient length does not match distribution dimension")
    if not (np.isfinite(gm).all() and np.isfinite(gs).all()):
        raise ValueError("non-finite gradient; distribution left unchanged")
    mean = dist.mean + dist.eta_mean * dist.sigma * gm
    with np.errstate(over="ignore", under="ignore"):
        sigma = dist.sigma * np.exp(0.5 * dist.eta_sigma * gs)
    # exp() can underflow/overflow in float64; keep sigma in (0, max]
    sigma = np.clip(sigma, _TINY, _HUGE)
    if not np.isfinite(mean).all():
        raise ValueError("mean update overflowed; distribution left unchanged")
    return replace(dist, mean=mean, sigma=sigma, generation=dist.generation + 1)


def default_learning_rates(d: int) -> tuple[float, float]:
    if d < 1:
        raise ValueError("d must be >= 1")
    return 1.0, (3.0 + math.log(d)) / (5.0 * math.sqrt(d))


def truncated_normal(shape, std, rng: np.random.Generator) -> np.ndarray:
    """Normal(0, std) with draws beyond two standard deviations re-drawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std
