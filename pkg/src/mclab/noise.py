"""
Symmetric unimodal noise families with unit variance, scaled by ``b``.
"""

import enum
import math
from functools import lru_cache
from typing import Optional

import attr
import numpy as np
from scipy import special, stats

from mclab import logger as logging
from mclab.rng import CounterStream

logger = logging.getLogger(__name__)

SQRT3 = math.sqrt(3.0)


class Family(str, enum.Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"
    UNIFORM = "uniform"


@lru_cache(maxsize=None)
def base_distribution(family: Family):
    """Frozen scipy distribution with mean 0 and variance 1."""
    family = Family(family)
    if family is Family.GAUSSIAN:
        return stats.norm()
    if family is Family.LAPLACE:
        return stats.laplace(scale=1.0 / math.sqrt(2.0))
    return stats.uniform(loc=-SQRT3, scale=2.0 * SQRT3)


def base_pdf(family: Family, z):
    """h0 of the unit-variance family."""
    if family is Family.GAUSSIAN:
        return np.exp(-0.5 * np.square(z)) / math.sqrt(2.0 * math.pi)
    return base_distribution(family).pdf(z)


def base_cdf(family: Family, z):
    """H0 of the unit-variance family."""
    if family is Family.GAUSSIAN:
        return special.ndtr(z)
    return base_distribution(family).cdf(z)


def base_ppf(family: Family, p):
    if family is Family.GAUSSIAN:
        return special.ndtri(p)
    if family is Family.LAPLACE:
        # closed form, avoids scipy's argument checking on large arrays
        p = np.asarray(p, dtype=np.float64)
        scale = 1.0 / math.sqrt(2.0)
        return np.where(p < 0.5, scale * np.log(2.0 * p), -scale * np.log(2.0 - 2.0 * p))
    return SQRT3 * (2.0 * np.asarray(p, dtype=np.float64) - 1.0)


@attr.s(frozen=True)
class NoiseSpec:
    family = attr.ib(type=Family, converter=Family)
    b = attr.ib(type=float, converter=float, default=0.0)

    @b.validator
    def _check_scale(self, attribute, value):
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"noise scale b must be finite and >= 0, got {value}")

    @property
    def smooth(self) -> bool:
        """
        True when h0 has bounded, absolutely integrable first and second
        derivatives. Laplace and uniform noise are supported empirically only.
        """
        return self.family is Family.GAUSSIAN

    def with_scale(self, b: float) -> "NoiseSpec":
        return attr.evolve(self, b=b)


def theorem_noise_scale(rounds: int, dim: int) -> float:
    """b = T^(1/4) d^(1/4)."""
    return float(rounds * dim) ** 0.25


def _require_density(spec: NoiseSpec):
    if spec.b == 0:
        raise ValueError("noise with b = 0 is a point mass and has no density")


def pdf(spec: NoiseSpec, z):
    """Density (1/b) h0(z/b) of b * xi."""
    _require_density(spec)
    return base_pdf(spec.family, np.asarray(z, dtype=np.float64) / spec.b) / spec.b


def cdf(spec: NoiseSpec, z):
    """Distribution function H0(z/b) of b * xi."""
    _require_density(spec)
    return base_cdf(spec.family, np.asarray(z, dtype=np.float64) / spec.b)


def sample(spec: NoiseSpec, stream: CounterStream, size: int, offset: int = 0):
    """
    ``size`` draws of b * xi, read from positions [offset, offset + size) of
    ``stream``.
    """
    xi = base_ppf(spec.family, stream.uniforms(offset, size))
    return spec.b * xi


def perturb_gradient(
    g: np.ndarray,
    spec: Optional[NoiseSpec],
    stream: CounterStream,
    offset: int = 0,
) -> np.ndarray:
    """g + b * xi with one independent draw per coordinate."""
    g = np.asarray(g, dtype=np.float64)
    if spec is None or spec.b == 0:
        return g.copy()
    return g + sample(spec, stream, g.size, offset).reshape(g.shape)
