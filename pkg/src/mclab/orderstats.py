"""
Law of the median of independently perturbed values.

For u_1..u_M (M odd) and noise b * xi_i, the median of {u_i + b xi_i} has an
exact density given by the order-statistic sum over which n = (M - 1) / 2 of
the other samples fall below it. Everything here is computed in standardized
coordinates s = (z - mean(u)) / b, which makes the results exactly equivariant
under shifts and joint rescaling of (u, b).
"""

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Optional, Sequence

import attr
import numpy as np
from scipy import integrate, stats

from mclab import logger as logging
from mclab.noise import SQRT3, Family, NoiseSpec, base_cdf, base_pdf, base_ppf
from mclab.rng import CounterStream
from mclab.utils import resolve_threads

logger = logging.getLogger(__name__)

# largest sample count handled by exact quadrature
MAX_EXACT_WORKERS = 15
QUAD_TOLERANCE = 1e-10
QUAD_LIMIT = 500
# the density is negligible beyond this many noise standard deviations
TAIL_WIDTH = 12.0
MC_BATCH = 1 << 16
MIN_MC_SAMPLES = 1000


class Method(str, enum.Enum):
    EXACT_QUADRATURE = "exact_quadrature"
    MONTE_CARLO = "monte_carlo"
    POINT_MASS = "point_mass"


class QuadratureError(ArithmeticError):
    def __init__(self, quantity: str, residual: float, message: Optional[str] = None):
        detail = f": {message.strip()}" if message else ""
        super().__init__(
            f"quadrature for {quantity} did not converge, residual {residual:.3g}{detail}"
        )
        self.quantity = quantity
        self.residual = residual


def _as_values(value) -> tuple:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(value, dtype=np.float64)))


@attr.s(frozen=True)
class MedianLawQuery:
    u = attr.ib(type=tuple, converter=_as_values)
    spec = attr.ib(type=NoiseSpec, validator=attr.validators.instance_of(NoiseSpec))

    @u.validator
    def _check_u(self, attribute, value):
        if len(value) % 2 == 0:
            raise ValueError(
                f"the median law needs an odd number of values, got {len(value)}"
            )
        if not all(math.isfinite(v) for v in value):
            raise ValueError("values must be finite")

    @property
    def size(self) -> int:
        return len(self.u)

    @property
    def n(self) -> int:
        return (self.size - 1) // 2

    @property
    def mean(self) -> float:
        return float(np.mean(self.u))

    @property
    def spread(self) -> float:
        return max(self.u) - min(self.u)

    @property
    def noiseless_median(self) -> float:
        return float(np.median(self.u))

    def standardized(self) -> np.ndarray:
        """w_i = (u_i - mean(u)) / b."""
        if self.spec.b <= 0:
            raise ValueError("noise scale b must be positive for density queries")
        return (np.asarray(self.u) - self.mean) / self.spec.b


@attr.s(frozen=True)
class MedianLawSummary:
    expected_median = attr.ib(type=float)
    mean = attr.ib(type=float)
    variance = attr.ib(type=float)
    method = attr.ib(type=Method, converter=Method)
    error_estimate = attr.ib(type=float, default=0.0)
    variance_error = attr.ib(type=float, default=0.0)
    asym_mass = attr.ib(type=Optional[float], default=None)

    @property
    def gap(self) -> float:
        return self.expected_median - self.mean

    def to_dict(self) -> dict:
        result = attr.asdict(self)
        result["method"] = self.method.value
        result["gap"] = self.gap
        return result


@attr.s(frozen=True)
class RateFit:
    slope = attr.ib(type=float)
    intercept = attr.ib(type=float)
    r_squared = attr.ib(type=float)


def _check_exact(query: MedianLawQuery):
    if query.size > MAX_EXACT_WORKERS:
        raise ValueError(
            f"exact median law supports at most {MAX_EXACT_WORKERS} values, "
            f"got {query.size}"
        )


def _standardized_density(family: Family, w: np.ndarray, s) -> np.ndarray:
    """
    rho(s) = sum_i h0(s - w_i) * P(exactly n of the others lie below s),
    the second factor read off as the t^n coefficient of
    prod_{j != i} ((1 - H0(s - w_j)) + H0(s - w_j) t) via prefix and suffix
    products truncated at degree n.
    """
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    size = len(w)
    n = (size - 1) // 2
    offsets = s[None, :] - w[:, None]
    below = base_cdf(family, offsets)
    above = base_cdf(family, -offsets)
    density = base_pdf(family, offsets)

    prefix = np.zeros((size + 1, n + 1, s.size))
    prefix[0, 0] = 1.0
    for j in range(size):
        prefix[j + 1] = prefix[j] * above[j]
        prefix[j + 1, 1:] += prefix[j, :-1] * below[j]

    suffix = np.zeros((size + 1, n + 1, s.size))
    suffix[size, 0] = 1.0
    for j in range(size - 1, -1, -1):
        suffix[j] = suffix[j + 1] * above[j]
        suffix[j, 1:] += suffix[j + 1, :-1] * below[j]

    result = np.zeros(s.size)
    for i in range(size):
        exactly_n = np.einsum("kl,kl->l", prefix[i], suffix[i + 1][::-1])
        result += density[i] * exactly_n
    return result


def median_pdf(query: MedianLawQuery, z):
    """Exact density of median({u_i + b xi_i}) at z."""
    _check_exact(query)
    w = query.standardized()
    b = query.spec.b
    z = np.asarray(z, dtype=np.float64)
    values = _standardized_density(query.spec.family, w, (z.reshape(-1) - query.mean) / b)
    values = values / b
    return float(values[0]) if z.ndim == 0 else values.reshape(z.shape)


def _breakpoints(family: Family, w: np.ndarray, lower: float, upper: float):
    points = set(w.tolist())
    if family is Family.UNIFORM:
        points.update((w - SQRT3).tolist())
        points.update((w + SQRT3).tolist())
    return sorted(p for p in points if lower < p < upper) or None


def _quad(quantity: str, integrand, lower: float, upper: float, points):
    value, error, *rest = integrate.quad(
        integrand,
        lower,
        upper,
        points=points,
        limit=QUAD_LIMIT,
        epsabs=QUAD_TOLERANCE,
        epsrel=QUAD_TOLERANCE,
        full_output=1,
    )
    message = rest[1] if len(rest) > 1 else None
    if not math.isfinite(value) or error > 1e-6 * max(1.0, abs(value)):
        raise QuadratureError(quantity, error, message)
    if message:
        logger.debug(
            f"quadrature for {quantity}: {message.strip()} (residual {error:.3g})"
        )
    return value, error


def _integration_range(w: np.ndarray):
    return float(w.min()) - TAIL_WIDTH, float(w.max()) + TAIL_WIDTH


@lru_cache(maxsize=None)
def _warn_non_smooth(family: Family):
    logger.warning(
        f"{family.value} noise is not twice differentiable, "
        "its asymmetry decay is an empirical observation only"
    )


def _asymmetry(family: Family, w: np.ndarray):
    if family is not Family.GAUSSIAN:
        _warn_non_smooth(family)
    reach = float(np.max(np.abs(w))) + TAIL_WIDTH
    points = _breakpoints(family, np.concatenate([w, -w]), 0.0, reach)

    def integrand(s):
        rho = _standardized_density(family, w, [s, -s])
        return abs(rho[0] - rho[1])

    return _quad("asymmetric mass", integrand, 0.0, reach, points)


def asym_mass(query: MedianLawQuery) -> float:
    """
    1/2 * integral of |r(mean + z) - r(mean - z)| dz, the mass of the part of
    the median's density that is antisymmetric about mean(u). Zero exactly
    when the law is symmetric about mean(u).
    """
    if query.spec.b == 0:
        return 0.0 if query.noiseless_median == query.mean else 1.0
    _check_exact(query)
    value, _ = _asymmetry(query.spec.family, query.standardized())
    return float(min(max(value, 0.0), 2.0))


def _point_mass(query: MedianLawQuery) -> MedianLawSummary:
    median = query.noiseless_median
    return MedianLawSummary(
        expected_median=median,
        mean=query.mean,
        variance=0.0,
        method=Method.POINT_MASS,
        asym_mass=0.0 if median == query.mean else 1.0,
    )


def expected_median(
    query: MedianLawQuery, with_asymmetry: bool = False
) -> MedianLawSummary:
    """Expectation and variance of the median by adaptive quadrature."""
    if query.spec.b == 0:
        return _point_mass(query)
    _check_exact(query)

    family = query.spec.family
    w = query.standardized()
    b = query.spec.b
    lower, upper = _integration_range(w)
    points = _breakpoints(family, w, lower, upper)

    def rho(s):
        return _standardized_density(family, w, s)[0]

    first, first_error = _quad(
        "expected median", lambda s: s * rho(s), lower, upper, points
    )
    second, second_error = _quad(
        "second moment", lambda s: s * s * rho(s), lower, upper, points
    )

    asymmetry = None
    if with_asymmetry:
        asymmetry, _ = _asymmetry(family, w)
        asymmetry = float(min(max(asymmetry, 0.0), 2.0))

    return MedianLawSummary(
        expected_median=query.mean + b * first,
        mean=query.mean,
        variance=b * b * max(second - first * first, 0.0),
        method=Method.EXACT_QUADRATURE,
        error_estimate=b * first_error,
        variance_error=b * b * (second_error + 2.0 * abs(first) * first_error),
        asym_mass=asymmetry,
    )


def total_mass(query: MedianLawQuery) -> float:
    """Integral of the exact density; 1 up to quadrature error."""
    _check_exact(query)
    family = query.spec.family
    w = query.standardized()
    lower, upper = _integration_range(w)
    value, _ = _quad(
        "normalization",
        lambda s: _standardized_density(family, w, s)[0],
        lower,
        upper,
        _breakpoints(family, w, lower, upper),
    )
    return value


def _batch_sums(query: MedianLawQuery, stream: CounterStream, start: int, count: int):
    """Power sums 1..4 of the standardized medians of draws [start, start + count)."""
    size = query.size
    xi = base_ppf(query.spec.family, stream.uniforms(start * size, count * size))
    samples = query.standardized()[None, :] + xi.reshape(count, size)
    medians = np.partition(samples, query.n, axis=1)[:, query.n]
    return np.array([medians.size] + [np.sum(medians**k) for k in range(1, 5)])


def mc_median_summary(
    query: MedianLawQuery,
    n_samples: int,
    stream: CounterStream,
    threads: Optional[int] = None,
) -> MedianLawSummary:
    """
    Monte Carlo mean and variance of the median, with standard errors.
    Draw k always comes from the same stream positions, so the result does
    not depend on the number of threads.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise ValueError(f"Monte Carlo needs at least {MIN_MC_SAMPLES} samples")
    if query.spec.b == 0:
        return _point_mass(query)

    batches = [
        (start, min(MC_BATCH, n_samples - start))
        for start in range(0, n_samples, MC_BATCH)
    ]
    threads = min(resolve_threads(threads), len(batches))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(lambda batch: _batch_sums(query, stream, *batch), batches)
            )
    else:
        parts = [_batch_sums(query, stream, *batch) for batch in batches]

    total = np.zeros(5)
    for part in parts:
        total += part
    count = total[0]
    m1, m2, m3, m4 = total[1:] / count
    variance = max(m2 - m1 * m1, 0.0)
    central4 = m4 - 4 * m1 * m3 + 6 * m1 * m1 * m2 - 3 * m1**4
    b = query.spec.b

    return MedianLawSummary(
        expected_median=query.mean + b * m1,
        mean=query.mean,
        variance=b * b * variance * count / (count - 1),
        method=Method.MONTE_CARLO,
        error_estimate=b * math.sqrt(variance / count),
        variance_error=b * b * math.sqrt(max(central4 - variance**2, 0.0) / count),
    )


def summarize(
    query: MedianLawQuery,
    mc_samples: int = 10**6,
    stream: Optional[CounterStream] = None,
    threads: Optional[int] = None,
    with_asymmetry: bool = False,
) -> MedianLawSummary:
    """
    Quadrature when the sample count allows it, Monte Carlo beyond
    MAX_EXACT_WORKERS, the noiseless median when b = 0.
    """
    if query.spec.b == 0:
        return _point_mass(query)
    if query.size <= MAX_EXACT_WORKERS:
        return expected_median(query, with_asymmetry=with_asymmetry)
    logger.warning(
        f"{query.size} values exceed the exact quadrature limit of "
        f"{MAX_EXACT_WORKERS}, falling back to Monte Carlo"
    )
    stream = stream or CounterStream(0, ("median-law",))
    return mc_median_summary(query, mc_samples, stream, threads)


@lru_cache(maxsize=None)
def median_std(family: Family, size: int) -> float:
    """Standard deviation of the median of ``size`` unit-variance draws."""
    query = MedianLawQuery(np.zeros(size), NoiseSpec(family, 1.0))
    return math.sqrt(summarize(query).variance)


def rate_fit(xs: Sequence[float], ys: Sequence[float]) -> RateFit:
    """Least-squares line through (log x, log y)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-D sequences of the same length")
    if xs.size < 4:
        raise ValueError(f"a rate fit needs at least 4 points, got {xs.size}")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("rate fits need strictly positive values")
    fit = stats.linregress(np.log(xs), np.log(ys))
    return RateFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2))
