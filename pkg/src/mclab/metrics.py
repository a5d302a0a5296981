"""
Analysis-side quantities of a run: expected median-mean gaps, the spread of
the aggregated median, the large-coordinate set and the convergence measures
the bounds are stated in.
"""

import enum
import math
from typing import Optional

import attr
import numpy as np

from mclab import aggregate
from mclab import logger as logging
from mclab import orderstats
from mclab.engine import GradientMode, RunTrace
from mclab.noise import Family, NoiseSpec, base_ppf, theorem_noise_scale
from mclab.objective import Problem
from mclab.orderstats import MAX_EXACT_WORKERS, MedianLawQuery
from mclab.rng import CounterStream

logger = logging.getLogger(__name__)

# coordinates whose gradient exceeds this many b * sigma_med are "large"
LARGE_COORDINATE_THRESHOLD = 2.0 / math.sqrt(3.0)
DEFAULT_MC_SAMPLES = 10**5
DEFAULT_MINIBATCH_SAMPLES = 200


class GapMethod(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    QUADRATURE = "quadrature"
    MONTE_CARLO = "monte_carlo"


@attr.s(frozen=True)
class MedianGradient:
    value = attr.ib(type=np.ndarray)
    std = attr.ib(type=np.ndarray)
    method = attr.ib(type=GapMethod)
    error = attr.ib(type=np.ndarray)


def median_noise_std(family: Family, n_workers: int) -> float:
    """sigma_med: std of the median of ``n_workers`` unit-variance noise draws."""
    return orderstats.median_std(Family(family), n_workers)


def _minibatch_median(problem, x, noise, batch_size, samples, stream):
    generators = [stream.child("batch", i).generator() for i in range(problem.n_workers)]
    d = problem.dim
    medians = np.empty((samples, d))
    for s in range(samples):
        grads = np.stack(
            [
                problem.grad_minibatch(i, x, batch_size, generators[i])
                for i in range(problem.n_workers)
            ]
        )
        if noise is not None and noise.b > 0:
            offset = s * problem.n_workers * d
            uniforms = stream.child("noise").uniforms(offset, grads.size)
            xi = base_ppf(noise.family, uniforms)
            grads = grads + noise.b * xi.reshape(grads.shape)
        medians[s] = aggregate.coordinate_median(grads)
    std = medians.std(axis=0, ddof=1)
    return MedianGradient(
        medians.mean(axis=0), std, GapMethod.MONTE_CARLO, std / math.sqrt(samples)
    )


def expected_median_gradient(
    problem: Problem,
    x: np.ndarray,
    noise: Optional[NoiseSpec] = None,
    batch_size: Optional[int] = None,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    stream: Optional[CounterStream] = None,
    threads: Optional[int] = None,
) -> MedianGradient:
    """
    E[median({g_i}) | x] per coordinate. Exact median of the local gradients
    without noise, the median law of each coordinate with noise, Monte Carlo
    beyond the quadrature limit or with mini-batch gradients.
    """
    stream = stream or CounterStream(0, ("median-gradient",))
    if batch_size is not None:
        samples = min(mc_samples, DEFAULT_MINIBATCH_SAMPLES)
        return _minibatch_median(problem, x, noise, batch_size, samples, stream)

    grads = problem.local_gradients(x)
    d = problem.dim
    if noise is None or noise.b == 0:
        zeros = np.zeros(d)
        return MedianGradient(
            aggregate.coordinate_median(grads), zeros, GapMethod.CLOSED_FORM, zeros
        )

    exact = problem.n_workers <= MAX_EXACT_WORKERS
    values, stds, errors = np.empty(d), np.empty(d), np.empty(d)
    for j in range(d):
        query = MedianLawQuery(grads[:, j], noise)
        if exact:
            summary = orderstats.expected_median(query)
        else:
            summary = orderstats.mc_median_summary(
                query, mc_samples, stream.child(j), threads
            )
        values[j] = summary.expected_median
        stds[j] = math.sqrt(summary.variance)
        errors[j] = summary.error_estimate
    method = GapMethod.QUADRATURE if exact else GapMethod.MONTE_CARLO
    return MedianGradient(values, stds, method, errors)


def large_coordinates(grad: np.ndarray, b: float, sigma_med: float) -> np.ndarray:
    """Mask of |grad_j| / (b * sigma_med) >= 2 / sqrt(3)."""
    if b <= 0 or sigma_med <= 0:
        raise ValueError("b and sigma_med must be positive")
    return np.abs(grad) / (b * sigma_med) >= LARGE_COORDINATE_THRESHOLD


def w_set(problem: Problem, x: np.ndarray, b: float, sigma_med: float) -> set:
    """0-based indices of the large coordinates of grad f(x)."""
    mask = large_coordinates(problem.grad_mean(x), b, sigma_med)
    return set(np.flatnonzero(mask).tolist())


@attr.s(frozen=True)
class GapReport:
    rounds = attr.ib(type=np.ndarray)
    gap_l1 = attr.ib(type=np.ndarray)
    gap_l2sq = attr.ib(type=np.ndarray)
    # ||E[median | x_t]||_2
    median_l2 = attr.ib(type=np.ndarray)
    sigma_m = attr.ib(type=np.ndarray)
    w_size = attr.ib(type=np.ndarray)
    c_bound = attr.ib(type=float)
    method = attr.ib(type=GapMethod)

    @property
    def sigma_m_max(self) -> float:
        return float(np.max(self.sigma_m))

    def rows(self):
        for k in range(len(self.rounds)):
            yield {
                "t": int(self.rounds[k]),
                "gap_l1": self.gap_l1[k],
                "gap_l2sq": self.gap_l2sq[k],
                "sigma_m": self.sigma_m[k],
                "w_size": int(self.w_size[k]),
            }

    def to_dict(self) -> dict:
        return {
            "points": len(self.rounds),
            "method": self.method.value,
            "mean_gap_l1": float(np.mean(self.gap_l1)),
            "mean_gap_l2sq": float(np.mean(self.gap_l2sq)),
            "sigma_m": self.sigma_m_max,
            "c_bound": self.c_bound,
        }


def gap_report(
    problem: Problem,
    trace: RunTrace,
    gap_points: int = 50,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    threads: Optional[int] = None,
) -> GapReport:
    """Expected median-mean gaps on at most ``gap_points`` snapshots of a run."""
    if gap_points < 1:
        raise ValueError("gap_points must be >= 1")
    count = len(trace.snapshot_rounds)
    picks = np.linspace(0, count - 1, min(gap_points, count)).round().astype(int)
    picks = np.unique(picks)
    noise = trace.noise
    batch_size = (
        trace.config.batch_size
        if trace.config.gradient_mode is GradientMode.MINIBATCH
        else None
    )
    sigma_med = (
        median_noise_std(noise.family, problem.n_workers)
        if noise is not None and noise.b > 0 and problem.n_workers % 2 == 1
        else None
    )
    stream = CounterStream(trace.config.seed, ("gap-report",))

    gap_l1, gap_l2sq, median_l2, sigma_m, w_size, gap_max = [], [], [], [], [], []
    method = GapMethod.CLOSED_FORM
    for k in picks:
        x = trace.snapshot_x[k]
        estimate = expected_median_gradient(
            problem, x, noise, batch_size, mc_samples, stream.child(int(k)), threads
        )
        method = estimate.method
        gap = estimate.value - trace.snapshot_grad[k]
        gap_l1.append(np.abs(gap).sum())
        gap_l2sq.append(np.square(gap).sum())
        median_l2.append(np.linalg.norm(estimate.value))
        gap_max.append(np.abs(gap).max())
        sigma_m.append(estimate.std.max())
        if sigma_med is not None:
            large = large_coordinates(trace.snapshot_grad[k], noise.b, sigma_med)
            w_size.append(large.sum())
        else:
            w_size.append(0)

    logger.debug(f"gap report on {len(picks)} snapshots ({method.value})")
    return GapReport(
        rounds=trace.snapshot_rounds[picks],
        gap_l1=np.array(gap_l1),
        gap_l2sq=np.array(gap_l2sq),
        median_l2=np.array(median_l2),
        sigma_m=np.array(sigma_m),
        w_size=np.array(w_size, dtype=int),
        c_bound=float(max(gap_max)),
        method=method,
    )


@attr.s(frozen=True)
class ConvergenceMeasures:
    avg_grad_l1 = attr.ib(type=float)
    avg_grad_l2sq = attr.ib(type=float)
    mixed = attr.ib(type=Optional[float])
    random_round = attr.ib(type=int)
    random_round_grad_l2sq = attr.ib(type=float)
    random_round_seed = attr.ib(type=int)
    partial = attr.ib(type=bool)

    def to_dict(self) -> dict:
        return attr.asdict(self)


def convergence_measures(
    trace: RunTrace,
    b: Optional[float] = None,
    sigma_med: Optional[float] = None,
    seed: Optional[int] = None,
) -> ConvergenceMeasures:
    """
    Averages of ||grad f(x_t)||_1 and ||grad f(x_t)||_2^2 over all rounds, the
    mixed measure
        sum_{j in W_t} T^(1/4) d^(1/4) |grad_j| + sum_{j not in W_t} grad_j^2
    averaged over the stored snapshots (``partial`` when not every round was
    stored, ``None`` for an even number of workers without ``sigma_med``), and
    ||grad f(x_R)||^2 at a uniformly drawn round R.
    """
    T, d = trace.rounds, trace.dim
    scale = theorem_noise_scale(T, d)
    b = b if b is not None else (trace.noise_scale or scale)
    if sigma_med is None and trace.n_workers % 2 == 1:
        family = trace.noise.family if trace.noise is not None else Family.GAUSSIAN
        sigma_med = median_noise_std(family, trace.n_workers)

    mixed = None
    if sigma_med is not None:
        grads = trace.snapshot_grad
        large = large_coordinates(grads, b, sigma_med)
        terms = np.where(large, scale * np.abs(grads), np.square(grads)).sum(axis=1)
        mixed = float(np.mean(terms))
    else:
        # the median of an even number of draws has no reference spread here
        logger.debug("no mixed measure for an even number of workers")

    seed = trace.config.seed if seed is None else seed
    R = int(np.random.default_rng(seed).integers(1, T + 1))
    partial = len(trace.snapshot_rounds) < T
    if partial:
        logger.debug(f"mixed measure from {len(trace.snapshot_rounds)} of {T} rounds")

    return ConvergenceMeasures(
        avg_grad_l1=float(np.mean(trace.columns["grad_l1"])),
        avg_grad_l2sq=float(np.mean(trace.columns["grad_l2sq"])),
        mixed=mixed,
        random_round=R,
        random_round_grad_l2sq=float(trace.columns["grad_l2sq"][R - 1]),
        random_round_seed=seed,
        partial=partial,
    )


@attr.s(frozen=True)
class BoundAudit:
    name = attr.ib(type=str)
    lhs = attr.ib(type=float)
    terms = attr.ib(type=dict)

    @property
    def rhs(self) -> float:
        return float(sum(self.terms.values()))

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs * (1 + 1e-12)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "terms": dict(self.terms),
            "passed": self.passed,
        }


def _initial_gap(trace: RunTrace, problem: Problem) -> float:
    return problem.initial_gap(trace.config.initial_point(problem))


@attr.s(frozen=True)
class _GapTerms:
    l1 = attr.ib(type=float)
    l2sq = attr.ib(type=float)
    # mean of ||E[median | x_t]||_2 * ||gap_t||_2
    cross = attr.ib(type=float)
    c_bound = attr.ib(type=float)
    sigma_m = attr.ib(type=float)


def _gap_terms(
    trace: RunTrace, problem: Problem, report: Optional[GapReport]
) -> _GapTerms:
    """
    Time averages of the gap between E[median | x_t] and grad f(x_t). Exact on
    every round for unperturbed full-gradient runs, where the median of the
    local gradients is deterministic; otherwise estimated on the snapshots of
    a gap report.
    """
    deterministic = (
        trace.noise_scale == 0 and trace.config.gradient_mode is GradientMode.EXACT
    )
    if deterministic:
        columns = trace.columns
        gap_l2 = np.sqrt(columns["noiseless_gap_l2sq"])
        return _GapTerms(
            l1=float(np.mean(columns["noiseless_gap_l1"])),
            l2sq=float(np.mean(columns["noiseless_gap_l2sq"])),
            cross=float(np.mean(columns["median_grad_l2"] * gap_l2)),
            c_bound=float(np.max(columns["noiseless_gap_max"])),
            sigma_m=0.0,
        )
    if report is None:
        report = gap_report(problem, trace)
    return _GapTerms(
        l1=float(np.mean(report.gap_l1)),
        l2sq=float(np.mean(report.gap_l2sq)),
        cross=float(np.mean(report.median_l2 * np.sqrt(report.gap_l2sq))),
        c_bound=report.c_bound,
        sigma_m=report.sigma_m_max,
    )


def audit_theorem1(
    trace: RunTrace,
    problem: Problem,
    sigma_m: Optional[float] = None,
    report: Optional[GapReport] = None,
) -> BoundAudit:
    """
    (1/T) sum ||grad f(x_t)||_1
        <= 3/2 sqrt(d L D_f / T) + 2 (1/T) sum gap_l1 + 2 d sigma_m

    gap_l1 is ||E[median | x_t] - grad f(x_t)||_1; ``sigma_m`` defaults to the
    largest spread seen by the gap estimate.
    """
    T, d, L = trace.rounds, trace.dim, problem.smoothness
    D_f = _initial_gap(trace, problem)
    gaps = _gap_terms(trace, problem, report)
    sigma_m = gaps.sigma_m if sigma_m is None else sigma_m
    return BoundAudit(
        name="theorem1",
        lhs=float(np.mean(trace.columns["grad_l1"])),
        terms={
            "descent": 1.5 * math.sqrt(d * L * D_f / T),
            "gap": 2.0 * gaps.l1,
            "noise": 2.0 * d * sigma_m,
        },
    )


def audit_theorem2(
    trace: RunTrace,
    problem: Problem,
    sigma_m: Optional[float] = None,
    c_bound: Optional[float] = None,
    report: Optional[GapReport] = None,
) -> BoundAudit:
    """
    (1/T) sum ||grad f(x_t)||_2^2
        <= 2 sqrt(d / T) D_f + 3 L sqrt(d / T) (sigma_m^2 / d + C^2)
           + 2 (1/T) sum gap_l2sq + 2 (1/T) sum ||E[median]||_2 ||gap||_2
    """
    T, d, L = trace.rounds, trace.dim, problem.smoothness
    D_f = _initial_gap(trace, problem)
    gaps = _gap_terms(trace, problem, report)
    sigma_m = gaps.sigma_m if sigma_m is None else sigma_m
    C = gaps.c_bound if c_bound is None else c_bound
    rate = math.sqrt(d / T)
    return BoundAudit(
        name="theorem2",
        lhs=float(np.mean(trace.columns["grad_l2sq"])),
        terms={
            "descent": 2.0 * rate * D_f,
            "variance": 3.0 * L * rate * (sigma_m**2 / d + C**2),
            "gap": 2.0 * gaps.l2sq,
            "cross": 2.0 * gaps.cross,
        },
    )
