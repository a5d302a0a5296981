"""
Acceptance suite: closed-form counterexamples, median-law rates and the
engine's bookkeeping contracts, each reduced to a pass/fail check.
"""

import math
import time
from typing import Callable, Dict, Iterable, List, Optional

import attr
import numpy as np
from rich.console import Console
from rich.table import Table

from mclab import aggregate, engine
from mclab import logger as logging
from mclab import metrics, orderstats
from mclab.aggregate import Rule
from mclab.engine import AlgoConfig, GradientMode, StepSchedule
from mclab.noise import Family, NoiseSpec
from mclab.objective import QuadraticEnsemble, make_logistic_ensemble
from mclab.orderstats import MedianLawQuery
from mclab.output import render_trace
from mclab.rng import CounterStream

logger = logging.getLogger(__name__)

STALL_CENTERS = (0.0, 1.0, 5.0)
PLATEAU_CENTERS = (1.0, 2.0, 10.0)
PLATEAU = 7.0 / 3.0


@attr.s(frozen=True)
class CriterionResult:
    name = attr.ib(type=str)
    passed = attr.ib(type=bool)
    detail = attr.ib(type=str)
    elapsed = attr.ib(type=float, default=0.0)

    def to_dict(self) -> dict:
        return attr.asdict(self)


def _scalar_problem(centers) -> QuadraticEnsemble:
    return QuadraticEnsemble(np.array(centers)[:, None])


def check_majority_vote(instances: int = 10**5, seed: int = 0) -> CriterionResult:
    """majority_vote_sign equals sign_of_median wherever the median is nonzero."""
    rng = np.random.default_rng(seed)
    sizes = rng.choice(np.arange(3, 16, 2), size=instances)
    dims = rng.integers(1, 9, size=instances)
    exceptions = checked = 0
    for M in np.unique(sizes):
        columns = int(dims[sizes == M].sum())
        g = rng.standard_normal((int(M), columns))
        # near-ties at tiny magnitudes
        tiny = rng.random(columns) < 0.1
        g[:, tiny] *= 1e-300
        median = aggregate.coordinate_median(g)
        nonzero = median != 0
        vote = aggregate.majority_vote_sign(g)
        sign = aggregate.sign_of_median(g)
        exceptions += int(np.sum(vote[nonzero] != sign[nonzero]))
        checked += int(nonzero.sum())
    return CriterionResult(
        "majority_vote",
        exceptions == 0,
        f"{exceptions} mismatches over {checked} coordinates",
    )


def check_fixed_point(rounds: int = 10**5) -> CriterionResult:
    """signSGD and medianSGD stall at the median of a=(0,1,5)."""
    problem = _scalar_problem(STALL_CENTERS)
    sign_trace = engine.run(
        problem, AlgoConfig(Rule.SIGN_MAJORITY_VOTE, rounds, 0.0005, delta=1e-3)
    )
    median_trace = engine.run(problem, AlgoConfig(Rule.MEDIAN, rounds, 0.0005, delta=0.1))
    sign_l1 = float(np.abs(sign_trace.final_grad).sum())
    median_l2sq = float(np.square(median_trace.final_grad).sum())
    passed = abs(sign_l1 - 1.0) <= 2e-3 and abs(median_l2sq - 1.0) <= 1e-6
    return CriterionResult(
        "fixed_point",
        passed,
        f"signSGD |grad f|_1 = {sign_l1:.6f}, medianSGD |grad f|_2^2 = {median_l2sq:.9f}",
    )


def check_plateau(rounds: int = 20000) -> CriterionResult:
    """Median gradient vanishes while the mean gradient stays at 7/3 for a=(1,2,10)."""
    problem = _scalar_problem(PLATEAU_CENTERS)
    delta = 1e-3
    median_trace = engine.run(
        problem, AlgoConfig(Rule.MEDIAN, rounds, 0.0005, delta=delta)
    )
    sign_trace = engine.run(
        problem, AlgoConfig(Rule.SIGN_MAJORITY_VOTE, rounds, 0.0005, delta=delta)
    )
    median_grad = float(np.abs(median_trace.final_median_grad).sum())
    median_mean = float(np.abs(median_trace.final_grad).sum())
    tail = sign_trace.columns["median_grad_l1"][-1000:]
    sign_amplitude = float(np.max(tail))
    sign_mean = float(np.abs(sign_trace.final_grad).sum())
    passed = (
        median_grad <= 1e-6
        and abs(median_mean - PLATEAU) <= 1e-3
        and sign_amplitude <= 2 * delta
        and abs(sign_mean - PLATEAU) <= 2e-3
    )
    return CriterionResult(
        "plateau",
        passed,
        f"medianSGD median {median_grad:.2e} mean {median_mean:.6f}; "
        f"signSGD amplitude {sign_amplitude:.2e} mean {sign_mean:.6f}",
    )


GAP_GRID = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0)


def _gap_sweep():
    summaries = [
        orderstats.expected_median(
            MedianLawQuery(STALL_CENTERS, NoiseSpec("gaussian", b))
        )
        for b in GAP_GRID
    ]
    return summaries


def check_gap_rate() -> CriterionResult:
    summaries = _gap_sweep()
    fit = orderstats.rate_fit(GAP_GRID, [abs(s.gap) for s in summaries])
    # symmetric noise makes the gap odd in the offsets, so it decays faster than 1/b
    passed = fit.slope <= -0.85 and fit.r_squared >= 0.98
    return CriterionResult(
        "gap_rate", passed, f"slope {fit.slope:.4f}, R^2 {fit.r_squared:.5f}"
    )


def check_variance_rate() -> CriterionResult:
    # b = 4 is left out: there the offsets are as large as the noise
    summaries = _gap_sweep()[1:]
    fit = orderstats.rate_fit(GAP_GRID[1:], [s.variance for s in summaries])
    return CriterionResult(
        "variance_rate", 1.9 <= fit.slope <= 2.1, f"slope {fit.slope:.4f}"
    )


def check_asymmetry_rate() -> CriterionResult:
    grid = (8.0, 16.0, 32.0, 64.0)
    values = [
        orderstats.asym_mass(MedianLawQuery((0.0, 0.0, 1.0), NoiseSpec("gaussian", b)))
        for b in grid
    ]
    fit = orderstats.rate_fit(grid, values)
    return CriterionResult(
        "asymmetry_rate", fit.slope <= -1.6, f"slope {fit.slope:.4f}"
    )


def check_cross_validation(
    queries: int = 20,
    mc_samples: int = 10**6,
    seed: int = 0,
    threads: Optional[int] = None,
) -> CriterionResult:
    """Monte Carlo and quadrature agree on mean and variance of the median."""
    rng = np.random.default_rng(seed)
    families = list(Family)
    # 2 * queries joint comparisons, hence a 4 standard error band
    band = 4.0
    failures, worst_mass = [], 0.0
    for k in range(queries):
        M = int(rng.choice([3, 5, 7]))
        spec = NoiseSpec(families[k % len(families)], rng.uniform(1.0, 32.0))
        query = MedianLawQuery(rng.uniform(-5.0, 5.0, size=M), spec)
        exact = orderstats.expected_median(query)
        sampled = orderstats.mc_median_summary(
            query, mc_samples, CounterStream(seed, ("cross-validation", k)), threads
        )
        mean_error = math.hypot(sampled.error_estimate, exact.error_estimate)
        variance_error = math.hypot(sampled.variance_error, exact.variance_error)
        if abs(sampled.expected_median - exact.expected_median) > band * mean_error:
            failures.append(f"query {k} mean")
        if abs(sampled.variance - exact.variance) > band * variance_error:
            failures.append(f"query {k} variance")
        if spec.family is Family.GAUSSIAN:
            worst_mass = max(worst_mass, abs(orderstats.total_mass(query) - 1.0))
    passed = not failures and worst_mass <= 1e-8
    detail = ", ".join(failures) if failures else f"all {queries} queries agree"
    detail = f"{detail}; |mass - 1| <= {worst_mass:.1e}"
    return CriterionResult("cross_validation", passed, detail)


def _noisy_averages(rule: Rule, b_grid, seeds, rounds, delta, threads):
    problem = _scalar_problem(STALL_CENTERS)
    mean_center = float(np.mean(STALL_CENTERS))
    averages = []
    for b in b_grid:
        values = [
            np.mean(
                engine.run(
                    problem,
                    AlgoConfig(
                        rule,
                        rounds,
                        mean_center,
                        delta=delta,
                        noise=NoiseSpec(Family.GAUSSIAN, b),
                        seed=seed,
                    ),
                    threads,
                ).columns["grad_l2sq"]
            )
            for seed in seeds
        ]
        averages.append(float(np.mean(values)))
    return averages


def check_noisy_improvement(
    rounds: int = 10**5, seeds: int = 10, threads: Optional[int] = None
) -> CriterionResult:
    """Seed-averaged mean of |grad f|_2^2 strictly decreases in b."""
    b_grid = (1.0, 4.0, 16.0)
    details, passed = [], True
    for rule in (Rule.MEDIAN, Rule.SIGN_MAJORITY_VOTE):
        averages = _noisy_averages(rule, b_grid, range(seeds), rounds, 1e-4, threads)
        decreasing = all(a > b for a, b in zip(averages, averages[1:]))
        passed = passed and decreasing
        details.append(f"{rule.value}: " + " > ".join(f"{a:.4g}" for a in averages))
    return CriterionResult("noisy_improvement", passed, "; ".join(details))


def check_bound_audit(instances: int = 5, rounds: int = 10**4, seed: int = 0):
    rng = np.random.default_rng(seed)
    failures = []
    margins = []
    for k in range(instances):
        problem = QuadraticEnsemble(3.0 * rng.standard_normal((5, 4)))
        config = AlgoConfig(
            Rule.SIGN_MAJORITY_VOTE,
            rounds,
            rng.uniform(-5.0, 5.0, size=4),
            step_size=StepSchedule.THEOREM1,
        )
        audit = metrics.audit_theorem1(engine.run(problem, config), problem)
        margins.append(audit.rhs - audit.lhs)
        if not audit.passed:
            failures.append(f"instance {k}: {audit.lhs:.4g} > {audit.rhs:.4g}")
    detail = ", ".join(failures) or f"smallest margin {min(margins):.4g}"
    return CriterionResult("bound_audit", not failures, detail)


def check_bit_accounting() -> CriterionResult:
    rng = np.random.default_rng(0)
    M, d, T = 5, 10, 100
    problem = QuadraticEnsemble(rng.standard_normal((M, d)))
    uplink = {}
    for rule in (Rule.SIGN_MAJORITY_VOTE, Rule.MEDIAN):
        trace = engine.run(problem, AlgoConfig(rule, T, 0.0, delta=1e-2))
        uplink[rule], _ = engine.account_bits(trace)
    sign_bits, median_bits = uplink[Rule.SIGN_MAJORITY_VOTE], uplink[Rule.MEDIAN]
    passed = (
        sign_bits == M * d * T
        and median_bits == 64 * M * d * T
        and median_bits == 64 * sign_bits
    )
    return CriterionResult(
        "bit_accounting",
        passed,
        f"signSGD {sign_bits} bits, medianSGD {median_bits} bits",
    )


def check_determinism(rounds: int = 300) -> CriterionResult:
    """Trace bytes do not depend on the number of worker threads."""
    problem = make_logistic_ensemble(n_workers=5, dim=10, samples_per_worker=100, seed=3)
    config = AlgoConfig(
        Rule.MEDIAN,
        rounds,
        0.0,
        delta=0.05,
        noise=NoiseSpec(Family.GAUSSIAN, 0.5),
        gradient_mode=GradientMode.MINIBATCH,
        batch_size=10,
        seed=11,
    )
    single = render_trace(engine.run(problem, config, threads=1))
    parallel = render_trace(engine.run(problem, config, threads=8))
    return CriterionResult(
        "determinism",
        single == parallel,
        f"{len(single)} bytes, {'identical' if single == parallel else 'different'}",
    )


def check_gradients(
    points: int = 100, eps: float = 1e-5, seed: int = 0
) -> CriterionResult:
    problem = make_logistic_ensemble(n_workers=5, dim=6, samples_per_worker=40, reg=0.1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    eye = np.eye(problem.dim)
    for _ in range(points):
        x = rng.normal(size=problem.dim)
        worker = int(rng.integers(problem.n_workers))
        g = problem.grad_local(worker, x)
        fd = np.array(
            [
                (
                    problem.loss_local(worker, x + eps * e)
                    - problem.loss_local(worker, x - eps * e)
                )
                / (2 * eps)
                for e in eye
            ]
        )
        scale = max(1.0, float(np.max(np.abs(g))))
        worst = max(worst, float(np.max(np.abs(fd - g))) / scale)
    detail = f"worst relative error {worst:.2e}"
    return CriterionResult("gradients", worst <= 1e-5, detail)


CRITERIA: Dict[str, Callable[[], CriterionResult]] = {
    "majority_vote": check_majority_vote,
    "fixed_point": check_fixed_point,
    "plateau": check_plateau,
    "gap_rate": check_gap_rate,
    "variance_rate": check_variance_rate,
    "asymmetry_rate": check_asymmetry_rate,
    "cross_validation": check_cross_validation,
    "noisy_improvement": check_noisy_improvement,
    "bound_audit": check_bound_audit,
    "bit_accounting": check_bit_accounting,
    "determinism": check_determinism,
    "gradients": check_gradients,
}


def run_criteria(names: Optional[Iterable[str]] = None) -> List[CriterionResult]:
    names = list(names) if names else list(CRITERIA)
    unknown = [name for name in names if name not in CRITERIA]
    if unknown:
        raise ValueError(f"unknown criteria: {', '.join(unknown)}")
    results = []
    for name in names:
        logger.task(f"Checking {name}")
        start = time.monotonic()
        result = CRITERIA[name]()
        result = attr.evolve(result, elapsed=time.monotonic() - start)
        (logger.info if result.passed else logger.error)(result.detail)
        results.append(result)
    return results


def print_table(results: List[CriterionResult], console: Optional[Console] = None):
    table = Table(title="Acceptance criteria")
    table.add_column("criterion")
    table.add_column("result")
    table.add_column("elapsed", justify="right")
    table.add_column("detail")
    for result in results:
        table.add_row(
            result.name,
            "[green]pass[/green]" if result.passed else "[red]FAIL[/red]",
            f"{result.elapsed:.2f}s",
            result.detail,
        )
    (console or Console()).print(table)
