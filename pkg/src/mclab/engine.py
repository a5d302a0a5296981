"""
Round-synchronous parameter-server simulation.

Each round every worker computes a gradient at the shared iterate x_t
(exact or mini-batch, optionally perturbed by b * xi) and uploads it to the
server, billed at the GradientMessage rate. The server applies
x_{t+1} = x_t - delta * direction with the direction given by the aggregation
rule.
"""

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, List, Optional, Sequence, Tuple

import attr
import numpy as np

from mclab import aggregate
from mclab import logger as logging
from mclab.aggregate import Rule
from mclab.noise import Family, NoiseSpec, sample, theorem_noise_scale
from mclab.objective import LogisticEnsemble, Problem, QuadraticEnsemble
from mclab.rng import CounterStream
from mclab.utils import digest, resolve_threads

logger = logging.getLogger(__name__)

FLOAT_BITS = 64
DIVERGENCE_LIMIT = 1e12
# rounds simulated between two vectorized metric passes
CHUNK_ROUNDS = 1024
CHUNK_VALUES = 1 << 20

TRACE_COLUMNS = (
    "t",
    "grad_l1",
    "grad_l2sq",
    "median_grad_l1",
    "median_grad_l2",
    "noiseless_gap_l1",
    "noiseless_gap_l2sq",
    "noiseless_gap_max",
    "direction_norm",
    "uplink_bits",
    "downlink_bits",
    "x_digest",
)


class StepSchedule(str, enum.Enum):
    CONSTANT = "constant"
    THEOREM1 = "theorem1"
    THEOREM2 = "theorem2"
    NOISY_THEOREM = "noisy_theorem"
    NOISY_THEOREM_APPENDIX = "noisy_theorem_appendix"


class NoiseSchedule(str, enum.Enum):
    FIXED = "fixed"
    THEOREM = "theorem"


class GradientMode(str, enum.Enum):
    EXACT = "exact"
    MINIBATCH = "minibatch"


class PayloadKind(str, enum.Enum):
    FULL = "full"
    SIGNS = "signs"


class DivergenceError(ArithmeticError):
    def __init__(self, round: int, reason: str):
        super().__init__(f"iterate diverged at round {round}: {reason}")
        self.round = round


def pack_signs(signs) -> bytes:
    """Sign codes -1/0/+1 packed two bits per coordinate, four per byte."""
    codes = (np.asarray(signs, dtype=np.int8).reshape(-1) + 1).astype(np.uint8)
    padded = np.zeros(-(-codes.size // 4) * 4, dtype=np.uint8)
    padded[: codes.size] = codes
    quads = padded.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def unpack_signs(data: bytes, dim: int) -> np.ndarray:
    packed = np.frombuffer(data, dtype=np.uint8)
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    codes = (packed[:, None] >> shifts) & np.uint8(3)
    return codes.reshape(-1)[:dim].astype(np.int8) - 1


@attr.s(frozen=True, slots=True)
class GradientMessage:
    worker = attr.ib(type=int)
    round = attr.ib(type=int)
    kind = attr.ib(type=PayloadKind)
    payload = attr.ib(type=np.ndarray)

    @classmethod
    def from_gradient(
        cls, worker: int, round: int, gradient: np.ndarray, kind: PayloadKind
    ):
        if kind is PayloadKind.SIGNS:
            return cls(worker, round, kind, np.sign(gradient).astype(np.int8))
        return cls(worker, round, kind, gradient)

    @property
    def dim(self) -> int:
        return self.payload.size

    @property
    def bit_cost(self) -> int:
        return message_bits(self.kind, self.dim)

    def to_bytes(self) -> bytes:
        if self.kind is PayloadKind.SIGNS:
            return pack_signs(self.payload)
        return np.asarray(self.payload, dtype="<f8").tobytes()


def message_bits(kind: PayloadKind, dim: int) -> int:
    """
    Full vectors cost 64 bits per coordinate; sign vectors are billed
    one bit per coordinate.
    """
    return dim if kind is PayloadKind.SIGNS else FLOAT_BITS * dim


def uplink_kind(rule: Rule) -> PayloadKind:
    return PayloadKind.SIGNS if rule is Rule.SIGN_MAJORITY_VOTE else PayloadKind.FULL


def downlink_bits(rule: Rule, dim: int) -> int:
    return dim if rule.is_sign_based else FLOAT_BITS * dim


def _optional_noise(value):
    if value is None or isinstance(value, NoiseSpec):
        return value
    return NoiseSpec(**value)


def _as_point(value) -> tuple:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(value, dtype=np.float64)))


def _positive(instance, attribute, value):
    if value is not None and value <= 0:
        raise ValueError(f"{attribute.name} must be positive, got {value}")


@attr.s(frozen=True)
class AlgoConfig:
    aggregation = attr.ib(type=Rule, converter=Rule)
    rounds = attr.ib(type=int, converter=int, validator=_positive)
    x0 = attr.ib(type=tuple, converter=_as_point)
    step_size = attr.ib(
        type=StepSchedule, converter=StepSchedule, default=StepSchedule.CONSTANT
    )
    delta = attr.ib(type=Optional[float], default=None, validator=_positive)
    noise = attr.ib(type=Optional[NoiseSpec], converter=_optional_noise, default=None)
    noise_schedule = attr.ib(
        type=NoiseSchedule, converter=NoiseSchedule, default=NoiseSchedule.FIXED
    )
    gradient_mode = attr.ib(
        type=GradientMode, converter=GradientMode, default=GradientMode.EXACT
    )
    batch_size = attr.ib(type=Optional[int], default=None, validator=_positive)
    seed = attr.ib(type=int, converter=int, default=0)
    snapshot_every = attr.ib(type=Optional[int], default=None, validator=_positive)

    def __attrs_post_init__(self):
        if self.step_size is StepSchedule.CONSTANT and self.delta is None:
            raise ValueError("a constant step schedule needs delta")
        if self.gradient_mode is GradientMode.MINIBATCH and self.batch_size is None:
            raise ValueError("mini-batch gradients need batch_size")
        if self.noise_schedule is NoiseSchedule.THEOREM and self.noise is None:
            raise ValueError("the theorem noise schedule needs a noise family")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not all(math.isfinite(v) for v in self.x0):
            raise ValueError("x0 must be finite")

    @property
    def snapshot_stride(self) -> int:
        return self.snapshot_every or max(1, math.ceil(self.rounds / 1000))

    def initial_point(self, problem: Problem) -> np.ndarray:
        x0 = np.array(self.x0)
        if x0.size == 1 and problem.dim > 1:
            x0 = np.full(problem.dim, x0[0])
        return problem.check_point(x0)

    def resolve_step(self, problem: Problem) -> float:
        T, d = self.rounds, problem.dim
        schedule = self.step_size
        if schedule is StepSchedule.CONSTANT:
            return float(self.delta)
        if schedule is StepSchedule.THEOREM1:
            gap = problem.initial_gap(self.initial_point(problem))
            if gap == 0:
                logger.warning("D_f is zero at x0, the theorem1 step size is zero")
            return math.sqrt(gap / (problem.smoothness * d * T))
        if schedule is StepSchedule.THEOREM2:
            return min(1.0 / math.sqrt(T * d), 1.0 / (3.0 * problem.smoothness))
        if schedule is StepSchedule.NOISY_THEOREM:
            return 1.0 / math.sqrt(T * d)
        return float(T * d) ** -0.75

    def resolve_noise(self, problem: Problem) -> Optional[NoiseSpec]:
        if self.noise is None:
            return None
        if self.noise_schedule is NoiseSchedule.THEOREM:
            return self.noise.with_scale(theorem_noise_scale(self.rounds, problem.dim))
        return self.noise

    def with_noise(self, noise: Optional[NoiseSpec]) -> "AlgoConfig":
        return attr.evolve(self, noise=noise, noise_schedule=NoiseSchedule.FIXED)


@attr.s
class RunTrace:
    """Per-round records of one run plus its terminal state."""

    config = attr.ib(type=AlgoConfig)
    n_workers = attr.ib(type=int)
    dim = attr.ib(type=int)
    step_size = attr.ib(type=float)
    noise = attr.ib(type=Optional[NoiseSpec])
    columns = attr.ib(type=dict)
    snapshot_rounds = attr.ib(type=np.ndarray)
    snapshot_x = attr.ib(type=np.ndarray)
    snapshot_grad = attr.ib(type=np.ndarray)
    final_x = attr.ib(type=np.ndarray)
    final_local_grads = attr.ib(type=np.ndarray)

    @property
    def rounds(self) -> int:
        return len(self.columns["t"])

    @property
    def noise_scale(self) -> float:
        return self.noise.b if self.noise is not None else 0.0

    @property
    def final_grad(self) -> np.ndarray:
        return self.final_local_grads.mean(axis=0)

    @property
    def final_median_grad(self) -> np.ndarray:
        return aggregate.coordinate_median(self.final_local_grads)

    def rows(self) -> Iterator[dict]:
        for k in range(self.rounds):
            yield {name: self.columns[name][k] for name in TRACE_COLUMNS}

    def summary(self) -> dict:
        uplink, downlink = account_bits(self)
        return {
            "rounds": self.rounds,
            "n_workers": self.n_workers,
            "dim": self.dim,
            "aggregation": self.config.aggregation.value,
            "step_size": self.step_size,
            "noise_family": self.noise.family.value if self.noise else None,
            "noise_scale": self.noise_scale,
            "seed": self.config.seed,
            "final_x": self.final_x.tolist(),
            "final_mean_grad_l1": float(np.abs(self.final_grad).sum()),
            "final_mean_grad_l2sq": float(np.square(self.final_grad).sum()),
            "final_median_grad_l1": float(np.abs(self.final_median_grad).sum()),
            "min_grad_l1": float(np.min(self.columns["grad_l1"])),
            "min_grad_l2sq": float(np.min(self.columns["grad_l2sq"])),
            "last_grad_l1": float(self.columns["grad_l1"][-1]),
            "last_grad_l2sq": float(self.columns["grad_l2sq"][-1]),
            "uplink_bits": uplink,
            "downlink_bits": downlink,
        }


def account_bits(trace: RunTrace) -> Tuple[int, int]:
    """Total (uplink, downlink) bits of a completed run."""
    return (
        int(np.sum(trace.columns["uplink_bits"])),
        int(np.sum(trace.columns["downlink_bits"])),
    )


class _Workers:
    """Simulated workers: local gradient oracles and their random streams."""

    def __init__(self, problem: Problem, config: AlgoConfig, noise, threads: int):
        self.problem = problem
        self.config = config
        self.noise = noise if noise is not None and noise.b > 0 else None
        self.kind = uplink_kind(config.aggregation)
        root = CounterStream(config.seed, ("run",))
        self.noise_streams = [root.child("noise", i) for i in range(problem.n_workers)]
        self.minibatch = config.gradient_mode is GradientMode.MINIBATCH
        if self.minibatch:
            if not isinstance(problem, LogisticEnsemble):
                raise ValueError("mini-batch gradients need a data-based problem")
            if config.batch_size > problem.n_samples:
                raise ValueError(
                    f"batch size {config.batch_size} exceeds the {problem.n_samples} "
                    "samples per worker"
                )
            self.generators = [
                root.child("batch", i).generator() for i in range(problem.n_workers)
            ]
        parallel = threads > 1 and isinstance(problem, LogisticEnsemble)
        self.pool = ThreadPoolExecutor(max_workers=threads) if parallel else None
        # exact quadratic gradients are x - a_i for every worker at once
        exact_quadratic = isinstance(problem, QuadraticEnsemble) and not self.minibatch
        self.centers = problem.centers if exact_quadratic else None
        self.upload_bits = problem.n_workers * message_bits(self.kind, problem.dim)

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def noise_block(self, first_round: int, count: int) -> Optional[np.ndarray]:
        """count x M x d perturbations for rounds [first_round, first_round + count)."""
        if self.noise is None:
            return None
        d = self.problem.dim
        offset = (first_round - 1) * d
        return np.stack(
            [
                sample(self.noise, stream, count * d, offset).reshape(count, d)
                for stream in self.noise_streams
            ],
            axis=1,
        )

    def _local(self, worker: int, x: np.ndarray) -> np.ndarray:
        if self.minibatch:
            return self.problem.grad_minibatch(
                worker, x, self.config.batch_size, self.generators[worker]
            )
        return self.problem.grad_local(worker, x)

    def gradients(self, x: np.ndarray) -> np.ndarray:
        if self.centers is not None:
            return x - self.centers
        if not self.minibatch and self.pool is None:
            return self.problem.local_gradients(x)
        workers = range(self.problem.n_workers)
        if self.pool is not None:
            return np.stack(list(self.pool.map(lambda i: self._local(i, x), workers)))
        return np.stack([self._local(i, x) for i in workers])


def server_rule(rule: Rule):
    """
    The aggregation function of ``rule``, resolved once per run so the round
    loop skips the dispatch.
    """
    return {
        Rule.MEAN: aggregate.mean,
        Rule.MEDIAN: aggregate.coordinate_median,
        Rule.SIGN_MAJORITY_VOTE: aggregate.majority_vote_sign,
        Rule.SIGN_OF_MEDIAN: aggregate.sign_of_median,
    }[Rule(rule)]


def _check_finite(points: np.ndarray, first_round: int):
    bad = ~np.all(np.isfinite(points), axis=1)
    large = np.zeros_like(bad)
    large[~bad] = np.max(np.abs(points[~bad]), axis=1) > DIVERGENCE_LIMIT
    if np.any(bad | large):
        k = int(np.argmax(bad | large))
        reason = "non-finite iterate" if bad[k] else f"|x| exceeds {DIVERGENCE_LIMIT:g}"
        raise DivergenceError(first_round + k, reason)


def _round_metrics(problem: Problem, xs: np.ndarray) -> dict:
    grads = problem.local_gradients_many(xs)
    k = (problem.n_workers - 1) // 2
    median = np.partition(grads, k, axis=1)[:, k]
    mean = grads.mean(axis=1)
    gap = median - mean
    return {
        "grad": mean,
        "grad_l1": np.abs(mean).sum(axis=1),
        "grad_l2sq": np.square(mean).sum(axis=1),
        "median_grad_l1": np.abs(median).sum(axis=1),
        "median_grad_l2": np.sqrt(np.square(median).sum(axis=1)),
        "gap_l1": np.abs(gap).sum(axis=1),
        "gap_l2sq": np.square(gap).sum(axis=1),
        "gap_max": np.abs(gap).max(axis=1),
    }


def run(problem: Problem, config: AlgoConfig, threads: Optional[int] = None) -> RunTrace:
    """Simulate ``config.rounds`` rounds and return the full trace."""
    rule = config.aggregation
    aggregate.check_worker_count(rule, problem.n_workers)
    M, d, T = problem.n_workers, problem.dim, config.rounds
    x = config.initial_point(problem).copy()
    delta = config.resolve_step(problem)
    noise = config.resolve_noise(problem)
    stride = config.snapshot_stride
    chunk = max(1, min(CHUNK_ROUNDS, CHUNK_VALUES // (M * d)))

    logger.debug(
        f"{rule.value}: M={M}, d={d}, T={T}, delta={delta:.6g}, "
        f"b={noise.b if noise else 0:.6g}, {config.gradient_mode.value} gradients"
    )

    workers = _Workers(problem, config, noise, resolve_threads(threads))
    combine = server_rule(rule)
    parts = {name: [] for name in TRACE_COLUMNS}
    snapshot_rounds, snapshot_x, snapshot_grad = [], [], []
    up, down = workers.upload_bits, downlink_bits(rule, d)
    try:
        for first in range(1, T + 1, chunk):
            count = min(chunk, T + 1 - first)
            perturbations = workers.noise_block(first, count)
            xs = np.empty((count, d))
            directions = np.empty((count, d))
            with np.errstate(over="ignore", invalid="ignore"):
                for k in range(count):
                    xs[k] = x
                    gradients = workers.gradients(x)
                    if perturbations is not None:
                        gradients = gradients + perturbations[k]
                    directions[k] = combine(gradients)
                    x = x - delta * directions[k]
            _check_finite(np.vstack([xs[1:], x[None, :]]), first + 1)

            rounds = np.arange(first, first + count)
            metrics = _round_metrics(problem, xs)
            parts["t"].append(rounds)
            for name in ("grad_l1", "grad_l2sq", "median_grad_l1", "median_grad_l2"):
                parts[name].append(metrics[name])
            for name in ("gap_l1", "gap_l2sq", "gap_max"):
                parts[f"noiseless_{name}"].append(metrics[name])
            parts["direction_norm"].append(np.sqrt(np.square(directions).sum(axis=1)))
            parts["uplink_bits"].append(np.full(count, up, dtype=np.int64))
            parts["downlink_bits"].append(np.full(count, down, dtype=np.int64))
            parts["x_digest"].append(np.array([digest(row) for row in xs]))

            keep = (rounds - 1) % stride == 0
            snapshot_rounds.append(rounds[keep])
            snapshot_x.append(xs[keep])
            snapshot_grad.append(metrics["grad"][keep])
    finally:
        workers.close()

    return RunTrace(
        config=config,
        n_workers=M,
        dim=d,
        step_size=delta,
        noise=noise,
        columns={name: np.concatenate(values) for name, values in parts.items()},
        snapshot_rounds=np.concatenate(snapshot_rounds),
        snapshot_x=np.concatenate(snapshot_x),
        snapshot_grad=np.concatenate(snapshot_grad),
        final_x=x,
        final_local_grads=problem.local_gradients(x),
    )


def run_noisy_sweep(
    problem: Problem,
    base_config: AlgoConfig,
    b_grid: Sequence[float],
    threads: Optional[int] = None,
) -> List[RunTrace]:
    """
    One run per noise scale, all with the seed of ``base_config``; b = 0
    reproduces the unperturbed algorithm.
    """
    if len(b_grid) == 0:
        raise ValueError("the noise grid must not be empty")
    if any(b < 0 for b in b_grid):
        raise ValueError("noise scales must be non-negative")
    family = base_config.noise.family if base_config.noise else Family.GAUSSIAN
    return [
        run(problem, base_config.with_noise(NoiseSpec(family, b)), threads)
        for b in b_grid
    ]
