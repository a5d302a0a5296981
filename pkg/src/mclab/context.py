"""
Experiment configuration.

Configs are JSON documents, parsed with the json module. The same text is also
composed by PyYAML (JSON is nearly a YAML subset) so that every key keeps its
source line for diagnostics. The schema is the
tree of attrs classes below: unknown keys and missing required keys are
rejected before anything is computed.
"""

import enum
import json
from pathlib import Path
from typing import List, Optional, Tuple

import attr
import yaml

from mclab import logger as logging
from mclab.aggregate import Rule, check_worker_count
from mclab.engine import AlgoConfig, GradientMode, NoiseSchedule, StepSchedule
from mclab.noise import Family, NoiseSpec
from mclab.objective import Problem, QuadraticEnsemble, make_logistic_ensemble
from mclab.rng import derive_seed

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str, line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{path}: {message}{where}" if path else f"{message}{where}")
        self.path = path
        self.line = line


class ProblemFamily(str, enum.Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"


class StudyKind(str, enum.Enum):
    SINGLE = "single"
    SWEEP = "sweep"
    MEDIANLAB = "medianlab"


def _integer(value) -> int:
    if isinstance(value, (str, bool)):
        raise ValueError(f"expected an integer, got {value!r}")
    # exponent notation such as 1e5 parses as a float
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {value}")
    return int(value)


def _optional_integer(value):
    return None if value is None else _integer(value)


def _optional_float(value):
    return None if value is None else float(value)


def _tuple_of_floats(value) -> tuple:
    if isinstance(value, (int, float, str)):
        return (float(value),)
    return tuple(float(v) for v in value)


def _optional_tuple_of_floats(value):
    return None if value is None else _tuple_of_floats(value)


def _optional_seeds(value):
    return None if value is None else tuple(_integer(v) for v in value)


def _centers(value):
    if value is None:
        return None
    return tuple(_tuple_of_floats(center) for center in value)


def _families(value) -> tuple:
    if isinstance(value, str):
        value = [value]
    return tuple(Family(family) for family in value)


def _positive(instance, attribute, value):
    if value is not None and value <= 0:
        raise ValueError(f"{attribute.name} must be positive, got {value}")


def _section(cls, required: bool = True):
    if required:
        return attr.ib(type=cls, metadata={"section": cls})
    return attr.ib(type=Optional[cls], default=None, metadata={"section": cls})


@attr.s(frozen=True)
class ProblemSection:
    family = attr.ib(type=ProblemFamily, converter=ProblemFamily)
    centers = attr.ib(type=Optional[tuple], converter=_centers, default=None)
    n_workers = attr.ib(type=int, converter=_integer, default=5)
    dim = attr.ib(type=int, converter=_integer, default=10)
    samples_per_worker = attr.ib(type=int, converter=_integer, default=100)
    n_classes = attr.ib(type=int, converter=_integer, default=10)
    classes_per_worker = attr.ib(type=int, converter=_integer, default=2)
    separation = attr.ib(type=float, converter=float, default=2.0)
    clip = attr.ib(type=float, converter=float, default=4.0)
    reg = attr.ib(type=float, converter=float, default=0.0)
    seed = attr.ib(type=int, converter=_integer, default=0)

    def __attrs_post_init__(self):
        if self.family is ProblemFamily.QUADRATIC and not self.centers:
            raise ValueError("a quadratic problem needs centers")


@attr.s(frozen=True)
class NoiseSection:
    family = attr.ib(type=Family, converter=Family, default=Family.GAUSSIAN)
    b = attr.ib(type=float, converter=float, default=0.0)
    schedule = attr.ib(
        type=NoiseSchedule, converter=NoiseSchedule, default=NoiseSchedule.FIXED
    )


@attr.s(frozen=True)
class AlgoSection:
    aggregation = attr.ib(type=Rule, converter=Rule)
    rounds = attr.ib(type=int, converter=_integer, validator=_positive)
    x0 = attr.ib(type=tuple, converter=_tuple_of_floats)
    step = attr.ib(
        type=StepSchedule, converter=StepSchedule, default=StepSchedule.CONSTANT
    )
    delta = attr.ib(
        type=Optional[float], converter=_optional_float, default=None, validator=_positive
    )
    noise = _section(NoiseSection, required=False)
    gradient = attr.ib(
        type=GradientMode, converter=GradientMode, default=GradientMode.EXACT
    )
    batch_size = attr.ib(
        type=Optional[int], converter=_optional_integer, default=None, validator=_positive
    )
    snapshot_every = attr.ib(
        type=Optional[int], converter=_optional_integer, default=None, validator=_positive
    )


@attr.s(frozen=True)
class SeedsSection:
    base = attr.ib(type=int, converter=_integer, default=0)
    repetitions = attr.ib(type=int, converter=_integer, default=1)
    values = attr.ib(type=Optional[tuple], converter=_optional_seeds, default=None)

    def __attrs_post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def resolve(self) -> List[int]:
        """Explicit values, else the base seed followed by derived seeds."""
        if self.values:
            return list(self.values)
        derived = [derive_seed(self.base, r) for r in range(1, self.repetitions)]
        return [self.base] + derived


@attr.s(frozen=True)
class StudySection:
    kind = attr.ib(type=StudyKind, converter=StudyKind, default=StudyKind.SINGLE)
    b_grid = attr.ib(
        type=Optional[tuple], converter=_optional_tuple_of_floats, default=None
    )
    u = attr.ib(type=Optional[tuple], converter=_optional_tuple_of_floats, default=None)
    families = attr.ib(type=tuple, converter=_families, default=("gaussian",))
    mc_samples = attr.ib(type=int, converter=_integer, default=10**6)

    def __attrs_post_init__(self):
        if self.kind is not StudyKind.SINGLE and not self.b_grid:
            raise ValueError(f"a {self.kind.value} study needs b_grid")
        if self.kind is StudyKind.MEDIANLAB and not self.u:
            raise ValueError("a medianlab study needs u")


@attr.s(frozen=True)
class MetricsSection:
    gap_points = attr.ib(type=int, converter=_integer, default=50)
    mc_samples = attr.ib(type=int, converter=_integer, default=10**5)


@attr.s(frozen=True)
class ExperimentConfig:
    problem = _section(ProblemSection, required=False)
    algo = _section(AlgoSection, required=False)
    seeds = attr.ib(
        type=SeedsSection, factory=SeedsSection, metadata={"section": SeedsSection}
    )
    output = attr.ib(type=str, default="runs")
    study = attr.ib(
        type=StudySection, factory=StudySection, metadata={"section": StudySection}
    )
    metrics = attr.ib(
        type=MetricsSection, factory=MetricsSection, metadata={"section": MetricsSection}
    )

    def __attrs_post_init__(self):
        if self.study.kind is not StudyKind.MEDIANLAB:
            if self.problem is None:
                raise ConfigError("problem", "missing required field")
            if self.algo is None:
                raise ConfigError("algo", "missing required field")


def _line(node) -> Optional[int]:
    return node.start_mark.line + 1 if node is not None else None


def _children(node) -> dict:
    if isinstance(node, yaml.MappingNode):
        return {key.value: (key, value) for key, value in node.value}
    return {}


def _build(cls, data, node, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object", _line(node))
    children = _children(node)
    fields = {field.name: field for field in attr.fields(cls)}

    for key in data:
        if key not in fields:
            key_node = children.get(key, (None, None))[0]
            raise ConfigError(_join(path, key), "unknown field", _line(key_node))

    kwargs = {}
    for name, field in fields.items():
        field_path = _join(path, name)
        if name not in data:
            if field.default is attr.NOTHING:
                raise ConfigError(field_path, "missing required field", _line(node))
            continue
        value = data[name]
        section = field.metadata.get("section")
        if section is not None and value is not None:
            value_node = children.get(name, (None, None))[1]
            value = _build(section, value, value_node, field_path)
        kwargs[name] = value

    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(path, str(e), _line(node)) from e


def _join(path: str, name: str) -> str:
    return f"{path}.{name}" if path else name


def parse_configuration(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON: {e.msg}", e.lineno) from e
    # YAML rejects tab indentation that JSON allows; the tree only maps keys to lines
    try:
        node = yaml.compose(text.expandtabs())
    except yaml.YAMLError as e:
        logger.debug(f"no line information for this configuration: {e}")
        node = None
    return _build(ExperimentConfig, data, node, "")


def load_configuration(configuration_path: Path) -> ExperimentConfig:
    configuration_path = Path(configuration_path)
    if not configuration_path.exists():
        raise ConfigError("", f"configuration {configuration_path} does not exist")
    if not configuration_path.is_file():
        raise ConfigError("", f"{configuration_path} is not a file")
    logger.debug(f"loading configuration {configuration_path}")
    return parse_configuration(configuration_path.read_text())


def _serialize(instance, field, value):
    if isinstance(value, enum.Enum):
        return value.value
    return value


def to_dict(config: ExperimentConfig) -> dict:
    """Plain JSON-compatible form; parses back to an equal config."""
    return attr.asdict(config, retain_collection_types=False, value_serializer=_serialize)


def build_problem(section: ProblemSection) -> Problem:
    if section.family is ProblemFamily.QUADRATIC:
        return QuadraticEnsemble(section.centers)
    return make_logistic_ensemble(
        n_workers=section.n_workers,
        dim=section.dim,
        samples_per_worker=section.samples_per_worker,
        n_classes=section.n_classes,
        classes_per_worker=section.classes_per_worker,
        separation=section.separation,
        clip=section.clip,
        reg=section.reg,
        seed=section.seed,
    )


def build_algo(section: AlgoSection, seed: int) -> AlgoConfig:
    noise = section.noise
    return AlgoConfig(
        aggregation=section.aggregation,
        rounds=section.rounds,
        x0=section.x0,
        step_size=section.step,
        delta=section.delta,
        noise=NoiseSpec(noise.family, noise.b) if noise is not None else None,
        noise_schedule=noise.schedule if noise is not None else NoiseSchedule.FIXED,
        gradient_mode=section.gradient,
        batch_size=section.batch_size,
        seed=seed,
        snapshot_every=section.snapshot_every,
    )


def _is_noisy(config: ExperimentConfig) -> bool:
    noise = config.algo.noise
    if noise is not None and (noise.b > 0 or noise.schedule is NoiseSchedule.THEOREM):
        return True
    study = config.study
    return study.kind is StudyKind.SWEEP and any(b > 0 for b in study.b_grid)


def prepare(config: ExperimentConfig) -> Tuple[Optional[Problem], List[AlgoConfig]]:
    """
    Build the problem and one AlgoConfig per seed, checking the constraints
    that involve several sections at once.
    """
    study = config.study
    if study.b_grid is not None and any(b < 0 for b in study.b_grid):
        raise ConfigError("study.b_grid", "noise scales must be non-negative")
    if study.kind is StudyKind.MEDIANLAB:
        if len(study.u) % 2 == 0:
            raise ConfigError("study.u", "the median law needs an odd number of values")
        return None, []
    try:
        problem = build_problem(config.problem)
    except ValueError as e:
        raise ConfigError("problem", str(e)) from e
    try:
        algos = [build_algo(config.algo, seed) for seed in config.seeds.resolve()]
        check_worker_count(config.algo.aggregation, problem.n_workers)
        algos[0].initial_point(problem)
    except ValueError as e:
        raise ConfigError("algo", str(e)) from e
    if problem.n_workers % 2 == 0 and _is_noisy(config):
        raise ConfigError(
            "algo.noise",
            f"noisy runs need an odd number of workers, got {problem.n_workers}",
        )
    if config.algo.gradient is GradientMode.MINIBATCH:
        if config.problem.family is not ProblemFamily.LOGISTIC:
            raise ConfigError(
                "algo.gradient", "mini-batch gradients need a logistic problem"
            )
        if config.algo.batch_size > problem.n_samples:
            raise ConfigError(
                "algo.batch_size",
                f"exceeds the {problem.n_samples} samples held by each worker",
            )
    return problem, algos
