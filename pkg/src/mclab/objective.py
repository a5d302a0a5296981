"""
Heterogeneous multi-worker objectives f(x) = (1/M) sum_i f_i(x).

Worker indices are 0-based.
"""

import abc
import math
from functools import cached_property
from typing import Optional

import attr
import numpy as np
from scipy import optimize, special

from mclab import logger as logging

logger = logging.getLogger(__name__)


def _as_matrix(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    array.setflags(write=False)
    return array


class Problem(abc.ABC):
    """Interface shared by every problem family."""

    n_workers: int
    dim: int

    @property
    @abc.abstractmethod
    def smoothness(self) -> float:
        """Lipschitz constant L of the gradient of f."""

    @abc.abstractmethod
    def loss_local(self, worker: int, x: np.ndarray) -> float:
        ...

    @abc.abstractmethod
    def grad_local(self, worker: int, x: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def minimum(self) -> float:
        """min_x f(x)."""

    def loss(self, x: np.ndarray) -> float:
        x = self.check_point(x)
        return float(np.mean([self.loss_local(i, x) for i in range(self.n_workers)]))

    def local_gradients(self, x: np.ndarray) -> np.ndarray:
        """M x d matrix whose rows are grad f_i(x)."""
        x = self.check_point(x)
        return np.stack([self.grad_local(i, x) for i in range(self.n_workers)])

    def local_gradients_many(self, points: np.ndarray) -> np.ndarray:
        """n x M x d array of local gradients at each row of ``points``."""
        return np.stack([self.local_gradients(x) for x in np.atleast_2d(points)])

    def grad_mean(self, x: np.ndarray) -> np.ndarray:
        return self.local_gradients(x).mean(axis=0)

    def initial_gap(self, x1: np.ndarray) -> float:
        """D_f = f(x1) - min f, measured from the actual initial iterate."""
        return max(self.loss(x1) - self.minimum(), 0.0)

    def check_worker(self, worker: int) -> int:
        if not 0 <= worker < self.n_workers:
            raise ValueError(f"worker index {worker} outside [0, {self.n_workers})")
        return worker

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point of dimension {self.dim}, got {x.size}")
        return x


@attr.s(frozen=True, eq=False)
class QuadraticEnsemble(Problem):
    """
    f_i(x) = 1/2 ||x - a_i||^2, one center a_i per worker.
    """

    centers = attr.ib(converter=_as_matrix)

    @centers.validator
    def _check_centers(self, attribute, value):
        if value.ndim != 2 or value.shape[0] < 1 or value.shape[1] < 1:
            raise ValueError("centers must be a non-empty M x d array")
        if not np.all(np.isfinite(value)):
            raise ValueError("centers must be finite")

    @property
    def n_workers(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def smoothness(self) -> float:
        return 1.0

    @cached_property
    def mean_center(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    @cached_property
    def median_center(self) -> np.ndarray:
        k = (self.n_workers - 1) // 2
        return np.partition(self.centers, k, axis=0)[k]

    def loss_local(self, worker, x):
        x = self.check_point(x)
        return 0.5 * float(np.sum(np.square(x - self.centers[self.check_worker(worker)])))

    def loss(self, x):
        x = self.check_point(x)
        return 0.5 * float(np.mean(np.sum(np.square(x - self.centers), axis=1)))

    def grad_local(self, worker, x):
        x = self.check_point(x)
        return x - self.centers[self.check_worker(worker)]

    def local_gradients(self, x):
        return self.check_point(x)[None, :] - self.centers

    def local_gradients_many(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return points[:, None, :] - self.centers[None, :, :]

    def grad_mean(self, x):
        return self.check_point(x) - self.mean_center

    def minimum(self):
        return self.loss(self.mean_center)


def _as_stack(value) -> np.ndarray:
    array = np.array(value, dtype=np.float64)
    array.setflags(write=False)
    return array


@attr.s(frozen=True, eq=False)
class LogisticEnsemble(Problem):
    """
    f_i(x) = (1/K) sum_k l(x; zeta_ik) + reg/2 ||x||^2 with the logistic loss
    l(x; zeta, y) = log(1 + exp(<x, zeta>)) - y <x, zeta>, labels in {0, 1}.
    """

    features = attr.ib(converter=_as_stack)
    labels = attr.ib(converter=_as_stack)
    reg = attr.ib(type=float, converter=float, default=0.0)

    @features.validator
    def _check_features(self, attribute, value):
        if value.ndim != 3 or 0 in value.shape:
            raise ValueError("features must be a non-empty M x K x d array")
        if not np.all(np.isfinite(value)):
            raise ValueError("features must be finite")

    @labels.validator
    def _check_labels(self, attribute, value):
        if value.shape != self.features.shape[:2]:
            raise ValueError("labels must be an M x K array matching features")
        if not np.all((value == 0) | (value == 1)):
            raise ValueError("labels must be 0 or 1")

    @reg.validator
    def _check_reg(self, attribute, value):
        if value < 0:
            raise ValueError(f"regularization weight must be >= 0, got {value}")

    @property
    def n_workers(self) -> int:
        return self.features.shape[0]

    @property
    def n_samples(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @cached_property
    def gradient_bound(self) -> float:
        """
        Q with |grad f_i(x)_j| <= Q: the largest feature magnitude. Valid for
        every x when reg = 0; the ridge term adds reg * |x_j| on top.
        """
        return float(np.max(np.abs(self.features)))

    @cached_property
    def smoothness(self) -> float:
        pooled = self.features.reshape(-1, self.dim)
        second_moment = pooled.T @ pooled / pooled.shape[0]
        return float(np.linalg.eigvalsh(second_moment)[-1]) / 4.0 + self.reg

    def _loss(self, zeta, y, x):
        z = zeta @ x
        data = float(np.mean(np.logaddexp(0.0, z) - y * z))
        return data + 0.5 * self.reg * float(x @ x)

    def _grad(self, zeta, y, x):
        residual = special.expit(zeta @ x) - y
        return zeta.T @ residual / len(y) + self.reg * x

    def loss_local(self, worker, x):
        worker = self.check_worker(worker)
        return self._loss(self.features[worker], self.labels[worker], self.check_point(x))

    def grad_local(self, worker, x):
        worker = self.check_worker(worker)
        return self._grad(self.features[worker], self.labels[worker], self.check_point(x))

    def grad_minibatch(
        self, worker: int, x: np.ndarray, batch_size: int, generator: np.random.Generator
    ) -> np.ndarray:
        """
        Gradient over a uniform batch drawn without replacement; unbiased
        for grad_local.
        """
        worker = self.check_worker(worker)
        if not 1 <= batch_size <= self.n_samples:
            raise ValueError(
                f"batch size must lie in [1, {self.n_samples}], got {batch_size}"
            )
        x = self.check_point(x)
        if batch_size == self.n_samples:
            return self._grad(self.features[worker], self.labels[worker], x)
        idx = generator.choice(self.n_samples, size=batch_size, replace=False)
        return self._grad(self.features[worker][idx], self.labels[worker][idx], x)

    @cached_property
    def _minimum(self) -> float:
        result = optimize.minimize(
            self.loss,
            np.zeros(self.dim),
            jac=self.grad_mean,
            method="L-BFGS-B",
            options={"maxiter": 10_000, "gtol": 1e-10},
        )
        if not result.success:
            logger.warning(f"minimization of f stopped early: {result.message}")
        return float(result.fun)

    def minimum(self):
        return self._minimum


def make_logistic_ensemble(
    n_workers: int = 5,
    dim: int = 10,
    samples_per_worker: int = 100,
    n_classes: int = 10,
    classes_per_worker: int = 2,
    separation: float = 2.0,
    clip: float = 4.0,
    reg: float = 0.0,
    seed: int = 0,
    generator: Optional[np.random.Generator] = None,
) -> LogisticEnsemble:
    """
    Label-skewed synthetic data: every worker only holds points from
    ``classes_per_worker`` (1 or 2) of ``n_classes`` gaussian clusters; the
    binary label of a point is the parity of its cluster.
    """
    if classes_per_worker not in (1, 2):
        raise ValueError("each worker holds one or two classes")
    if n_classes < 2 or samples_per_worker < 1 or n_workers < 1 or dim < 1:
        raise ValueError("n_classes >= 2 and positive sizes are required")
    if clip <= 0:
        raise ValueError("clip must be positive")

    rng = generator or np.random.default_rng(seed)
    centroids = separation * rng.standard_normal((n_classes, dim)) / math.sqrt(dim)

    features = np.empty((n_workers, samples_per_worker, dim))
    labels = np.empty((n_workers, samples_per_worker))
    for worker in range(n_workers):
        owned = [(worker + shift) % n_classes for shift in range(classes_per_worker)]
        classes = rng.choice(owned, size=samples_per_worker)
        points = centroids[classes] + rng.standard_normal((samples_per_worker, dim))
        features[worker] = np.clip(points, -clip, clip)
        labels[worker] = classes % 2

    logger.debug(
        f"generated logistic ensemble: M={n_workers}, K={samples_per_worker}, d={dim}"
    )
    return LogisticEnsemble(features, labels, reg)
