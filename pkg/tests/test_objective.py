import numpy as np
import pytest

from mclab.aggregate import coordinate_median
from mclab.objective import LogisticEnsemble, QuadraticEnsemble, make_logistic_ensemble


def test_quadratic_gradients():
    problem = QuadraticEnsemble([[0.0], [1.0], [5.0]])

    assert problem.n_workers == 3 and problem.dim == 1
    assert problem.grad_local(2, [1.0]) == pytest.approx([-4.0])
    assert problem.grad_mean([1.0]) == pytest.approx([-1.0])
    assert np.abs(problem.grad_mean([1.0])).sum() == pytest.approx(1.0)
    assert problem.grad_mean(problem.mean_center) == pytest.approx([0.0])
    assert problem.smoothness == 1.0


def test_median_gradient_plateau(plateau_problem):
    assert plateau_problem.grad_local(1, [2.0]) == pytest.approx([0.0])
    assert plateau_problem.grad_mean([2.0]) == pytest.approx([-7.0 / 3.0])


def test_quadratic_median_gradient(random_quadratic):
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=random_quadratic.dim)
        median = coordinate_median(random_quadratic.local_gradients(x))
        assert np.allclose(median, x - random_quadratic.median_center)


def test_grad_mean_is_mean_of_local(random_quadratic, logistic_problem):
    rng = np.random.default_rng(1)
    for problem in (random_quadratic, logistic_problem):
        x = rng.normal(size=problem.dim)
        local = np.stack([problem.grad_local(i, x) for i in range(problem.n_workers)])
        assert np.allclose(problem.grad_mean(x), local.mean(axis=0))
        assert np.allclose(problem.local_gradients(x), local)


def test_local_gradients_many(random_quadratic, logistic_problem):
    rng = np.random.default_rng(2)
    for problem in (random_quadratic, logistic_problem):
        points = rng.normal(size=(4, problem.dim))
        many = problem.local_gradients_many(points)
        assert many.shape == (4, problem.n_workers, problem.dim)
        assert np.allclose(many[3], problem.local_gradients(points[3]))


def test_initial_gap():
    problem = QuadraticEnsemble([[0.0], [1.0], [5.0]])
    # f(x) = 1/2 (x - 2)^2 + const, so D_f = 1/2 (x1 - 2)^2
    assert problem.initial_gap([0.0]) == pytest.approx(2.0)
    assert problem.initial_gap([2.0]) == pytest.approx(0.0)


def test_directional_derivatives(random_quadratic, logistic_problem):
    rng = np.random.default_rng(3)
    eps = 1e-5
    for problem in (random_quadratic, logistic_problem):
        for _ in range(10):
            x = rng.normal(size=problem.dim)
            v = rng.normal(size=problem.dim)
            v /= np.linalg.norm(v)
            fd = (problem.loss(x + eps * v) - problem.loss(x - eps * v)) / (2 * eps)
            assert abs(problem.grad_mean(x) @ v - fd) <= 1e-5


def test_logistic_finite_differences(logistic_problem):
    rng = np.random.default_rng(4)
    eps = 1e-5
    for _ in range(10):
        x = rng.normal(size=logistic_problem.dim)
        worker = int(rng.integers(logistic_problem.n_workers))
        g = logistic_problem.grad_local(worker, x)
        fd = np.array(
            [
                logistic_problem.loss_local(worker, x + eps * e)
                - logistic_problem.loss_local(worker, x - eps * e)
                for e in np.eye(logistic_problem.dim)
            ]
        ) / (2 * eps)
        assert np.allclose(fd, g, rtol=1e-6, atol=1e-8)


def test_minibatch_full_batch_is_exact(logistic_problem):
    x = np.full(logistic_problem.dim, 0.3)
    generator = np.random.default_rng(0)
    full = logistic_problem.grad_minibatch(0, x, logistic_problem.n_samples, generator)
    assert np.array_equal(full, logistic_problem.grad_local(0, x))


def test_minibatch_single_sample():
    problem = LogisticEnsemble(np.ones((3, 1, 2)), np.array([[1.0], [0.0], [1.0]]))
    x = np.array([0.5, -0.25])
    generator = np.random.default_rng(0)
    batch = problem.grad_minibatch(1, x, 1, generator)
    assert np.array_equal(batch, problem.grad_local(1, x))


def test_minibatch_is_unbiased(logistic_problem):
    x = np.full(logistic_problem.dim, -0.2)
    generator = np.random.default_rng(5)
    draws = np.stack(
        [logistic_problem.grad_minibatch(2, x, 5, generator) for _ in range(20000)]
    )
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    error = np.abs(draws.mean(axis=0) - logistic_problem.grad_local(2, x))
    assert np.all(error <= 4 * se)


def test_logistic_constants(logistic_problem):
    assert logistic_problem.gradient_bound <= 4.0
    assert logistic_problem.smoothness > logistic_problem.reg
    origin = np.zeros(logistic_problem.dim)
    assert logistic_problem.minimum() <= logistic_problem.loss(origin)
    assert logistic_problem.initial_gap(origin) >= 0.0


def test_logistic_generator_is_label_skewed():
    problem = make_logistic_ensemble(n_workers=4, classes_per_worker=1, seed=0)
    for worker in range(problem.n_workers):
        # a single class per worker means a single label
        assert len(np.unique(problem.labels[worker])) == 1
    again = make_logistic_ensemble(n_workers=4, classes_per_worker=1, seed=0)
    assert np.array_equal(problem.features, again.features)


def test_rejected_inputs(logistic_problem):
    problem = QuadraticEnsemble([[0.0, 1.0], [2.0, 3.0]])
    with pytest.raises(ValueError):
        problem.grad_local(0, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        problem.grad_local(2, [1.0, 2.0])
    with pytest.raises(ValueError):
        logistic_problem.grad_minibatch(
            0, np.zeros(logistic_problem.dim), logistic_problem.n_samples + 1, None
        )
    with pytest.raises(ValueError):
        LogisticEnsemble(np.ones((2, 3, 2)), np.full((2, 3), 0.5))
    with pytest.raises(ValueError):
        make_logistic_ensemble(classes_per_worker=3)
