import math

import attr
import numpy as np
import pytest

from mclab.aggregate import Rule, aggregate
from mclab.engine import (
    TRACE_COLUMNS,
    AlgoConfig,
    DivergenceError,
    GradientMessage,
    GradientMode,
    NoiseSchedule,
    PayloadKind,
    account_bits,
    message_bits,
    pack_signs,
    run,
    run_noisy_sweep,
    server_rule,
    unpack_signs,
    uplink_kind,
)
from mclab.noise import NoiseSpec
from mclab.objective import QuadraticEnsemble
from mclab.output import render_trace


def test_signsgd_stalls_at_the_median(stall_problem):
    config = AlgoConfig(Rule.SIGN_MAJORITY_VOTE, 5000, 0.0005, delta=1e-3)
    trace = run(stall_problem, config)
    assert abs(trace.final_x[0] - 1.0) <= 1e-3
    assert np.abs(trace.final_grad).sum() == pytest.approx(1.0, abs=2e-3)
    # never reaches a stationary point of f
    assert trace.columns["grad_l1"].min() >= 1.0 - 2e-3


def test_mediansgd_stalls_at_the_median(stall_problem):
    trace = run(stall_problem, AlgoConfig(Rule.MEDIAN, 2000, 0.0005, delta=0.1))
    assert trace.final_x[0] == pytest.approx(1.0, abs=1e-9)
    assert np.square(trace.final_grad).sum() == pytest.approx(1.0, abs=1e-6)


def test_mediansgd_reaches_the_plateau(plateau_problem):
    trace = run(plateau_problem, AlgoConfig(Rule.MEDIAN, 20000, 0.0005, delta=1e-3))
    assert np.abs(trace.final_median_grad).sum() <= 1e-6
    assert np.abs(trace.final_grad).sum() == pytest.approx(7.0 / 3.0, abs=1e-3)
    assert trace.summary()["final_mean_grad_l1"] == pytest.approx(7.0 / 3.0, abs=1e-3)


def test_signsgd_oscillates_on_the_plateau(plateau_problem):
    delta = 1e-3
    config = AlgoConfig(Rule.SIGN_MAJORITY_VOTE, 20000, 0.0005, delta=delta)
    trace = run(plateau_problem, config)
    assert np.max(trace.columns["median_grad_l1"][-1000:]) <= 2 * delta
    assert np.abs(trace.final_grad).sum() == pytest.approx(7.0 / 3.0, abs=2e-3)


def test_mean_rule_converges(stall_problem):
    trace = run(stall_problem, AlgoConfig(Rule.MEAN, 2000, 0.0, delta=0.1))
    assert trace.final_x[0] == pytest.approx(2.0, abs=1e-9)
    assert trace.columns["grad_l2sq"][-1] < 1e-15


def test_median_descent_matches_closed_form(random_quadratic):
    delta = 0.05
    x0 = np.linspace(-1, 1, random_quadratic.dim)
    config = AlgoConfig(Rule.MEDIAN, 200, x0, delta=delta, snapshot_every=1)
    trace = run(random_quadratic, config)
    median = random_quadratic.median_center
    t = trace.snapshot_rounds[:, None]
    expected = median + (1 - delta) ** (t - 1) * (x0 - median)
    assert np.allclose(trace.snapshot_x, expected, rtol=0, atol=1e-12)


def test_trace_columns(random_quadratic):
    trace = run(random_quadratic, AlgoConfig(Rule.MEDIAN, 50, 0.0, delta=0.1))
    assert trace.rounds == 50
    assert set(trace.columns) == set(TRACE_COLUMNS)
    assert np.array_equal(trace.columns["t"], np.arange(1, 51))
    rows = list(trace.rows())
    assert rows[0]["t"] == 1
    assert set(rows[0]) == set(TRACE_COLUMNS)
    gap_max = trace.columns["noiseless_gap_max"]
    gap_l2sq = trace.columns["noiseless_gap_l2sq"]
    assert np.all(gap_max**2 <= gap_l2sq + 1e-15)
    # fewer than 1000 rounds keep every snapshot
    assert trace.snapshot_rounds.size == 50
    grad_l2sq = np.square(trace.snapshot_grad).sum(axis=1)
    assert np.allclose(trace.columns["grad_l2sq"], grad_l2sq)


def test_bit_accounting():
    rng = np.random.default_rng(0)
    problem = QuadraticEnsemble(rng.standard_normal((5, 10)))
    sign_trace = run(problem, AlgoConfig(Rule.SIGN_MAJORITY_VOTE, 100, 0.0, delta=1e-2))
    median_trace = run(problem, AlgoConfig(Rule.MEDIAN, 100, 0.0, delta=1e-2))
    assert account_bits(sign_trace) == (5_000, 1_000)
    assert account_bits(median_trace) == (320_000, 64_000)
    assert sign_trace.summary()["uplink_bits"] == 5_000


def test_gradient_message():
    g = np.array([0.5, -2.0, 0.0])
    message = GradientMessage.from_gradient(3, 7, g, PayloadKind.SIGNS)
    assert message.bit_cost == 3
    assert np.array_equal(message.payload, [1, -1, 0])
    assert len(message.to_bytes()) == 1
    full = GradientMessage.from_gradient(3, 7, g, PayloadKind.FULL)
    assert full.bit_cost == 192
    assert np.array_equal(np.frombuffer(full.to_bytes(), dtype="<f8"), g)


def test_uplink_is_billed_at_the_message_rate(random_quadratic):
    g = np.ones(random_quadratic.dim)
    for rule in Rule:
        kind = uplink_kind(rule)
        message = GradientMessage.from_gradient(0, 1, g, kind)
        assert message.bit_cost == message_bits(kind, random_quadratic.dim)
        trace = run(random_quadratic, AlgoConfig(rule, 20, 0.0, delta=1e-2))
        expected = random_quadratic.n_workers * message.bit_cost
        assert np.all(trace.columns["uplink_bits"] == expected)


def test_server_rule_matches_aggregate():
    vectors = np.random.default_rng(4).standard_normal((5, 6))
    for rule in Rule:
        assert np.array_equal(server_rule(rule)(vectors), aggregate(rule, vectors))


def test_sign_packing():
    signs = np.array([1, -1, 0, 1, 1, -1, 0], dtype=np.int8)
    data = pack_signs(signs)
    assert len(data) == 2
    assert np.array_equal(unpack_signs(data, signs.size), signs)


def test_same_seed_same_trace(random_quadratic):
    noise = NoiseSpec("laplace", 2.0)
    config = AlgoConfig(
        Rule.SIGN_MAJORITY_VOTE, 300, 0.5, delta=0.01, noise=noise, seed=4
    )
    first = render_trace(run(random_quadratic, config))
    assert render_trace(run(random_quadratic, config)) == first
    other = render_trace(run(random_quadratic, attr.evolve(config, seed=5)))
    assert other != first


def test_thread_count_does_not_change_trace(logistic_problem):
    config = AlgoConfig(
        Rule.MEDIAN,
        200,
        0.0,
        delta=0.05,
        noise=NoiseSpec("gaussian", 0.5),
        gradient_mode=GradientMode.MINIBATCH,
        batch_size=8,
        seed=11,
    )
    single = render_trace(run(logistic_problem, config, threads=1))
    assert render_trace(run(logistic_problem, config, threads=4)) == single


def test_noise_is_independent_of_chunking(random_quadratic, monkeypatch):
    noise = NoiseSpec("gaussian", 1.0)
    config = AlgoConfig(Rule.MEDIAN, 100, 0.0, delta=0.05, noise=noise)
    whole = render_trace(run(random_quadratic, config))
    monkeypatch.setattr("mclab.engine.CHUNK_ROUNDS", 7)
    assert render_trace(run(random_quadratic, config)) == whole


def test_noisy_sweep(stall_problem):
    config = AlgoConfig(Rule.MEDIAN, 500, 2.0, delta=1e-2, seed=3)
    traces = run_noisy_sweep(stall_problem, config, [0.0, 1.0, 4.0])
    assert [trace.noise_scale for trace in traces] == [0.0, 1.0, 4.0]
    plain = run(stall_problem, config)
    assert render_trace(traces[0]) == render_trace(plain)
    assert render_trace(traces[1]) != render_trace(plain)
    with pytest.raises(ValueError):
        run_noisy_sweep(stall_problem, config, [])
    with pytest.raises(ValueError):
        run_noisy_sweep(stall_problem, config, [-1.0])


def test_noise_moves_the_fixed_point(stall_problem):
    """With large noise the median update tracks the mean gradient."""
    config = AlgoConfig(Rule.MEDIAN, 20000, 2.0, delta=1e-3, seed=1)
    plain = run(stall_problem, config)
    noisy = run(stall_problem, config.with_noise(NoiseSpec("gaussian", 16.0)))
    assert np.mean(noisy.columns["grad_l2sq"]) < np.mean(plain.columns["grad_l2sq"])


def test_step_schedules(stall_problem):
    T, d = 10**4, 1
    theorem1 = AlgoConfig(Rule.SIGN_MAJORITY_VOTE, T, 0.0, step_size="theorem1")
    # D_f = 2 at x = 0, L = 1
    assert theorem1.resolve_step(stall_problem) == pytest.approx(math.sqrt(2.0 / T))
    theorem2 = AlgoConfig(Rule.MEDIAN, T, 0.0, step_size="theorem2")
    assert theorem2.resolve_step(stall_problem) == pytest.approx(0.01)
    short = AlgoConfig(Rule.MEDIAN, 4, 0.0, step_size="theorem2")
    assert short.resolve_step(stall_problem) == pytest.approx(1.0 / 3.0)
    noisy = AlgoConfig(Rule.MEDIAN, T, 0.0, step_size="noisy_theorem")
    assert noisy.resolve_step(stall_problem) == pytest.approx(1.0 / math.sqrt(T * d))
    appendix = AlgoConfig(Rule.MEDIAN, T, 0.0, step_size="noisy_theorem_appendix")
    assert appendix.resolve_step(stall_problem) == pytest.approx(1e-3)


def test_noise_schedule(stall_problem):
    config = AlgoConfig(
        Rule.MEDIAN,
        10**4,
        0.0,
        delta=1e-2,
        noise=NoiseSpec("gaussian", 1.0),
        noise_schedule=NoiseSchedule.THEOREM,
    )
    assert config.resolve_noise(stall_problem).b == pytest.approx(10.0)
    assert config.with_noise(None).resolve_noise(stall_problem) is None


def test_scalar_start_is_broadcast(random_quadratic):
    config = AlgoConfig(Rule.MEAN, 3, 1.5, delta=0.1)
    assert np.array_equal(config.initial_point(random_quadratic), np.full(4, 1.5))
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEAN, 3, [1.0, 2.0], delta=0.1).initial_point(random_quadratic)


def test_divergence_is_reported():
    problem = QuadraticEnsemble([[1.0], [2.0]])
    with pytest.raises(DivergenceError) as error:
        run(problem, AlgoConfig(Rule.MEAN, 1000, 10.0, delta=3.0))
    assert 1 < error.value.round < 100


def test_invalid_configs(random_quadratic, stall_problem):
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEDIAN, 0, 0.0, delta=0.1)
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEDIAN, 10, 0.0)
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEDIAN, 10, 0.0, delta=-1.0)
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEDIAN, 10, 0.0, delta=0.1, gradient_mode="minibatch")
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEDIAN, 10, 0.0, delta=0.1, noise_schedule="theorem")
    with pytest.raises(ValueError):
        AlgoConfig(Rule.MEDIAN, 10, float("inf"), delta=0.1)
    with pytest.raises(ValueError):
        run(
            stall_problem,
            AlgoConfig(
                Rule.MEDIAN, 10, 0.0, delta=0.1, gradient_mode="minibatch", batch_size=1
            ),
        )
    even = QuadraticEnsemble(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        run(even, AlgoConfig(Rule.SIGN_MAJORITY_VOTE, 10, 0.0, delta=0.1))
