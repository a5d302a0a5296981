import io

import numpy as np
import pytest
from rich.console import Console

from mclab import aggregate
from mclab.verify import (
    CRITERIA,
    CriterionResult,
    check_asymmetry_rate,
    check_bit_accounting,
    check_bound_audit,
    check_cross_validation,
    check_determinism,
    check_fixed_point,
    check_gap_rate,
    check_gradients,
    check_majority_vote,
    check_noisy_improvement,
    check_plateau,
    check_variance_rate,
    print_table,
    run_criteria,
)


def test_criteria_names():
    assert len(CRITERIA) == 12
    assert list(CRITERIA)[0] == "majority_vote"


@pytest.mark.parametrize(
    "check",
    [
        lambda: check_majority_vote(instances=2000),
        lambda: check_fixed_point(rounds=5000),
        check_gap_rate,
        check_variance_rate,
        check_bit_accounting,
        lambda: check_determinism(rounds=50),
        lambda: check_gradients(points=10),
    ],
)
def test_fast_criteria_pass(check):
    result = check()
    assert result.passed, result.detail


@pytest.mark.parametrize(
    "check",
    [
        check_plateau,
        check_asymmetry_rate,
        lambda: check_cross_validation(queries=3, mc_samples=2 * 10**5, threads=2),
        lambda: check_noisy_improvement(rounds=20000, seeds=2),
        lambda: check_bound_audit(instances=2, rounds=2000),
    ],
)
def test_reduced_criteria_pass(check):
    result = check()
    assert result.passed, result.detail


def _mean(vectors):
    return np.mean(np.asarray(vectors, dtype=np.float64), axis=0)


def test_majority_vote_detects_a_wrong_median(monkeypatch):
    monkeypatch.setattr(aggregate, "coordinate_median", _mean)
    result = check_majority_vote(instances=2000)
    assert not result.passed
    assert not result.detail.startswith("0 mismatches")


def test_fixed_point_detects_a_wrong_median(monkeypatch):
    monkeypatch.setattr(aggregate, "coordinate_median", _mean)
    result = check_fixed_point(rounds=5000)
    assert not result.passed
    assert "medianSGD" in result.detail


def test_run_criteria():
    (result,) = run_criteria(["bit_accounting"])
    assert result.name == "bit_accounting"
    assert result.passed
    assert result.elapsed >= 0.0
    with pytest.raises(ValueError, match="nonsense"):
        run_criteria(["bit_accounting", "nonsense"])


def test_criterion_result_to_dict():
    result = CriterionResult("gradients", True, "fine", 1.5)
    assert result.to_dict() == {
        "name": "gradients",
        "passed": True,
        "detail": "fine",
        "elapsed": 1.5,
    }


def test_print_table():
    buffer = io.StringIO()
    console = Console(file=buffer, width=120, color_system=None)
    print_table(
        [
            CriterionResult("bit_accounting", True, "ok", 0.25),
            CriterionResult("gap_rate", False, "slope -0.5", 1.0),
        ],
        console,
    )
    text = buffer.getvalue()
    assert "bit_accounting" in text and "pass" in text
    assert "gap_rate" in text and "FAIL" in text
