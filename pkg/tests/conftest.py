import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mclab.objective import QuadraticEnsemble, make_logistic_ensemble


@pytest.fixture
def sha256sum():
    def _sha256sum(file_path: Path) -> str:
        sha = hashlib.sha256()
        with file_path.open("rb") as f:
            while True:
                block = f.read(1 << 16)
                if not block:
                    break
                sha.update(block)
        return sha.hexdigest()

    return _sha256sum


@pytest.fixture
def stall_problem():
    """a = (0, 1, 5) in one dimension."""
    return QuadraticEnsemble([[0.0], [1.0], [5.0]])


@pytest.fixture
def plateau_problem():
    """a = (1, 2, 10) in one dimension."""
    return QuadraticEnsemble([[1.0], [2.0], [10.0]])


@pytest.fixture
def random_quadratic():
    rng = np.random.default_rng(7)
    return QuadraticEnsemble(3.0 * rng.standard_normal((5, 4)))


@pytest.fixture(scope="module")
def logistic_problem():
    return make_logistic_ensemble(
        n_workers=5, dim=6, samples_per_worker=40, n_classes=6, reg=0.05, seed=2
    )


@pytest.fixture
def write_config(tmp_path):
    def _write(config: dict, name: str = "config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(config, indent=2))
        return path

    return _write
