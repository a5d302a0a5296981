"""
Run directories and the files written into them.

Every command invocation gets a new timestamped directory; existing
directories are never written to again.
"""

import csv
import io
import json
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from mclab import logger as logging
from mclab.context import ExperimentConfig, to_dict
from mclab.engine import TRACE_COLUMNS, RunTrace
from mclab.metrics import GapReport
from mclab.utils import format_float

logger = logging.getLogger(__name__)

GAP_COLUMNS = ("t", "gap_l1", "gap_l2sq", "sigma_m", "w_size")
SWEEP_COLUMNS = (
    "b",
    "seed",
    "avg_grad_l1",
    "avg_grad_l2sq",
    "mixed",
    "final_mean_grad_l1",
    "final_mean_grad_l2sq",
)
MEDIANLAB_COLUMNS = (
    "family",
    "n",
    "u_spread",
    "b",
    "gap",
    "variance",
    "asym_mass",
    "method",
    "error_estimate",
)


def create_run_directory(root: Path, name: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"{stamp}-{name}"
    suffix = 1
    while path.exists():
        path = root / f"{stamp}-{name}-{suffix}"
        suffix += 1
    path.mkdir()
    logger.info(f"writing results to {path}")
    return path


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def render_csv(columns: Sequence[str], rows: Iterable[dict]) -> str:
    """Comma-separated text with a header row, floats at 17 significant digits."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({name: _cell(row.get(name)) for name in columns})
    return buffer.getvalue()


def render_trace(trace: RunTrace) -> str:
    return render_csv(TRACE_COLUMNS, trace.rows())


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> Path:
    path.write_text(render_csv(columns, rows))
    return path


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def write_json(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data, indent=2, default=_json_default) + "\n")
    return path


def write_config(directory: Path, config: ExperimentConfig) -> Path:
    return write_json(directory / "config.json", to_dict(config))


def write_trace(directory: Path, trace: RunTrace, name: str = "trace.csv") -> Path:
    path = directory / name
    path.write_text(render_trace(trace))
    return path


def write_gaps(directory: Path, report: GapReport, name: str = "gaps.csv") -> Path:
    return write_csv(directory / name, GAP_COLUMNS, report.rows())
