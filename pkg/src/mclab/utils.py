import hashlib
import os
from typing import Optional

import numpy as np

THREADS_ENV = "MCL_THREADS"


def resolve_threads(threads: Optional[int] = None) -> int:
    """
    Number of threads available to worker simulation and Monte Carlo batches.
    Explicit value first, then ``MCL_THREADS``, then every core.
    """
    if threads is None:
        value = os.environ.get(THREADS_ENV)
        threads = int(value) if value else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def digest(x: np.ndarray) -> str:
    """Short stable fingerprint of an iterate."""
    data = np.ascontiguousarray(x, dtype=np.float64).tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def format_float(value) -> str:
    # 17 significant digits round-trip any double
    return f"{float(value):.17g}"
