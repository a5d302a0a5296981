"""
Coordinate-wise aggregation rules applied by the server.

Every function takes an M x d array of worker vectors (a 1-D array is read as
M scalars) and returns one d-vector.
"""

import enum

import numpy as np


class Rule(str, enum.Enum):
    MEAN = "mean"
    MEDIAN = "median"
    SIGN_MAJORITY_VOTE = "sign_majority_vote"
    SIGN_OF_MEDIAN = "sign_of_median"

    @property
    def is_sign_based(self) -> bool:
        return self in (Rule.SIGN_MAJORITY_VOTE, Rule.SIGN_OF_MEDIAN)


def _stack(vectors) -> np.ndarray:
    array = np.asarray(vectors, dtype=np.float64)
    if array.ndim == 1:
        array = array[:, None]
    if array.ndim != 2:
        raise ValueError("expected an M x d array of worker vectors")
    if array.shape[0] == 0:
        raise ValueError("cannot aggregate an empty set of vectors")
    return array


def check_worker_count(rule: Rule, n_workers: int) -> None:
    if n_workers < 1:
        raise ValueError("at least one worker is required")
    if Rule(rule).is_sign_based and n_workers % 2 == 0:
        raise ValueError(f"{Rule(rule).value} requires an odd number of workers")


def coordinate_median(vectors) -> np.ndarray:
    """
    Per coordinate, the ((M + 1) // 2)-th smallest value: the median for odd
    M and the lower-middle order statistic for even M.
    """
    array = _stack(vectors)
    k = (array.shape[0] - 1) // 2
    return np.partition(array, k, axis=0)[k]


def mean(vectors) -> np.ndarray:
    return _stack(vectors).mean(axis=0)


def majority_vote_sign(vectors) -> np.ndarray:
    """sign(sum_i sign(g_i)) with sign(0) = 0."""
    array = _stack(vectors)
    check_worker_count(Rule.SIGN_MAJORITY_VOTE, array.shape[0])
    return np.sign(np.sign(array).sum(axis=0))


def sign_of_median(vectors) -> np.ndarray:
    array = _stack(vectors)
    check_worker_count(Rule.SIGN_OF_MEDIAN, array.shape[0])
    return np.sign(coordinate_median(array))


def aggregate(rule: Rule, vectors) -> np.ndarray:
    rule = Rule(rule)
    if rule is Rule.MEAN:
        return mean(vectors)
    if rule is Rule.MEDIAN:
        return coordinate_median(vectors)
    if rule is Rule.SIGN_MAJORITY_VOTE:
        return majority_vote_sign(vectors)
    return sign_of_median(vectors)
