"""
Impurity functionals over additive sufficient statistics.

A node summary is a length-S vector:
  regression      (n, sum_y, sum_y2)                      S = 3
  classification  (n_0, n_1, ..., n_{C-1})                S = C

Everything downstream (client replies, server aggregation, leaf values) works on these
vectors, so the pooled impurity of any node can be computed from per-client summaries
with the same arithmetic as from the pooled rows. The array helpers accept stacks of
summaries (shape (..., S)) for batch evaluation of many candidates at once.
"""
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import entr, rel_entr

from errors import EmptyNodeError, ProtocolInconsistencyError, TaskMismatchError
from models import TaskKind

SUM_Y2_TOLERANCE = 1e-9
PURITY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class SuffStats:
    """Immutable summary of one node (or one client's share of a node)"""
    task: TaskKind
    values: Tuple[float, ...]

    @classmethod
    def zeros(cls, task: TaskKind) -> "SuffStats":
        return cls(task, tuple(0.0 for _ in range(task.width)))

    @classmethod
    def from_array(cls, task: TaskKind, array) -> "SuffStats":
        array = np.asarray(array, dtype=np.float64).reshape(-1)
        if array.shape[0] != task.width:
            raise TaskMismatchError(f"expected {task.width} summary values, got {array.shape[0]}")
        return cls(task, tuple(float(v) for v in array))

    @classmethod
    def from_outcomes(cls, task: TaskKind, y) -> "SuffStats":
        return cls.from_array(task, outcome_rows(task, y).sum(axis=0))

    @property
    def n(self) -> float:
        return self.values[0] if self.task.is_regression else float(sum(self.values))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def validate(self) -> "SuffStats":
        arr = self.as_array()
        if np.any(arr[nonnegative_components(self.task)] < 0):
            raise ValueError(f"negative count in {self.values}")
        if self.task.is_regression:
            n, sum_y, sum_y2 = self.values
            if n * sum_y2 < sum_y * sum_y * (1 - SUM_Y2_TOLERANCE) - SUM_Y2_TOLERANCE:
                raise ValueError(f"n*sum_y2 < sum_y^2 in {self.values}")
        return self

    def __add__(self, other: "SuffStats") -> "SuffStats":
        return add_stats(self, other)

    def __sub__(self, other: "SuffStats") -> "SuffStats":
        return sub_stats(self, other)


# ─── Row encodings ───────────────────────────────────────────────────────────

def outcome_rows(task: TaskKind, y) -> np.ndarray:
    """Per-sample summaries: summing rows of any subset gives that subset's stats"""
    y = np.asarray(y)
    if task.is_regression:
        y = y.astype(np.float64)
        return np.column_stack([np.ones_like(y), y, y * y])
    labels = y.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= task.num_categories):
        raise TaskMismatchError(
            f"labels must lie in 0..{task.num_categories - 1}, got {labels.min()}..{labels.max()}"
        )
    rows = np.zeros((labels.shape[0], task.num_categories), dtype=np.float64)
    rows[np.arange(labels.shape[0]), labels] = 1.0
    return rows


def nonnegative_components(task: TaskKind) -> np.ndarray:
    if task.is_regression:
        return np.array([0, 2])
    return np.arange(task.width)


def counts_of(task: TaskKind, stats: np.ndarray) -> np.ndarray:
    stats = np.asarray(stats, dtype=np.float64)
    return stats[..., 0] if task.is_regression else stats.sum(axis=-1)


# ─── Impurity ────────────────────────────────────────────────────────────────

def _check_kind(task: TaskKind, impurity: str) -> None:
    try:
        task.check_impurity(impurity)
    except ValueError as exc:
        raise TaskMismatchError(str(exc)) from exc


def psi_array(task: TaskKind, stats: np.ndarray, impurity: str, clamp: bool = True) -> np.ndarray:
    """Impurity of each summary in a stack; NaN where the summary is empty"""
    _check_kind(task, impurity)
    stats = np.asarray(stats, dtype=np.float64)
    n = counts_of(task, stats)
    with np.errstate(divide="ignore", invalid="ignore"):
        if impurity == "variance":
            mean = stats[..., 1] / n
            value = stats[..., 2] / n - mean * mean
        else:
            p = stats / n[..., None]
            if impurity == "gini":
                value = 1.0 - np.sum(p * p, axis=-1)
            else:
                value = np.sum(entr(p), axis=-1)
    if clamp:
        value = np.maximum(value, 0.0)
    return np.where(n > 0, value, np.nan)


def psi(stats: SuffStats, impurity: str, clamp: bool = True) -> float:
    if stats.n <= 0:
        raise EmptyNodeError("impurity of an empty node")
    return float(psi_array(stats.task, stats.as_array(), impurity, clamp=clamp))


def gain_array(task: TaskKind, parent, left, impurity: str) -> np.ndarray:
    """Impurity reductions for a stack of left-child summaries; NaN when a child is empty"""
    parent = np.asarray(parent, dtype=np.float64)
    left = np.atleast_2d(np.asarray(left, dtype=np.float64))
    right = parent[None, :] - left
    n = counts_of(task, parent)
    n_left = counts_of(task, left)
    n_right = counts_of(task, right)
    psi_parent = psi_array(task, parent, impurity)
    psi_left = psi_array(task, left, impurity)
    psi_right = psi_array(task, right, impurity)
    with np.errstate(invalid="ignore"):
        gains = psi_parent - (n_left / n) * psi_left - (n_right / n) * psi_right
    scoreable = (n_left >= 0.5) & (n_right >= 0.5)
    return np.where(scoreable, gains, np.nan)


def gain_from_stats(parent: SuffStats, left: SuffStats, impurity: str) -> Optional[float]:
    """Pooled impurity reduction, or None if the split leaves a child empty"""
    _same_task(parent, left)
    gain = gain_array(parent.task, parent.as_array(), left.as_array(), impurity)[0]
    return None if np.isnan(gain) else float(gain)


# ─── Arithmetic ──────────────────────────────────────────────────────────────

def _same_task(a: SuffStats, b: SuffStats) -> None:
    if a.task != b.task:
        raise TaskMismatchError(f"cannot combine {a.task} with {b.task}")


def add_stats(a: SuffStats, b: SuffStats) -> SuffStats:
    _same_task(a, b)
    return SuffStats(a.task, tuple(x + y for x, y in zip(a.values, b.values)))


def sum_stats(task: TaskKind, stats: Iterable[SuffStats]) -> SuffStats:
    total = SuffStats.zeros(task)
    for item in stats:
        total = add_stats(total, item)
    return total


def check_within(task: TaskKind, part: np.ndarray, whole: np.ndarray) -> bool:
    """True when every non-negative component of `part` fits inside `whole`"""
    part = np.atleast_2d(np.asarray(part, dtype=np.float64))
    whole = np.asarray(whole, dtype=np.float64)
    residual = whole[None, :] - part
    idx = nonnegative_components(task)
    slack = np.zeros(task.width)
    if task.is_regression:
        slack[2] = SUM_Y2_TOLERANCE * max(1.0, abs(whole[2]))
    return bool(np.all(residual[:, idx] >= -slack[idx]) and np.all(part[:, idx] >= -slack[idx]))


def sub_stats(a: SuffStats, b: SuffStats) -> SuffStats:
    _same_task(a, b)
    if not check_within(a.task, b.as_array(), a.as_array()):
        raise ProtocolInconsistencyError(f"subtracting {b.values} from {a.values} leaves a negative count")
    return SuffStats(a.task, tuple(x - y for x, y in zip(a.values, b.values)))


# ─── Heterogeneity gap ───────────────────────────────────────────────────────

def _nonempty(per_client: Sequence[SuffStats]):
    kept = [s for s in per_client if s.n > 0]
    if not kept:
        raise EmptyNodeError("heterogeneity gap of empty clients")
    return kept


def hetero_gap(per_client: Sequence[SuffStats], impurity: str, clamp: bool = False) -> float:
    """Pooled impurity minus the size-weighted local impurities"""
    kept = _nonempty(per_client)
    task = kept[0].task
    stack = np.stack([s.as_array() for s in kept])
    pooled = stack.sum(axis=0)
    weights = counts_of(task, stack) / counts_of(task, pooled)
    local = psi_array(task, stack, impurity, clamp=False)
    gap = float(psi_array(task, pooled, impurity, clamp=False) - np.dot(weights, local))
    return max(gap, 0.0) if clamp else gap


def hetero_gap_explicit(per_client: Sequence[SuffStats], impurity: str) -> float:
    """Closed forms of the gap: spread of client means, or of class-proportion vectors"""
    kept = _nonempty(per_client)
    task = kept[0].task
    _check_kind(task, impurity)
    stack = np.stack([s.as_array() for s in kept])
    n_k = counts_of(task, stack)
    weights = n_k / n_k.sum()
    if impurity == "variance":
        means = stack[:, 1] / n_k
        pooled_mean = stack[:, 1].sum() / n_k.sum()
        return float(np.dot(weights, (means - pooled_mean) ** 2))
    p_k = stack / n_k[:, None]
    p = stack.sum(axis=0) / n_k.sum()
    if impurity == "gini":
        return float(np.dot(weights, np.sum((p_k - p) ** 2, axis=1)))
    return float(np.dot(weights, np.sum(rel_entr(p_k, p), axis=1)))


# ─── Leaves ──────────────────────────────────────────────────────────────────

def leaf_value(stats: SuffStats) -> Union[float, int]:
    if stats.n <= 0:
        raise EmptyNodeError("leaf value of an empty node")
    if stats.task.is_regression:
        return stats.values[1] / stats.values[0]
    return int(np.argmax(stats.as_array()))


def is_pure(task: TaskKind, stats: np.ndarray) -> bool:
    stats = np.asarray(stats, dtype=np.float64)
    if task.is_regression:
        n, sum_y, sum_y2 = stats
        if n <= 0:
            return True
        variance = sum_y2 / n - (sum_y / n) ** 2
        return variance <= PURITY_TOLERANCE * max(1.0, sum_y2 / n)
    return int(np.count_nonzero(stats)) <= 1
