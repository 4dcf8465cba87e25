"""
Split candidates, their evaluation and the choice of the best split.

Numeric splits send x <= t to the left child. Client-set (H) and categorical splits send
the listed sites/categories left. Ties between equal gains are broken by
(feature index, threshold, kind, left set); H splits sort after every feature.
"""
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import ProtocolInconsistencyError
from impurity import SuffStats, check_within, counts_of, gain_array
from models import SplitSpec, TaskKind

KIND_RANK = {"numeric": 0, "categorical": 1, "client_set": 2}
DENSE_CHUNK = 2_000_000


# ─── Types ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SplitCandidate:
    kind: str
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left_set: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind == "numeric":
            if self.feature is None or self.threshold is None or not math.isfinite(self.threshold):
                raise ValueError("numeric split needs a feature and a finite threshold")
        elif self.kind in ("categorical", "client_set"):
            if not self.left_set:
                raise ValueError(f"{self.kind} split needs a non-empty left set")
            if self.kind == "categorical" and self.feature is None:
                raise ValueError("categorical split needs a feature")
        else:
            raise ValueError(f"unknown split kind '{self.kind}'")

    @classmethod
    def numeric(cls, feature: int, threshold: float) -> "SplitCandidate":
        return cls("numeric", int(feature), float(threshold))

    @classmethod
    def categorical(cls, feature: int, left: Iterable[int]) -> "SplitCandidate":
        return cls("categorical", int(feature), None, tuple(sorted(int(c) for c in left)))

    @classmethod
    def client_set(cls, left: Iterable[int]) -> "SplitCandidate":
        return cls("client_set", None, None, tuple(sorted(int(k) for k in left)))

    def sort_key(self):
        feature = math.inf if self.feature is None else self.feature
        threshold = self.threshold if self.kind == "numeric" else math.inf
        return (feature, threshold, KIND_RANK[self.kind], self.left_set)

    def goes_left(self, X: np.ndarray, site: Optional[int] = None) -> np.ndarray:
        """Left-child mask for the rows of X (all from one site when client_set)"""
        if self.kind == "numeric":
            return X[:, self.feature] <= self.threshold
        if self.kind == "categorical":
            return np.isin(X[:, self.feature].astype(np.int64), self.left_set)
        return np.full(X.shape[0], site in self.left_set, dtype=bool)

    def to_spec(self) -> SplitSpec:
        return SplitSpec(
            kind=self.kind, feature=self.feature, threshold=self.threshold, left_set=list(self.left_set)
        )

    @classmethod
    def from_spec(cls, spec: SplitSpec) -> "SplitCandidate":
        return cls(spec.kind, spec.feature, spec.threshold, tuple(spec.left_set))


@dataclass(frozen=True)
class SplitDecision:
    """A scored candidate; child stats are None when only child counts are known"""
    candidate: SplitCandidate
    gain: float
    left_count: float
    right_count: float
    left_stats: Optional[SuffStats] = None
    right_stats: Optional[SuffStats] = None


@dataclass(frozen=True)
class FeatureShortlistReport:
    client_id: int
    entries: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        gains = [g for _, g in self.entries]
        if any(g < 0 for g in gains):
            raise ValueError("shortlist gains must be non-negative")
        if any(a < b for a, b in zip(gains, gains[1:])):
            raise ValueError("shortlist entries must be sorted by descending gain")


# ─── Fisher grouping ─────────────────────────────────────────────────────────

def fisher_order(per_key: Mapping[int, SuffStats]) -> List[int]:
    """Non-empty keys sorted by mean outcome (or class proportion), ties by key"""
    active = {k: s for k, s in per_key.items() if s.n > 0}
    if not active:
        return []
    task = next(iter(active.values())).task
    if task.is_regression:
        score = {k: s.values[1] / s.values[0] for k, s in active.items()}
    else:
        if task.num_categories == 2:
            target = 1
        else:
            pooled = np.sum([s.as_array() for s in active.values()], axis=0)
            target = int(np.argmax(pooled))
        score = {k: s.values[target] / s.n for k, s in active.items()}
    return sorted(active, key=lambda k: (score[k], k))


def prefix_left_stats(order: Sequence[int], per_key: Mapping[int, SuffStats]) -> np.ndarray:
    """Left summaries of the contiguous prefixes order[:1], ..., order[:m-1]"""
    rows = []
    running = None
    for key in order[:-1]:
        arr = per_key[key].as_array()
        running = arr.copy() if running is None else running + arr
        rows.append(running.copy())
    if not rows:
        width = next(iter(per_key.values())).task.width if per_key else 0
        return np.zeros((0, width))
    return np.stack(rows)


def generate_h_splits(per_site: Mapping[int, SuffStats]) -> List[SplitCandidate]:
    order = fisher_order(per_site)
    if len(order) < 2:
        return []
    return [SplitCandidate.client_set(order[:i]) for i in range(1, len(order))]


def fisher_order_categories(
    feature: int, per_category: Mapping[int, SuffStats]
) -> Tuple[List[int], List[SplitCandidate]]:
    order = fisher_order(per_category)
    if len(order) < 2:
        return order, []
    return order, [SplitCandidate.categorical(feature, order[:i]) for i in range(1, len(order))]


# ─── Numeric candidates on raw values ────────────────────────────────────────

def exact_midpoints(values) -> np.ndarray:
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    if distinct.size < 2:
        return np.zeros(0)
    return (distinct[:-1] + distinct[1:]) / 2.0


def left_stats_at(values: np.ndarray, rows: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Summaries of {x <= t} for every threshold; equal masks give bit-equal sums"""
    values = np.asarray(values, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    width = rows.shape[1]
    out = np.zeros((thresholds.size, width))
    if thresholds.size == 0 or values.size == 0:
        return out
    step = max(1, DENSE_CHUNK // max(1, values.size * width))
    for start in range(0, thresholds.size, step):
        t = thresholds[start:start + step]
        mask = (values[:, None] <= t[None, :]).astype(np.float64)
        out[start:start + step] = (mask[:, :, None] * rows[:, None, :]).sum(axis=0)
    return out


def scan_midpoints(values: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """All midpoint thresholds of a feature with their left summaries via a sorted prefix scan"""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ordered = values[order]
    cumulative = np.cumsum(rows[order], axis=0)
    cut = np.nonzero(ordered[1:] > ordered[:-1])[0]
    thresholds = (ordered[cut] + ordered[cut + 1]) / 2.0
    return thresholds, cumulative[cut]


def local_best_gains(
    task: TaskKind, X: np.ndarray, rows: np.ndarray, features: Sequence[int], impurity: str
) -> Dict[int, float]:
    """Best local impurity reduction of each feature over its own midpoints (0 if none)"""
    parent = rows.sum(axis=0)
    best = {}
    for j in features:
        _, left = scan_midpoints(X[:, j], rows)
        gains = gain_array(task, parent, left, impurity) if left.shape[0] else np.zeros(0)
        gains = gains[~np.isnan(gains)]
        best[int(j)] = max(0.0, float(gains.max())) if gains.size else 0.0
    return best


def shortlist_report(client_id: int, best: Mapping[int, float], size: int) -> FeatureShortlistReport:
    ranked = sorted(best.items(), key=lambda item: (-item[1], item[0]))[:size]
    return FeatureShortlistReport(client_id, tuple((j, g) for j, g in ranked))


# ─── Evaluation ──────────────────────────────────────────────────────────────

def evaluate_exact(
    parent: SuffStats,
    left_per_client: Mapping[int, SuffStats],
    impurity: str,
) -> Tuple[Optional[float], SuffStats, SuffStats]:
    """Gain of one candidate from per-client left summaries"""
    task = parent.task
    left = np.zeros(task.width)
    for client_id in sorted(left_per_client):
        left = left + left_per_client[client_id].as_array()
    if not check_within(task, left, parent.as_array()):
        raise ProtocolInconsistencyError("aggregated left child exceeds its parent")
    left_stats = SuffStats.from_array(task, left)
    right_stats = SuffStats.from_array(task, parent.as_array() - left)
    gain = gain_array(task, parent.as_array(), left, impurity)[0]
    return (None if np.isnan(gain) else float(gain)), left_stats, right_stats


def evaluate_avgimp(local_gains: Mapping[int, float], node_counts: Mapping[int, float]) -> Optional[float]:
    """Size-weighted mean of the local gains of the reporting clients"""
    reporting = [k for k in sorted(local_gains) if node_counts.get(k, 0) > 0]
    if not reporting:
        return None
    total = float(sum(node_counts[k] for k in node_counts if node_counts[k] > 0))
    return float(sum(node_counts[k] / total * local_gains[k] for k in reporting))


def top_l_shortlist(reports: Iterable[FeatureShortlistReport]) -> List[int]:
    features = set()
    for report in reports:
        features.update(j for j, gain in report.entries if gain > 0)
    return sorted(features)


def select_best(
    scored: Iterable[SplitDecision], min_leaf: int, min_impurity_decrease: float = 0.0
) -> Optional[SplitDecision]:
    survivors = [
        d for d in scored
        if d.gain is not None
        and not math.isnan(d.gain)
        and d.gain > min_impurity_decrease
        and d.left_count >= min_leaf
        and d.right_count >= min_leaf
    ]
    if not survivors:
        return None
    return min(survivors, key=lambda d: (-d.gain, d.candidate.sort_key()))


def decisions_from_arrays(
    task: TaskKind,
    candidates: Sequence[SplitCandidate],
    parent: np.ndarray,
    left: np.ndarray,
    gains: np.ndarray,
) -> List[SplitDecision]:
    """Scoreable candidates as decisions carrying both child summaries"""
    out = []
    n_left = counts_of(task, left)
    n_parent = counts_of(task, parent)
    for i, candidate in enumerate(candidates):
        if np.isnan(gains[i]):
            continue
        out.append(SplitDecision(
            candidate=candidate,
            gain=float(gains[i]),
            left_count=float(n_left[i]),
            right_count=float(n_parent - n_left[i]),
            left_stats=SuffStats.from_array(task, left[i]),
            right_stats=SuffStats.from_array(task, parent - left[i]),
        ))
    return out


# ─── Set-valued candidates ───────────────────────────────────────────────────

@dataclass(frozen=True)
class SetCandidate:
    """Categorical or client-set candidate with each client's share of its left child"""
    candidate: SplitCandidate
    known: Tuple[int, ...]
    lefts: Dict[int, np.ndarray]

    def pooled_left(self, width: int) -> np.ndarray:
        left = np.zeros(width)
        for client_id in sorted(self.lefts):
            left = left + self.lefts[client_id]
        return left


def set_candidates(
    task: TaskKind,
    category_stats: Mapping[int, Mapping[int, Mapping[int, np.ndarray]]],
    site_stats: Mapping[int, SuffStats],
    include_h: bool,
) -> List[SetCandidate]:
    """Fisher-prefix candidates of categorical features (feature -> client -> category -> stats),
    then client-set candidates over the sites present at the node"""
    out = []
    zero = np.zeros(task.width)
    for feature in sorted(category_stats):
        local = category_stats[feature]
        pooled: Dict[int, np.ndarray] = {}
        for client_id in sorted(local):
            for category, arr in local[client_id].items():
                pooled[category] = pooled.get(category, zero) + arr
        order, candidates = fisher_order_categories(
            feature, {c: SuffStats.from_array(task, v) for c, v in pooled.items()}
        )
        for candidate in candidates:
            lefts = {}
            for client_id, cats in local.items():
                left = zero
                for c in candidate.left_set:
                    if c in cats:
                        left = left + cats[c]
                lefts[client_id] = left
            out.append(SetCandidate(candidate, tuple(sorted(order)), lefts))
    if include_h:
        present = tuple(sorted(k for k, s in site_stats.items() if s.n > 0))
        for candidate in generate_h_splits(site_stats):
            lefts = {
                client_id: (s.as_array() if client_id in candidate.left_set else zero)
                for client_id, s in site_stats.items()
            }
            out.append(SetCandidate(candidate, present, lefts))
    return out
