"""
Client side of the federated protocol.

A client owns one shard (X_k, y_k) and never lets a row leave it. It keeps, per tree, its
bootstrap multiset and the rows that sit at every open node, applies the split decisions
the server broadcasts, and answers requests with summaries only.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from errors import DataError
from federation import stratified_bootstrap
from impurity import SuffStats, counts_of, gain_array, outcome_rows
from models import (
    CategorySummary,
    EvalReply,
    EvalRequest,
    FeatureSketch,
    InitReply,
    InitRequest,
    ShortlistEntry,
    ShortlistReply,
    ShortlistRequest,
    SketchReply,
    SketchRequest,
    SplitBroadcast,
    TaskEval,
    TaskKind,
    TaskShortlist,
    TaskSketch,
)
from sketch import build_sketch
from split_engine import SplitCandidate, fisher_order, left_stats_at, local_best_gains, shortlist_report

logger = logging.getLogger(__name__)


@dataclass
class ClientShard:
    """One site's private data plus its per-tree bookkeeping"""
    client_id: int
    features: np.ndarray
    outcomes: np.ndarray
    bootstrap: Dict[int, np.ndarray] = field(default_factory=dict)
    membership: Dict[Tuple[int, str], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.outcomes = np.asarray(self.outcomes)
        if self.features.ndim != 2:
            raise DataError(f"client {self.client_id}: features must be a 2-d array")
        if self.features.shape[0] != self.outcomes.shape[0]:
            raise DataError(
                f"client {self.client_id}: {self.features.shape[0]} feature rows but "
                f"{self.outcomes.shape[0]} outcomes"
            )
        if self.features.shape[0] == 0:
            raise DataError(f"client {self.client_id} holds no samples")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"client {self.client_id}: non-finite feature value")

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])


class FederatedClient:
    """Answers init, sketch, shortlist and evaluation requests for one shard"""

    def __init__(self, shard: ClientShard):
        self.shard = shard
        self.client_id = shard.client_id
        self.task: TaskKind = TaskKind.regression()
        self._rows = None

    # ─── Bookkeeping ─────────────────────────────────────────────────────────

    def _apply(self, decisions: List[SplitBroadcast]) -> None:
        for decision in decisions:
            key = (decision.tree_id, decision.path)
            rows = self.shard.membership.pop(key, None)
            if rows is None:
                continue
            split = SplitCandidate.from_spec(decision.split)
            left = split.goes_left(self.shard.features[rows], site=self.client_id)
            self.shard.membership[(decision.tree_id, decision.path + "L")] = rows[left]
            self.shard.membership[(decision.tree_id, decision.path + "R")] = rows[~left]

    def _members(self, tree_id: int, path: str):
        rows = self.shard.membership.get((tree_id, path))
        if rows is None or rows.size == 0:
            return None
        return rows

    def node_rows(self, tree_id: int, path: str) -> np.ndarray:
        """Row indices (with bootstrap multiplicity) sitting at a node"""
        rows = self.shard.membership.get((tree_id, path))
        return np.zeros(0, dtype=np.int64) if rows is None else rows

    # ─── Handlers ────────────────────────────────────────────────────────────

    def handle_init(self, request: InitRequest) -> InitReply:
        self.task = request.task
        self._rows = outcome_rows(self.task, self.shard.outcomes)
        if request.bootstrap:
            self.shard.bootstrap = stratified_bootstrap(
                self.shard.n_rows, request.tree_ids, request.seed, self.client_id
            )
        else:
            everything = np.arange(self.shard.n_rows)
            self.shard.bootstrap = {t: everything for t in request.tree_ids}
        self.shard.membership = {(t, ""): rows for t, rows in self.shard.bootstrap.items()}
        ranges = []
        if request.want_ranges:
            X = self.shard.features
            ranges = [[float(lo), float(hi)] for lo, hi in zip(X.min(axis=0), X.max(axis=0))]
        logger.debug("client %s initialised %d trees", self.client_id, len(request.tree_ids))
        return InitReply(
            client_id=self.client_id,
            n_rows=self.shard.n_rows,
            n_features=self.shard.n_features,
            ranges=ranges,
        )

    def handle_sketch(self, request: SketchRequest) -> SketchReply:
        self._apply(request.decisions)
        categorical = set(request.categorical_features)
        out = []
        for task in request.tasks:
            rows = self._members(task.tree_id, task.path)
            if rows is None:
                continue
            X = self.shard.features[rows]
            y_rows = self._rows[rows]
            features = []
            for j in task.features:
                column = X[:, j]
                if j in categorical:
                    codes = column.astype(np.int64)
                    features.append(FeatureSketch(
                        feature=j,
                        categories=[
                            CategorySummary(category=int(c), stats=y_rows[codes == c].sum(axis=0).tolist())
                            for c in np.unique(codes)
                        ],
                    ))
                elif request.send_values:
                    features.append(FeatureSketch(feature=j, values=np.unique(column).tolist()))
                else:
                    sketch = build_sketch(column, request.sketch_size, request.quantile_rule)
                    features.append(FeatureSketch(feature=j, breakpoints=list(sketch.breakpoints)))
            out.append(TaskSketch(
                tree_id=task.tree_id,
                path=task.path,
                node_stats=y_rows.sum(axis=0).tolist() if request.include_node_stats else [],
                features=features,
            ))
        return SketchReply(client_id=self.client_id, tasks=out)

    def handle_shortlist(self, request: ShortlistRequest) -> ShortlistReply:
        self._apply(request.decisions)
        categorical = set(request.categorical_features)
        out = []
        for task in request.tasks:
            rows = self._members(task.tree_id, task.path)
            if rows is None:
                continue
            X = self.shard.features[rows]
            y_rows = self._rows[rows]
            numeric = [j for j in task.features if j not in categorical]
            best = local_best_gains(self.task, X, y_rows, numeric, request.impurity)
            for j in task.features:
                if j in categorical:
                    best[j] = self._best_categorical_gain(X[:, j], y_rows, request.impurity)
            report = shortlist_report(self.client_id, best, min(request.shortlist_size, len(task.features)))
            out.append(TaskShortlist(
                tree_id=task.tree_id,
                path=task.path,
                node_stats=y_rows.sum(axis=0).tolist(),
                entries=[ShortlistEntry(feature=j, gain=g) for j, g in report.entries],
            ))
        return ShortlistReply(client_id=self.client_id, tasks=out)

    def _best_categorical_gain(self, column: np.ndarray, y_rows: np.ndarray, impurity: str) -> float:
        codes = column.astype(np.int64)
        per_category = {
            int(c): SuffStats.from_array(self.task, y_rows[codes == c].sum(axis=0)) for c in np.unique(codes)
        }
        order = fisher_order(per_category)
        if len(order) < 2:
            return 0.0
        prefix = np.cumsum(np.stack([per_category[c].as_array() for c in order[:-1]]), axis=0)
        gains = gain_array(self.task, y_rows.sum(axis=0), prefix, impurity)
        gains = gains[~np.isnan(gains)]
        return max(0.0, float(gains.max())) if gains.size else 0.0

    def handle_eval(self, request: EvalRequest) -> EvalReply:
        self._apply(request.decisions)
        out = []
        for batch in request.batches:
            rows = self._members(batch.tree_id, batch.path)
            if rows is None:
                continue
            X = self.shard.features[rows]
            y_rows = self._rows[rows]
            features = np.asarray(batch.features, dtype=np.int64)
            thresholds = np.asarray(batch.thresholds, dtype=np.float64)
            left = np.zeros((features.size, self.task.width))
            for j in np.unique(features):
                selected = features == j
                left[selected] = left_stats_at(X[:, j], y_rows, thresholds[selected])
            node = y_rows.sum(axis=0)
            reply = TaskEval(tree_id=batch.tree_id, path=batch.path)
            if request.include_node_stats:
                reply.node_stats = node.tolist()
            if request.reply == "left_stats":
                reply.left_stats = left.tolist()
            else:
                reply.left_counts = [int(round(c)) for c in counts_of(self.task, left)]
                if request.reply == "local_gain":
                    gains = gain_array(self.task, node, left, request.impurity) if features.size else np.zeros(0)
                    reply.local_gains = np.where(np.isnan(gains), 0.0, np.maximum(gains, 0.0)).tolist()
            out.append(reply)
        return EvalReply(client_id=self.client_id, tasks=out)
