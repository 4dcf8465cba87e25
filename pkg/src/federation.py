"""
Server side of the federated protocol.

One call to ``FederationServer.run_level`` grows every tree of the forest by one depth
level: the server broadcasts the pending decisions together with the new node tasks,
collects per-client summaries, builds candidates, collects left-child summaries (or local
gains) and picks a split per node. Messages are pydantic models; by default each one is
serialized to JSON and parsed back on the receiving side, so nothing outside the message
schema can cross between server and clients.

Every scalar that crosses the boundary is recorded in a ``CommLedger`` keyed by
(tree, node path, phase, client).
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from errors import EmptyNodeError, ProtocolInconsistencyError
from impurity import SuffStats, check_within, counts_of, gain_array, is_pure
from models import (
    CandidateBatch,
    EvalReply,
    EvalRequest,
    ForestConfig,
    InitReply,
    InitRequest,
    LedgerRow,
    LedgerSummary,
    NodeTaskSpec,
    ShortlistReply,
    ShortlistRequest,
    SketchReply,
    SketchRequest,
    SplitBroadcast,
    TaskEval,
    TaskKind,
)
from seeding import rng_for
from sketch import QuantileSketch, candidate_thresholds, pool_sketches
from split_engine import (
    FeatureShortlistReport,
    SetCandidate,
    SplitCandidate,
    SplitDecision,
    decisions_from_arrays,
    evaluate_avgimp,
    exact_midpoints,
    select_best,
    set_candidates,
    top_l_shortlist,
)

logger = logging.getLogger(__name__)

NodeKey = Tuple[int, str]


# ─── Seed schedule ───────────────────────────────────────────────────────────

def stratified_bootstrap(n_rows: int, tree_ids: Iterable[int], seed: int, client_id: int) -> Dict[int, np.ndarray]:
    """Per-tree sorted multiset of n_rows draws with replacement from range(n_rows)"""
    if n_rows < 1:
        raise EmptyNodeError(f"client {client_id} has no rows to bootstrap")
    out = {}
    for tree_id in tree_ids:
        rng = rng_for(seed, "bootstrap", int(tree_id), int(client_id))
        out[int(tree_id)] = np.sort(rng.integers(0, n_rows, size=n_rows))
    return out


def subsample_clients(clients: Union[int, Sequence[int]], ratio: float, seed: int, tree_id: int) -> List[int]:
    """Uniform without-replacement subset of ceil(ratio*K) clients for one tree"""
    ids = list(range(clients)) if isinstance(clients, int) else sorted(int(c) for c in clients)
    if not 0.0 < ratio <= 1.0:
        raise ValueError("client subsample ratio must lie in (0, 1]")
    size = math.ceil(ratio * len(ids))
    if size >= len(ids):
        return ids
    rng = rng_for(seed, "clients", int(tree_id))
    picked = rng.choice(len(ids), size=size, replace=False)
    return sorted(ids[i] for i in picked)


def feature_subset(num_features: int, mtry: int, seed: int, tree_id: int, path: str) -> List[int]:
    if mtry >= num_features:
        return list(range(num_features))
    rng = rng_for(seed, "features", int(tree_id), path)
    return sorted(int(j) for j in rng.choice(num_features, size=mtry, replace=False))


# ─── Ledger ──────────────────────────────────────────────────────────────────

class CommLedger:
    """Exact count of transmitted scalars, per node, phase and client"""

    def __init__(self):
        self.rows: Dict[Tuple[int, str, str, int], LedgerRow] = {}
        self.scalars_up = 0
        self.scalars_down = 0
        self.rounds = 0
        self.per_phase: Dict[str, Dict[str, int]] = defaultdict(lambda: {"up": 0, "down": 0, "rounds": 0})

    def new_round(self, phase: str) -> None:
        self.rounds += 1
        self.per_phase[phase]["rounds"] += 1

    def record(
        self,
        tree_id: int,
        path: str,
        phase: str,
        client_id: int,
        up: int = 0,
        down: int = 0,
        features: int = 0,
        candidates: int = 0,
    ) -> None:
        key = (tree_id, path, phase, client_id)
        row = self.rows.get(key)
        if row is None:
            row = self.rows[key] = LedgerRow(tree_id=tree_id, path=path, phase=phase, client_id=client_id)
        row.scalars_up += up
        row.scalars_down += down
        row.features = max(row.features, features)
        row.candidates = max(row.candidates, candidates)
        self.scalars_up += up
        self.scalars_down += down
        self.per_phase[phase]["up"] += up
        self.per_phase[phase]["down"] += down

    def summary(self) -> LedgerSummary:
        return LedgerSummary(
            scalars_up=self.scalars_up,
            scalars_down=self.scalars_down,
            rounds=self.rounds,
            per_phase={k: dict(v) for k, v in sorted(self.per_phase.items())},
        )

    def node_table(self) -> List[dict]:
        """Per (tree, path, phase) totals over clients, sorted"""
        table: Dict[Tuple[int, str, str], dict] = {}
        for (tree_id, path, phase, _), row in self.rows.items():
            entry = table.setdefault(
                (tree_id, path, phase),
                {"tree": tree_id, "path": path, "phase": phase, "scalars_up": 0, "scalars_down": 0},
            )
            entry["scalars_up"] += row.scalars_up
            entry["scalars_down"] += row.scalars_down
        return [table[k] for k in sorted(table)]

    def client_rows(self, tree_id: int, path: str) -> Dict[int, Dict[str, LedgerRow]]:
        out: Dict[int, Dict[str, LedgerRow]] = defaultdict(dict)
        for (t, p, phase, client_id), row in self.rows.items():
            if t == tree_id and p == path:
                out[client_id][phase] = row
        return dict(out)


def ledger_expected(
    mode: str,
    num_features: int,
    sketch_size: int,
    width: int,
    num_candidates: int,
    shortlist: int = 0,
) -> int:
    """Closed-form upload of one client at one node.

    exact_quantiles: sketches + node summary + one left summary per candidate.
    avgimp_topl: shortlist pairs + node summary + sketches of the shortlisted features
    + (local gain, local left count) per candidate; ``num_features`` is |L_v| here.
    """
    if mode == "exact_quantiles":
        return num_features * (sketch_size + 1) + width + num_candidates * width
    if mode == "avgimp_topl":
        return 2 * shortlist + width + num_features * (sketch_size + 1) + 2 * num_candidates
    raise ValueError(f"unknown mode '{mode}'")


# ─── Tasks and outcomes ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class NodeTask:
    tree_id: int
    path: str
    features: Tuple[int, ...] = ()
    phase: str = "sketch"

    @property
    def key(self) -> NodeKey:
        return (self.tree_id, self.path)

    @property
    def depth(self) -> int:
        return len(self.path)

    def spec(self) -> NodeTaskSpec:
        return NodeTaskSpec(tree_id=self.tree_id, path=self.path, features=list(self.features))


@dataclass
class NodeOutcome:
    task: NodeTask
    stats: SuffStats
    site_stats: Dict[int, SuffStats]
    decision: Optional[SplitDecision] = None
    known: Tuple[int, ...] = ()
    candidates: int = 0


@dataclass
class _Pending:
    candidate: SplitCandidate
    recipients: Tuple[int, ...]
    delivered: set = field(default_factory=set)


@dataclass
class _Scored:
    """Server-side working set of one node during a level"""
    task: NodeTask
    stats: SuffStats
    site_stats: Dict[int, SuffStats]
    decisions: List[SplitDecision] = field(default_factory=list)
    numeric: List[SplitCandidate] = field(default_factory=list)
    known: Dict[SplitCandidate, Tuple[int, ...]] = field(default_factory=dict)


def _wire(message, serialize: bool):
    if not serialize:
        return message
    return type(message).model_validate_json(message.model_dump_json())


# ─── Server ──────────────────────────────────────────────────────────────────

class FederationServer:
    """Coordinates K clients through init, per-level rounds and the final summary round"""

    def __init__(self, clients: Sequence, config: ForestConfig, num_features: int):
        self.clients = {int(c.client_id): c for c in clients}
        if not self.clients:
            raise EmptyNodeError("federation without clients")
        self.config = config
        self.task: TaskKind = config.task
        self.impurity = config.impurity_kind
        self.num_features = num_features
        self.ledger = CommLedger()
        self.tree_clients: Dict[int, List[int]] = {}
        self.bin_edges: Dict[int, np.ndarray] = {}
        self._pending: Dict[NodeKey, _Pending] = {}
        self._categorical = set(config.categorical_features)

    # ── transport ──

    def _exchange(self, phase: str, requests: Mapping[int, object], handler: str) -> Dict[int, object]:
        if not requests:
            return {}
        self.ledger.new_round(phase)
        serialize = self.config.serialize_messages

        def call(client_id, request):
            reply = getattr(self.clients[client_id], handler)(_wire(request, serialize))
            return client_id, _wire(reply, serialize)

        ordered = sorted(requests.items())
        if self.config.n_jobs == 1 or len(ordered) == 1:
            results = [call(cid, req) for cid, req in ordered]
        else:
            results = Parallel(n_jobs=self.config.n_jobs, prefer="threads")(
                delayed(call)(cid, req) for cid, req in ordered
            )
        logger.debug("round %d (%s): %d clients", self.ledger.rounds, phase, len(results))
        return dict(results)

    def _decisions_for(self, client_id: int, tasks: Sequence[NodeTask]) -> List[SplitBroadcast]:
        parents = {(t.tree_id, t.path[:-1]) for t in tasks if t.path}
        out = []
        for key in sorted(parents):
            pending = self._pending.get(key)
            if pending is None or client_id not in pending.recipients or client_id in pending.delivered:
                continue
            pending.delivered.add(client_id)
            if pending.delivered.issuperset(pending.recipients):
                del self._pending[key]
            out.append(SplitBroadcast(tree_id=key[0], path=key[1], split=pending.candidate.to_spec()))
            self.ledger.record(key[0], key[1], "decision", client_id, down=pending.candidate.to_spec().scalar_count())
        return out

    def _tasks_by_client(self, tasks: Sequence[NodeTask]) -> Dict[int, List[NodeTask]]:
        out: Dict[int, List[NodeTask]] = defaultdict(list)
        for task in tasks:
            for client_id in self.tree_clients[task.tree_id]:
                out[client_id].append(task)
        return out

    # ── init ──

    def initialize(self) -> Dict[int, InitReply]:
        """Client subsets per tree, then one round that seeds every client's bootstraps"""
        ids = sorted(self.clients)
        tree_ids = list(range(self.config.trees))
        self.tree_clients = {
            t: subsample_clients(ids, self.config.client_subsample_ratio, self.config.seed, t) for t in tree_ids
        }
        want_ranges = self.config.candidate_rule == "histogram"
        requests = {}
        for client_id in ids:
            mine = [t for t in tree_ids if client_id in self.tree_clients[t]]
            requests[client_id] = InitRequest(
                seed=self.config.seed,
                tree_ids=mine,
                bootstrap=self.config.bootstrap,
                want_ranges=want_ranges,
                task=self.task,
            )
            self.ledger.record(-1, "", "init", client_id, down=requests[client_id].scalar_count())
        replies = self._exchange("init", requests, "handle_init")
        for client_id, reply in replies.items():
            if reply.n_features != self.num_features:
                raise ProtocolInconsistencyError(
                    f"client reports {reply.n_features} features, expected {self.num_features}",
                    -1, "", client_id,
                )
            self.ledger.record(-1, "", "init", client_id, up=reply.scalar_count())
        if want_ranges:
            self._build_bin_edges(replies)
        return replies

    def _build_bin_edges(self, replies: Mapping[int, InitReply]) -> None:
        lo = np.full(self.num_features, np.inf)
        hi = np.full(self.num_features, -np.inf)
        for reply in replies.values():
            ranges = np.asarray(reply.ranges, dtype=np.float64)
            if ranges.size:
                lo = np.minimum(lo, ranges[:, 0])
                hi = np.maximum(hi, ranges[:, 1])
        bins = self.config.bin_count
        for j in range(self.num_features):
            if np.isfinite(lo[j]) and hi[j] > lo[j]:
                self.bin_edges[j] = lo[j] + (hi[j] - lo[j]) * np.arange(1, bins) / bins
            else:
                self.bin_edges[j] = np.zeros(0)

    def root_tasks(self, features_for) -> List[NodeTask]:
        return [NodeTask(t, "", tuple(features_for(t, ""))) for t in sorted(self.tree_clients)]

    # ── level ──

    def run_level(self, tasks: Sequence[NodeTask]) -> List[NodeOutcome]:
        if not tasks:
            return []
        start_up, start_down = self.ledger.scalars_up, self.ledger.scalars_down
        if self.config.candidate_rule == "histogram":
            outcomes = self._level_histogram(tasks)
        elif self.config.mode == "avgimp_topl":
            outcomes = self._level_avgimp(tasks)
        else:
            outcomes = self._level_exact(tasks)
        for outcome in outcomes:
            if outcome.decision is not None:
                self._pending[outcome.task.key] = _Pending(
                    outcome.decision.candidate, tuple(sorted(outcome.site_stats))
                )
        logger.info(
            "level %d: %d tasks, %d splits, %d candidates, up=%d down=%d",
            tasks[0].depth,
            len(tasks),
            sum(o.decision is not None for o in outcomes),
            sum(o.candidates for o in outcomes),
            self.ledger.scalars_up - start_up,
            self.ledger.scalars_down - start_down,
        )
        return outcomes

    def finalize(self, tasks: Sequence[NodeTask]) -> List[NodeOutcome]:
        """Summary-only round for nodes whose statistics are not yet known"""
        if not tasks:
            return []
        batches = {t.key: CandidateBatch(tree_id=t.tree_id, path=t.path) for t in tasks}
        replies = self._eval_round(tasks, batches, reply="left_stats", phase="summary", include_node_stats=True)
        out = []
        for task in tasks:
            per_client = replies.get(task.key, {})
            site_stats = {
                cid: SuffStats.from_array(self.task, r.node_stats) for cid, r in sorted(per_client.items())
            }
            out.append(NodeOutcome(task, self._pool(task, site_stats), site_stats))
        return out

    # ── rounds ──

    def _sketch_round(
        self,
        tasks: Sequence[NodeTask],
        include_node_stats: bool = True,
        phase: str = "sketch",
    ) -> Dict[NodeKey, Dict[int, object]]:
        per_client = self._tasks_by_client(tasks)
        requests = {}
        for client_id, mine in per_client.items():
            requests[client_id] = SketchRequest(
                decisions=self._decisions_for(client_id, mine),
                tasks=[t.spec() for t in mine],
                sketch_size=self.config.sketch_size,
                quantile_rule=self.config.quantile_rule,
                categorical_features=sorted(self._categorical),
                send_values=self.config.candidate_rule == "midpoint",
                include_node_stats=include_node_stats,
            )
            for t in mine:
                self.ledger.record(t.tree_id, t.path, phase, client_id, down=len(t.features))
        replies = self._exchange(phase, requests, "handle_sketch")
        out: Dict[NodeKey, Dict[int, object]] = defaultdict(dict)
        for client_id, reply in replies.items():
            for item in reply.tasks:
                self.ledger.record(
                    item.tree_id, item.path, phase, client_id,
                    up=item.scalar_count(), features=len(item.features),
                )
                out[(item.tree_id, item.path)][client_id] = item
        return out

    def _shortlist_round(self, tasks: Sequence[NodeTask]) -> Dict[NodeKey, Dict[int, object]]:
        per_client = self._tasks_by_client(tasks)
        requests = {}
        for client_id, mine in per_client.items():
            requests[client_id] = ShortlistRequest(
                decisions=self._decisions_for(client_id, mine),
                tasks=[t.spec() for t in mine],
                shortlist_size=self.config.resolve_shortlist(self.num_features),
                impurity=self.impurity,
                categorical_features=sorted(self._categorical),
            )
            for t in mine:
                self.ledger.record(t.tree_id, t.path, "shortlist", client_id, down=len(t.features))
        replies = self._exchange("shortlist", requests, "handle_shortlist")
        out: Dict[NodeKey, Dict[int, object]] = defaultdict(dict)
        for client_id, reply in replies.items():
            for item in reply.tasks:
                self.ledger.record(item.tree_id, item.path, "shortlist", client_id, up=item.scalar_count())
                out[(item.tree_id, item.path)][client_id] = item
        return out

    def _eval_round(
        self,
        tasks: Sequence[NodeTask],
        batches: Mapping[NodeKey, CandidateBatch],
        reply: str,
        phase: str = "eval",
        include_node_stats: bool = False,
        recipients: Optional[Mapping[NodeKey, Iterable[int]]] = None,
    ) -> Dict[NodeKey, Dict[int, TaskEval]]:
        by_client: Dict[int, List[NodeTask]] = defaultdict(list)
        for task in tasks:
            if task.key not in batches:
                continue
            targets = self.tree_clients[task.tree_id] if recipients is None else recipients.get(task.key, ())
            for client_id in targets:
                by_client[client_id].append(task)
        requests = {}
        for client_id, mine in by_client.items():
            decisions = self._decisions_for(client_id, mine) if include_node_stats else []
            requests[client_id] = EvalRequest(
                decisions=decisions,
                batches=[batches[t.key] for t in mine],
                reply=reply,
                include_node_stats=include_node_stats,
                impurity=self.impurity,
            )
            for t in mine:
                batch = batches[t.key]
                self.ledger.record(
                    t.tree_id, t.path, phase, client_id,
                    down=batch.scalar_count() + (len(t.features) if include_node_stats else 0),
                    candidates=len(batch.thresholds),
                )
        replies = self._exchange(phase, requests, "handle_eval")
        out: Dict[NodeKey, Dict[int, TaskEval]] = defaultdict(dict)
        for client_id, message in replies.items():
            for item in message.tasks:
                self.ledger.record(item.tree_id, item.path, phase, client_id, up=item.scalar_count())
                out[(item.tree_id, item.path)][client_id] = item
        return out

    # ── shared helpers ──

    def _pool(self, task: NodeTask, site_stats: Mapping[int, SuffStats]) -> SuffStats:
        if not site_stats:
            raise EmptyNodeError(f"no client holds samples of tree {task.tree_id} node '{task.path}'")
        total = np.zeros(self.task.width)
        for client_id in sorted(site_stats):
            total = total + site_stats[client_id].as_array()
        return SuffStats.from_array(self.task, total)

    def _splittable(self, stats: SuffStats, depth: int) -> bool:
        return (
            depth < self.config.max_depth
            and stats.n >= 2 * self.config.min_leaf
            and not is_pure(self.task, stats.as_array())
        )

    def _numeric_thresholds(self, sketches: Mapping[int, Tuple[float, object]]) -> np.ndarray:
        """Candidate thresholds from (node count, FeatureSketch) pairs of the reporting clients"""
        if self.config.candidate_rule == "midpoint":
            values = [np.asarray(fs.values, dtype=np.float64) for _, fs in sketches.values()]
            return exact_midpoints(np.concatenate(values)) if values else np.zeros(0)
        parts = [
            QuantileSketch(tuple(fs.breakpoints), int(n))
            for n, fs in sketches.values()
        ]
        if not parts:
            return np.zeros(0)
        return candidate_thresholds(pool_sketches(parts), self.config.sketch_size, dedup=self.config.dedup_candidates)

    def _category_stats(self, features: Iterable[int], by_feature: Mapping[int, Mapping[int, object]]):
        """feature -> client -> category -> summary for the categorical features among `features`"""
        out = {}
        for feature in features:
            if feature not in self._categorical:
                continue
            out[feature] = {
                cid: {s.category: np.asarray(s.stats, dtype=np.float64) for s in fs.categories}
                for cid, fs in sorted(by_feature.get(feature, {}).items())
            }
        return out

    def _set_candidates(self, features: Iterable[int], by_feature, site_stats) -> List[SetCandidate]:
        return set_candidates(
            self.task, self._category_stats(features, by_feature), site_stats, self.config.include_h
        )

    def _check_left(self, task: NodeTask, client_id: int, node: SuffStats, left: np.ndarray) -> None:
        if not check_within(self.task, left, node.as_array()):
            raise ProtocolInconsistencyError(
                "left-child summary exceeds the node summary", task.tree_id, task.path, client_id
            )

    def _outcome(self, scored: _Scored, candidates: int) -> NodeOutcome:
        best = select_best(scored.decisions, self.config.min_leaf, self.config.min_impurity_decrease)
        known = scored.known.get(best.candidate, ()) if best is not None else ()
        return NodeOutcome(scored.task, scored.stats, scored.site_stats, best, known, candidates)

    # ── exact mode ──

    def _level_exact(self, tasks: Sequence[NodeTask]) -> List[NodeOutcome]:
        phase = "values" if self.config.candidate_rule == "midpoint" else "sketch"
        sketch_replies = self._sketch_round(tasks, phase=phase)
        working: List[_Scored] = []
        leaves: Dict[NodeKey, NodeOutcome] = {}
        batches: Dict[NodeKey, CandidateBatch] = {}
        recipients: Dict[NodeKey, Tuple[int, ...]] = {}

        for task in tasks:
            per_client = sketch_replies.get(task.key, {})
            site_stats = {
                cid: SuffStats.from_array(self.task, item.node_stats) for cid, item in sorted(per_client.items())
            }
            stats = self._pool(task, site_stats)
            if not self._splittable(stats, task.depth):
                leaves[task.key] = NodeOutcome(task, stats, site_stats)
                continue
            scored = _Scored(task, stats, site_stats)
            by_feature = self._by_feature(per_client)

            features, thresholds = [], []
            for feature in task.features:
                if feature in self._categorical:
                    continue
                sketches = {
                    cid: (site_stats[cid].n, fs) for cid, fs in by_feature.get(feature, {}).items()
                }
                for t in self._numeric_thresholds(sketches):
                    scored.numeric.append(SplitCandidate.numeric(feature, t))
                    features.append(feature)
                    thresholds.append(float(t))

            for item in self._set_candidates(task.features, by_feature, site_stats):
                scored.known[item.candidate] = item.known
                left = item.pooled_left(self.task.width)
                scored.decisions.extend(self._exact_decisions(scored, [item.candidate], left[None, :]))

            if features:
                batches[task.key] = CandidateBatch(
                    tree_id=task.tree_id, path=task.path, features=features, thresholds=thresholds
                )
                recipients[task.key] = tuple(site_stats)
            working.append(scored)

        eval_replies = self._eval_round(tasks, batches, reply="left_stats", recipients=recipients)
        outcomes = {}
        for scored in working:
            task = scored.task
            if scored.numeric:
                per_client = eval_replies.get(task.key, {})
                left = np.zeros((len(scored.numeric), self.task.width))
                for cid in sorted(per_client):
                    arr = np.asarray(per_client[cid].left_stats, dtype=np.float64).reshape(-1, self.task.width)
                    if arr.shape[0] != len(scored.numeric):
                        raise ProtocolInconsistencyError(
                            f"expected {len(scored.numeric)} left summaries, got {arr.shape[0]}",
                            task.tree_id, task.path, cid,
                        )
                    self._check_left(task, cid, scored.site_stats[cid], arr)
                    left = left + arr
                scored.decisions.extend(self._exact_decisions(scored, scored.numeric, left))
            outcomes[task.key] = self._outcome(scored, len(scored.numeric) + len(scored.known))
        outcomes.update(leaves)
        return [outcomes[t.key] for t in tasks]

    def _exact_decisions(self, scored: _Scored, candidates, left: np.ndarray) -> List[SplitDecision]:
        parent = scored.stats.as_array()
        if not check_within(self.task, left, parent):
            raise ProtocolInconsistencyError(
                "aggregated left child exceeds its parent", scored.task.tree_id, scored.task.path, None
            )
        gains = gain_array(self.task, parent, left, self.impurity)
        return decisions_from_arrays(self.task, candidates, parent, left, gains)

    @staticmethod
    def _by_feature(per_client: Mapping[int, object]) -> Dict[int, Dict[int, object]]:
        out: Dict[int, Dict[int, object]] = defaultdict(dict)
        for cid in sorted(per_client):
            for fs in per_client[cid].features:
                out[fs.feature][cid] = fs
        return out

    # ── histogram mode ──

    def _level_histogram(self, tasks: Sequence[NodeTask]) -> List[NodeOutcome]:
        batches: Dict[NodeKey, CandidateBatch] = {}
        numeric: Dict[NodeKey, List[SplitCandidate]] = {}
        for task in tasks:
            features, thresholds, candidates = [], [], []
            for feature in task.features:
                for t in self.bin_edges.get(feature, np.zeros(0)):
                    candidates.append(SplitCandidate.numeric(feature, float(t)))
                    features.append(feature)
                    thresholds.append(float(t))
            numeric[task.key] = candidates
            batches[task.key] = CandidateBatch(
                tree_id=task.tree_id, path=task.path, features=features, thresholds=thresholds
            )
        replies = self._eval_round(tasks, batches, reply="left_stats", phase="eval", include_node_stats=True)
        out = []
        for task in tasks:
            per_client = replies.get(task.key, {})
            site_stats = {
                cid: SuffStats.from_array(self.task, r.node_stats) for cid, r in sorted(per_client.items())
            }
            stats = self._pool(task, site_stats)
            if not self._splittable(stats, task.depth) or not numeric[task.key]:
                out.append(NodeOutcome(task, stats, site_stats))
                continue
            scored = _Scored(task, stats, site_stats, numeric=numeric[task.key])
            left = np.zeros((len(scored.numeric), self.task.width))
            for cid in sorted(per_client):
                arr = np.asarray(per_client[cid].left_stats, dtype=np.float64).reshape(-1, self.task.width)
                self._check_left(task, cid, site_stats[cid], arr)
                left = left + arr
            scored.decisions = self._exact_decisions(scored, scored.numeric, left)
            out.append(self._outcome(scored, len(scored.numeric)))
        return out

    # ── AvgImp / Top-L mode ──

    def _level_avgimp(self, tasks: Sequence[NodeTask]) -> List[NodeOutcome]:
        short_replies = self._shortlist_round(tasks)
        leaves: Dict[NodeKey, NodeOutcome] = {}
        working: Dict[NodeKey, _Scored] = {}
        sketch_tasks: List[NodeTask] = []

        for task in tasks:
            per_client = short_replies.get(task.key, {})
            site_stats = {
                cid: SuffStats.from_array(self.task, item.node_stats) for cid, item in sorted(per_client.items())
            }
            stats = self._pool(task, site_stats)
            if not self._splittable(stats, task.depth):
                leaves[task.key] = NodeOutcome(task, stats, site_stats)
                continue
            reports = [
                FeatureShortlistReport(cid, tuple((e.feature, e.gain) for e in item.entries))
                for cid, item in sorted(per_client.items())
            ]
            shortlist = tuple(top_l_shortlist(reports))
            working[task.key] = _Scored(task, stats, site_stats)
            if shortlist:
                sketch_tasks.append(NodeTask(task.tree_id, task.path, shortlist, "sketch"))

        # decisions were already delivered with the shortlist round
        sketch_replies = self._sketch_round(sketch_tasks, include_node_stats=False) if sketch_tasks else {}
        batches: Dict[NodeKey, CandidateBatch] = {}
        recipients: Dict[NodeKey, Tuple[int, ...]] = {}
        set_scores: Dict[NodeKey, List[SetCandidate]] = {}
        for key, scored in working.items():
            per_client = sketch_replies.get(key, {})
            by_feature = self._by_feature(per_client)
            features, thresholds = [], []
            for feature in sorted(by_feature):
                if feature in self._categorical:
                    continue
                sketches = {cid: (scored.site_stats[cid].n, fs) for cid, fs in by_feature[feature].items()}
                for t in self._numeric_thresholds(sketches):
                    scored.numeric.append(SplitCandidate.numeric(feature, t))
                    features.append(feature)
                    thresholds.append(float(t))
            set_scores[key] = self._set_candidates(sorted(by_feature), by_feature, scored.site_stats)
            if features:
                batches[key] = CandidateBatch(tree_id=key[0], path=key[1], features=features, thresholds=thresholds)
                recipients[key] = tuple(scored.site_stats)

        eval_replies = self._eval_round(
            [s.task for s in working.values()], batches, reply="local_gain", recipients=recipients
        )
        outcomes = {}
        for key, scored in working.items():
            counts = {cid: s.n for cid, s in scored.site_stats.items()}
            per_client = eval_replies.get(key, {})
            m = len(scored.numeric)
            gains = np.zeros((len(per_client), m))
            left_counts = np.zeros(m)
            for row, cid in enumerate(sorted(per_client)):
                reply = per_client[cid]
                if len(reply.local_gains) != m or len(reply.left_counts) != m:
                    raise ProtocolInconsistencyError(
                        f"expected {m} local gains", key[0], key[1], cid
                    )
                local_counts = np.asarray(reply.left_counts, dtype=np.float64)
                if np.any(local_counts > counts[cid]) or np.any(local_counts < 0):
                    raise ProtocolInconsistencyError("left count exceeds node count", key[0], key[1], cid)
                gains[row] = reply.local_gains
                left_counts = left_counts + local_counts
            clients = sorted(per_client)
            for i, candidate in enumerate(scored.numeric):
                score = evaluate_avgimp({cid: gains[r, i] for r, cid in enumerate(clients)}, counts)
                if score is not None:
                    scored.decisions.append(SplitDecision(
                        candidate, score, float(left_counts[i]), float(scored.stats.n - left_counts[i])
                    ))
            for item in set_scores[key]:
                local = {}
                pooled_left = 0.0
                for cid, left in sorted(item.lefts.items()):
                    g = gain_array(self.task, scored.site_stats[cid].as_array(), left, self.impurity)[0]
                    local[cid] = 0.0 if np.isnan(g) else max(0.0, float(g))
                    pooled_left += float(counts_of(self.task, left))
                score = evaluate_avgimp(local, counts)
                if score is not None:
                    scored.known[item.candidate] = item.known
                    scored.decisions.append(
                        SplitDecision(item.candidate, score, pooled_left, float(scored.stats.n - pooled_left))
                    )
            outcomes[key] = self._outcome(scored, m + len(set_scores[key]))
        outcomes.update(leaves)
        return [outcomes[t.key] for t in tasks]

    # ── diagnostics support ──

    def collect_sketches(self, tasks: Sequence[NodeTask]) -> Dict[NodeKey, Dict[int, object]]:
        return self._sketch_round(tasks, include_node_stats=False)

    def collect_left_counts(self, batches: Mapping[NodeKey, CandidateBatch]) -> Dict[NodeKey, Dict[int, TaskEval]]:
        tasks = [NodeTask(k[0], k[1]) for k in sorted(batches)]
        return self._eval_round(tasks, batches, reply="left_count", phase="site_counts")
