"""
Forest model: growth driver for the federated protocol, prediction and the model document.

Trees are stored as flat node lists in pre-order. Each node keeps its pooled summary,
so the "larger child" used for unseen sites or categories is always known.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from client import ClientShard, FederatedClient
from errors import DataError, MissingSiteError, ModelFormatError
from federation import CommLedger, FederationServer, NodeTask, feature_subset
from impurity import SuffStats, counts_of, is_pure, leaf_value
from models import ForestConfig, LedgerSummary, ModelDocument, NodeDocument, TaskKind, TreeDocument
from split_engine import SplitCandidate

logger = logging.getLogger(__name__)

NO_SITE = -1


# ─── Trees ───────────────────────────────────────────────────────────────────

@dataclass
class TreeNode:
    path: str
    stats: np.ndarray
    value: Union[float, int]
    split: Optional[SplitCandidate] = None
    gain: Optional[float] = None
    known: Tuple[int, ...] = ()
    left: Optional[int] = None
    right: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None


@dataclass
class Tree:
    tree_id: int
    nodes: List[TreeNode]
    clients: List[int] = field(default_factory=list)

    @classmethod
    def assemble(cls, tree_id: int, by_path: Dict[str, TreeNode], clients: Sequence[int] = ()) -> "Tree":
        """Flatten a path-keyed node map into pre-order with child indices"""
        order: List[str] = []
        stack = [""]
        while stack:
            path = stack.pop()
            order.append(path)
            if by_path[path].split is not None:
                stack.append(path + "R")
                stack.append(path + "L")
        index = {p: i for i, p in enumerate(order)}
        nodes = []
        for path in order:
            node = by_path[path]
            if node.split is not None:
                node.left, node.right = index[path + "L"], index[path + "R"]
            nodes.append(node)
        return cls(tree_id, nodes, list(clients))

    @property
    def depth(self) -> int:
        return max(len(n.path) for n in self.nodes)

    @property
    def leaf_count(self) -> int:
        return sum(n.is_leaf for n in self.nodes)

    def _larger_child(self, node: TreeNode, task: TaskKind) -> bool:
        left = counts_of(task, self.nodes[node.left].stats)
        right = counts_of(task, self.nodes[node.right].stats)
        return bool(left >= right)

    def apply(self, X: np.ndarray, sites: np.ndarray, task: TaskKind, site_fallback: bool = True) -> np.ndarray:
        """Leaf index reached by every row"""
        out = np.zeros(X.shape[0], dtype=np.int64)
        queue = [(0, np.arange(X.shape[0]))]
        while queue:
            i, rows = queue.pop()
            node = self.nodes[i]
            if node.is_leaf or rows.size == 0:
                out[rows] = i
                continue
            split = node.split
            if split.kind == "numeric":
                go = X[rows, split.feature] <= split.threshold
            else:
                keys = (
                    X[rows, split.feature].astype(np.int64) if split.kind == "categorical" else sites[rows]
                )
                if split.kind == "client_set" and not site_fallback and np.any(keys == NO_SITE):
                    raise MissingSiteError(
                        f"tree {self.tree_id} splits on the client indicator but a row has no site"
                    )
                go = np.isin(keys, split.left_set)
                unseen = ~np.isin(keys, node.known)
                if np.any(unseen):
                    go[unseen] = self._larger_child(node, task)
            queue.append((node.left, rows[go]))
            queue.append((node.right, rows[~go]))
        return out

    def predict_values(self, X, sites, task: TaskKind, site_fallback: bool = True) -> np.ndarray:
        values = np.array([n.value for n in self.nodes], dtype=np.float64)
        return values[self.apply(X, sites, task, site_fallback)]


# ─── Forest ──────────────────────────────────────────────────────────────────

@dataclass
class Forest:
    task: TaskKind
    impurity: str
    n_features: int
    trees: List[Tree]
    method: str = "fedforest"
    sites: List[int] = field(default_factory=list)
    site_map: Dict[int, int] = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    ledger: LedgerSummary = field(default_factory=LedgerSummary)
    comm_ledger: Optional[CommLedger] = field(default=None, repr=False, compare=False)

    def site_indices(self, raw_sites):
        """Client ids as written in data files onto the site indices the trees were grown with"""
        if raw_sites is None or not self.site_map:
            return raw_sites
        return np.array(
            [NO_SITE if s is None else self.site_map.get(int(s), NO_SITE) for s in raw_sites], dtype=np.int64
        )

    def _prepare(self, X, sites) -> Tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected rows with {self.n_features} features, got shape {X.shape}")
        if sites is None:
            site_arr = np.full(X.shape[0], NO_SITE, dtype=np.int64)
        else:
            site_arr = np.array([NO_SITE if s is None else int(s) for s in sites], dtype=np.int64)
            if site_arr.shape[0] != X.shape[0]:
                raise DataError(f"{site_arr.shape[0]} site labels for {X.shape[0]} rows")
        return X, site_arr

    def tree_predictions(self, X, sites=None, site_fallback: bool = True) -> np.ndarray:
        X, site_arr = self._prepare(X, sites)
        return np.stack([t.predict_values(X, site_arr, self.task, site_fallback) for t in self.trees])

    def vote_shares(self, X, sites=None, site_fallback: bool = True) -> np.ndarray:
        """Fraction of trees voting for each class, shape (n, C)"""
        if self.task.is_regression:
            raise ValueError("vote shares are defined for classification forests only")
        votes = self.tree_predictions(X, sites, site_fallback).astype(np.int64)
        shares = np.zeros((votes.shape[1], self.task.num_categories))
        for c in range(self.task.num_categories):
            shares[:, c] = (votes == c).mean(axis=0)
        return shares

    def predict(self, X, sites=None, site_fallback: bool = True) -> np.ndarray:
        if self.task.is_regression:
            return self.tree_predictions(X, sites, site_fallback).mean(axis=0)
        # argmax picks the lowest label on tied votes
        return np.argmax(self.vote_shares(X, sites, site_fallback), axis=1).astype(np.float64)

    # ─── Serialization ───────────────────────────────────────────────────────

    def to_document(self) -> ModelDocument:
        trees = []
        for tree in self.trees:
            nodes = [
                NodeDocument(
                    path=n.path,
                    stats=[float(v) for v in n.stats],
                    value=float(n.value),
                    split=None if n.split is None else n.split.to_spec(),
                    gain=n.gain,
                    known=list(n.known),
                    left=n.left,
                    right=n.right,
                )
                for n in tree.nodes
            ]
            trees.append(TreeDocument(tree_id=tree.tree_id, clients=tree.clients, nodes=nodes))
        return ModelDocument(
            method=self.method,
            task=self.task,
            impurity=self.impurity,
            n_features=self.n_features,
            sites=self.sites,
            site_map=self.site_map,
            config=self.config,
            ledger=self.ledger,
            trees=trees,
        )

    @classmethod
    def from_document(cls, doc: ModelDocument) -> "Forest":
        trees = []
        for tree_doc in doc.trees:
            nodes = []
            for n in tree_doc.nodes:
                split = None if n.split is None else SplitCandidate.from_spec(n.split)
                value = n.value if doc.task.is_regression else int(n.value)
                nodes.append(TreeNode(
                    n.path, np.asarray(n.stats, dtype=np.float64), value, split, n.gain,
                    tuple(n.known), n.left, n.right,
                ))
            for i, node in enumerate(nodes):
                if node.split is not None and (
                    node.left is None or node.right is None or not i < node.left < len(nodes)
                    or not i < node.right < len(nodes)
                ):
                    raise ModelFormatError(f"tree {tree_doc.tree_id}: broken child index at node {i}")
            trees.append(Tree(tree_doc.tree_id, nodes, list(tree_doc.clients)))
        return cls(
            doc.task, doc.impurity, doc.n_features, trees, doc.method, list(doc.sites), dict(doc.site_map),
            doc.config, doc.ledger,
        )

    def to_json(self) -> str:
        return self.to_document().model_dump_json(indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        try:
            doc = ModelDocument.model_validate_json(text)
        except ValueError as exc:
            raise ModelFormatError(f"not a valid model document: {exc}") from exc
        return cls.from_document(doc)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Forest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ModelFormatError(f"cannot read model file: {exc}", path=str(path)) from exc
        try:
            json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"model file is not JSON: {exc.msg}", path=str(path), row=exc.lineno) from exc
        return cls.from_json(text)


# ─── Federated growth ────────────────────────────────────────────────────────

def _leaf(path: str, stats: SuffStats) -> TreeNode:
    return TreeNode(path, stats.as_array(), leaf_value(stats))


def _splittable(config: ForestConfig, stats: SuffStats, depth: int) -> bool:
    return (
        depth < config.max_depth
        and stats.n >= 2 * config.min_leaf
        and not is_pure(config.task, stats.as_array())
    )


def fit(shards: Sequence[ClientShard], config: ForestConfig, method: str = "fedforest") -> Forest:
    """Grow T trees level-synchronously through the federated protocol"""
    if not shards:
        raise DataError("no client shards")
    shards = sorted(shards, key=lambda s: s.client_id)
    if len({s.client_id for s in shards}) != len(shards):
        raise DataError("duplicate client ids")
    d = shards[0].n_features
    if any(s.n_features != d for s in shards):
        raise DataError("clients disagree on the number of features")
    if any(j >= d or j < 0 for j in config.categorical_features):
        raise DataError(f"categorical feature index out of range 0..{d - 1}")

    server = FederationServer([FederatedClient(s) for s in shards], config, d)
    server.initialize()
    mtry = config.resolve_mtry(d)

    def features_for(tree_id: int, path: str) -> List[int]:
        return feature_subset(d, mtry, config.seed, tree_id, path)

    nodes: Dict[int, Dict[str, TreeNode]] = {t: {} for t in server.tree_clients}
    tasks = server.root_tasks(features_for)
    deferred: List[NodeTask] = []
    while tasks:
        next_tasks: List[NodeTask] = []
        for outcome in server.run_level(tasks):
            task = outcome.task
            decision = outcome.decision
            node = _leaf(task.path, outcome.stats)
            nodes[task.tree_id][task.path] = node
            if decision is None:
                continue
            node.split, node.gain, node.known = decision.candidate, decision.gain, outcome.known
            depth = task.depth + 1
            sides = (("L", decision.left_stats, decision.left_count), ("R", decision.right_stats, decision.right_count))
            for side, stats, count in sides:
                child = NodeTask(task.tree_id, task.path + side, tuple(features_for(task.tree_id, task.path + side)))
                if stats is not None:
                    if _splittable(config, stats, depth):
                        next_tasks.append(child)
                    else:
                        nodes[task.tree_id][child.path] = _leaf(child.path, stats)
                elif depth < config.max_depth and count >= 2 * config.min_leaf:
                    next_tasks.append(child)
                else:
                    deferred.append(child)
        tasks = next_tasks

    for outcome in server.finalize(deferred):
        nodes[outcome.task.tree_id][outcome.task.path] = _leaf(outcome.task.path, outcome.stats)

    trees = [Tree.assemble(t, nodes[t], server.tree_clients[t]) for t in sorted(nodes)]
    ledger = server.ledger.summary()
    logger.info(
        "grew %d trees (%d leaves) in %d rounds, %d scalars up, %d down",
        len(trees), sum(t.leaf_count for t in trees), ledger.rounds, ledger.scalars_up, ledger.scalars_down,
    )
    return Forest(
        config.task,
        config.impurity_kind,
        d,
        trees,
        method=method,
        sites=[s.client_id for s in shards],
        config=config.model_dump(mode="json"),
        ledger=ledger,
        comm_ledger=server.ledger,
    )
