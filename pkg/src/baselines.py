"""
Comparator methods and the centralized oracle.

The centralized grower sees the pooled rows but follows the federated seed schedule
(bootstrap per tree and site, client subsample per tree, feature subset per node) and
accumulates every summary site by site in ascending site order. With the midpoint rule
it therefore grows the same trees as the federated protocol in midpoint verification
mode; with the quantile rule on a single site it matches exact-quantile mode.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from client import ClientShard
from errors import DataError, MissingSiteError
from federation import feature_subset, stratified_bootstrap, subsample_clients
from forest import NO_SITE, Forest, Tree, TreeNode, fit
from impurity import SuffStats, gain_array, is_pure, leaf_value, outcome_rows
from models import ForestConfig, TaskKind
from sketch import build_sketch, candidate_thresholds, pool_sketches
from split_engine import (
    SetCandidate,
    SplitCandidate,
    decisions_from_arrays,
    exact_midpoints,
    fisher_order,
    left_stats_at,
    scan_midpoints,
    select_best,
    set_candidates,
)

logger = logging.getLogger(__name__)

BaselineKind = Literal["centralized_rf", "centralized_cart", "local_learning", "local_ensemble", "fed_histogram"]
HEncoding = Literal["root", "node"]

# nodes above this many rows use the sorted prefix scan for midpoints
DENSE_LIMIT = 1024


def pool_shards(shards: Sequence[ClientShard]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack shards in ascending client order into (X, y, site)"""
    if not shards:
        raise DataError("no client shards")
    shards = sorted(shards, key=lambda s: s.client_id)
    X = np.vstack([s.features for s in shards])
    y = np.concatenate([s.outcomes for s in shards])
    sites = np.concatenate([np.full(s.n_rows, s.client_id, dtype=np.int64) for s in shards])
    return X, y, sites


# ─── Centralized grower ──────────────────────────────────────────────────────

class CentralizedGrower:
    """Greedy CART over pooled rows, optionally wrapped as a random forest"""

    def __init__(
        self,
        X: np.ndarray,
        y: np.ndarray,
        sites: np.ndarray,
        config: ForestConfig,
        rule: str = "midpoint",
        h_encoding: HEncoding = "root",
    ):
        self.X = np.asarray(X, dtype=np.float64)
        self.sites = np.asarray(sites, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise DataError("centralized fit needs a non-empty 2-d feature matrix")
        if self.X.shape[0] != len(y) or self.X.shape[0] != self.sites.shape[0]:
            raise DataError("features, outcomes and sites differ in length")
        if rule not in ("midpoint", "quantile"):
            raise ValueError(f"unknown candidate rule '{rule}'")
        self.config = config
        self.task: TaskKind = config.task
        self.impurity = config.impurity_kind
        self.rule = rule
        self.h_encoding = h_encoding
        self.rows = outcome_rows(self.task, y)
        self.site_ids = sorted(int(s) for s in np.unique(self.sites))
        self.site_index = {s: np.nonzero(self.sites == s)[0] for s in self.site_ids}
        self.d = self.X.shape[1]
        self.mtry = config.resolve_mtry(self.d)
        self.categorical = set(config.categorical_features)

    # ── helpers ──

    def _pool(self, per_site: Dict[int, np.ndarray]) -> np.ndarray:
        total = np.zeros(self.task.width)
        for site in sorted(per_site):
            total = total + per_site[site]
        return total

    def _splittable(self, stats: SuffStats, depth: int) -> bool:
        return (
            depth < self.config.max_depth
            and stats.n >= 2 * self.config.min_leaf
            and not is_pure(self.task, stats.as_array())
        )

    def _numeric(self, feature: int, members: Dict[int, np.ndarray], n: float):
        """(thresholds, pooled left summaries) of one numeric feature at a node"""
        per_site_values = {s: self.X[idx, feature] for s, idx in members.items()}
        if self.rule == "quantile":
            pooled = np.concatenate([per_site_values[s] for s in sorted(per_site_values)])
            sketch = build_sketch(pooled, self.config.sketch_size, self.config.quantile_rule)
            thresholds = candidate_thresholds(
                pool_sketches([sketch]), self.config.sketch_size, dedup=self.config.dedup_candidates
            )
        elif n > DENSE_LIMIT:
            order = sorted(members)
            values = np.concatenate([per_site_values[s] for s in order])
            rows = np.concatenate([self.rows[members[s]] for s in order])
            return scan_midpoints(values, rows)
        else:
            thresholds = exact_midpoints(
                np.concatenate([np.unique(per_site_values[s]) for s in sorted(per_site_values)])
            )
        left = np.zeros((thresholds.size, self.task.width))
        for site in sorted(members):
            left = left + left_stats_at(per_site_values[site], self.rows[members[site]], thresholds)
        return thresholds, left

    def _set_candidates(
        self,
        features: Sequence[int],
        members: Dict[int, np.ndarray],
        site_stats: Dict[int, SuffStats],
        root_order: Optional[List[int]],
    ) -> List[SetCandidate]:
        category_stats = {}
        for feature in features:
            if feature not in self.categorical:
                continue
            category_stats[feature] = {}
            for site in sorted(members):
                idx = members[site]
                codes = self.X[idx, feature].astype(np.int64)
                rows = self.rows[idx]
                category_stats[feature][site] = {int(c): rows[codes == c].sum(axis=0) for c in np.unique(codes)}
        node_h = self.config.include_h and self.h_encoding == "node"
        out = set_candidates(self.task, category_stats, site_stats, node_h)
        if self.config.include_h and self.h_encoding == "root" and root_order:
            present = [s for s in root_order if s in site_stats and site_stats[s].n > 0]
            zero = np.zeros(self.task.width)
            for i in range(1, len(present)):
                candidate = SplitCandidate.client_set(present[:i])
                lefts = {
                    s: (st.as_array() if s in candidate.left_set else zero) for s, st in site_stats.items()
                }
                out.append(SetCandidate(candidate, tuple(sorted(present)), lefts))
        return out

    # ── growth ──

    def grow(self, tree_id: int) -> Tree:
        seed = self.config.seed
        clients = subsample_clients(self.site_ids, self.config.client_subsample_ratio, seed, tree_id)
        members = {}
        for site in clients:
            index = self.site_index[site]
            if self.config.bootstrap:
                draws = stratified_bootstrap(index.size, [tree_id], seed, site)[tree_id]
                members[site] = index[draws]
            else:
                members[site] = index
        root_order = None
        if self.config.include_h and self.h_encoding == "root":
            root_order = fisher_order({
                s: SuffStats.from_array(self.task, self.rows[idx].sum(axis=0)) for s, idx in members.items()
            })
        nodes: Dict[str, TreeNode] = {}
        self._grow_node(tree_id, "", members, None, root_order, nodes)
        return Tree.assemble(tree_id, nodes, clients)

    def _grow_node(self, tree_id, path, members, known_stats, root_order, nodes) -> None:
        members = {s: idx for s, idx in members.items() if idx.size}
        depth = len(path)
        if known_stats is not None:
            # child whose summary came from the parent's evaluation
            if not self._splittable(known_stats, depth):
                nodes[path] = TreeNode(path, known_stats.as_array(), leaf_value(known_stats))
                return
        site_stats = {
            s: SuffStats.from_array(self.task, self.rows[idx].sum(axis=0)) for s, idx in sorted(members.items())
        }
        stats = SuffStats.from_array(self.task, self._pool({s: st.as_array() for s, st in site_stats.items()}))
        node = TreeNode(path, stats.as_array(), leaf_value(stats))
        nodes[path] = node
        if not self._splittable(stats, depth):
            return

        features = feature_subset(self.d, self.mtry, self.config.seed, tree_id, path)
        parent = stats.as_array()
        decisions, known = [], {}
        for item in self._set_candidates(features, members, site_stats, root_order):
            known[item.candidate] = item.known
            left = item.pooled_left(self.task.width)[None, :]
            gains = gain_array(self.task, parent, left, self.impurity)
            decisions.extend(decisions_from_arrays(self.task, [item.candidate], parent, left, gains))
        for feature in features:
            if feature in self.categorical:
                continue
            thresholds, left = self._numeric(feature, members, stats.n)
            if thresholds.size == 0:
                continue
            gains = gain_array(self.task, parent, left, self.impurity)
            candidates = [SplitCandidate.numeric(feature, t) for t in thresholds]
            decisions.extend(decisions_from_arrays(self.task, candidates, parent, left, gains))

        best = select_best(decisions, self.config.min_leaf, self.config.min_impurity_decrease)
        if best is None:
            return
        node.split, node.gain, node.known = best.candidate, best.gain, known.get(best.candidate, ())
        left_members, right_members = {}, {}
        for site, idx in members.items():
            go = best.candidate.goes_left(self.X[idx], site=site)
            left_members[site], right_members[site] = idx[go], idx[~go]
        self._grow_node(tree_id, path + "L", left_members, best.left_stats, root_order, nodes)
        self._grow_node(tree_id, path + "R", right_members, best.right_stats, root_order, nodes)


def fit_centralized(
    X,
    y,
    sites,
    config: ForestConfig,
    rule: str = "midpoint",
    h_encoding: HEncoding = "root",
    method: str = "centralized",
) -> Forest:
    """Random forest on pooled rows with the federated seed schedule"""
    grower = CentralizedGrower(X, y, sites, config, rule=rule, h_encoding=h_encoding)
    tree_ids = range(config.trees)
    if config.n_jobs == 1:
        trees = [grower.grow(t) for t in tree_ids]
    else:
        trees = Parallel(n_jobs=config.n_jobs, prefer="threads")(delayed(grower.grow)(t) for t in tree_ids)
    logger.debug("centralized %s: %d trees, %d leaves", rule, len(trees), sum(t.leaf_count for t in trees))
    return Forest(
        config.task,
        config.impurity_kind,
        grower.d,
        trees,
        method=method,
        sites=grower.site_ids,
        config=dict(config.model_dump(mode="json"), candidate_rule=rule, h_encoding=h_encoding),
    )


def fit_cart(
    X, y, max_depth: int, min_leaf: int = 1, task: Optional[TaskKind] = None, seed: int = 0
) -> Forest:
    """Single greedy tree on all rows and all features, no bootstrap"""
    X = np.asarray(X, dtype=np.float64)
    config = ForestConfig(
        trees=1,
        max_depth=max_depth,
        min_leaf=min_leaf,
        mtry=X.shape[1],
        seed=seed,
        task=task or TaskKind.regression(),
        bootstrap=False,
    )
    return fit_centralized(X, y, np.zeros(X.shape[0], dtype=np.int64), config, method="centralized_cart")


# ─── Local learning / ensembling ─────────────────────────────────────────────

def _fit_local_forest(shard: ClientShard, config: ForestConfig) -> Forest:
    local = config.model_copy(update={"include_h": False, "client_subsample_ratio": 1.0})
    sites = np.full(shard.n_rows, shard.client_id, dtype=np.int64)
    return fit_centralized(shard.features, shard.outcomes, sites, local, method="local_forest")


@dataclass
class LocalModels:
    """One forest per site; each row is answered by the forest of its own site"""
    task: TaskKind
    models: Dict[int, Forest]

    @property
    def sites(self) -> List[int]:
        return sorted(self.models)

    def predict(self, X, sites=None, site_fallback: bool = True) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        site_arr = (
            np.full(X.shape[0], NO_SITE, dtype=np.int64)
            if sites is None
            else np.array([NO_SITE if s is None else int(s) for s in sites], dtype=np.int64)
        )
        out = np.zeros(X.shape[0])
        unknown = ~np.isin(site_arr, self.sites)
        if np.any(unknown):
            if not site_fallback:
                raise MissingSiteError("local learning needs a known site id for every row")
            # rows without a usable site get the uniform ensemble of all local forests
            out[unknown] = _ensemble(self.task, [self.models[s] for s in self.sites]).predict(X[unknown])
        for site, model in self.models.items():
            mask = site_arr == site
            if np.any(mask):
                out[mask] = model.predict(X[mask])
        return out


def _ensemble(task: TaskKind, forests: Sequence[Forest]) -> Forest:
    trees = []
    for forest in forests:
        for tree in forest.trees:
            trees.append(Tree(len(trees), tree.nodes, tree.clients))
    first = forests[0]
    return Forest(
        task,
        first.impurity,
        first.n_features,
        trees,
        method="local_ensemble",
        sites=sorted({s for f in forests for s in f.sites}),
        config=first.config,
    )


def fit_local(shards: Sequence[ClientShard], config: ForestConfig) -> LocalModels:
    """Per-site forests trained on that site's rows only"""
    if not shards:
        raise DataError("no client shards")
    models = {s.client_id: _fit_local_forest(s, config) for s in sorted(shards, key=lambda s: s.client_id)}
    return LocalModels(config.task, models)


def fit_local_ensemble(shards: Sequence[ClientShard], config: ForestConfig) -> Forest:
    """All local trees pooled into one forest with uniform per-tree weight"""
    local = fit_local(shards, config)
    return _ensemble(config.task, [local.models[s] for s in local.sites])


def fit_fed_histogram(shards: Sequence[ClientShard], config: ForestConfig, bin_count: Optional[int] = None) -> Forest:
    """Federated forest whose candidates are equal-width bin edges over the global range"""
    histogram = ForestConfig.model_validate({
        **config.model_dump(),
        "mode": "exact_quantiles",
        "candidate_rule": "histogram",
        "include_h": False,
        "bin_count": config.bin_count if bin_count is None else bin_count,
    })
    return fit(shards, histogram, method="fed_histogram")


def fit_baseline(kind: BaselineKind, shards: Sequence[ClientShard], config: ForestConfig):
    if kind == "centralized_rf":
        X, y, sites = pool_shards(shards)
        return fit_centralized(X, y, sites, config, method="centralized_rf")
    if kind == "centralized_cart":
        X, y, _ = pool_shards(shards)
        return fit_cart(X, y, config.max_depth, config.min_leaf, config.task, config.seed)
    if kind == "local_learning":
        return fit_local(shards, config)
    if kind == "local_ensemble":
        return fit_local_ensemble(shards, config)
    if kind == "fed_histogram":
        return fit_fed_histogram(shards, config)
    raise ValueError(f"unknown baseline '{kind}'")
