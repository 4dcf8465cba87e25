"""
Heterogeneity diagnostics.
Scores how far a federation is from the homogeneous case before a training mode is chosen:
a covariate-shift score that treats the client index as the target, and an outcome-shift
score that compares forests trained with and without the client indicator.
The covariate score only ever moves sketches and left counts across the boundary.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, r2_score, roc_auc_score

from client import ClientShard, FederatedClient
from errors import ConfigError, DataError
from federation import CommLedger, FederationServer, NodeTask
from forest import fit
from impurity import gain_array
from models import CandidateBatch, DiagnosticsReport, ForestConfig, LedgerSummary, TaskKind
from seeding import rng_for
from sketch import QuantileSketch, candidate_thresholds, pool_sketches

logger = logging.getLogger(__name__)

MIN_BAND = 0.01


@dataclass
class CovariateShiftScore:
    max_root_gain: float
    site_auc: float
    per_feature_gains: List[float]
    ledger: LedgerSummary = field(default_factory=LedgerSummary)


@dataclass
class OutcomeShiftScore:
    delta: float
    band: float
    metric_name: str
    deltas: List[float] = field(default_factory=list)


# ─────────────────────────────────────────────
# Shard helpers
# ─────────────────────────────────────────────

def _require_sites(shards: Sequence[ClientShard]) -> List[ClientShard]:
    shards = sorted(shards, key=lambda s: s.client_id)
    if len(shards) < 2:
        raise ConfigError("heterogeneity diagnostics need at least two clients")
    return shards


def site_labelled(shards: Sequence[ClientShard]) -> Tuple[List[ClientShard], TaskKind]:
    """Copies of the shards whose outcome is the client's position 0..K-1"""
    shards = sorted(shards, key=lambda s: s.client_id)
    relabelled = [
        ClientShard(s.client_id, s.features, np.full(s.n_rows, k, dtype=np.int64))
        for k, s in enumerate(shards)
    ]
    return relabelled, TaskKind.classification(len(shards))


def split_shards(
    shards: Sequence[ClientShard], fraction: float, seed: int, repeat: int = 0
) -> Tuple[List[ClientShard], List[ClientShard]]:
    """Per-client train/validation split; every client keeps rows on both sides"""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("validation fraction must lie in (0, 1)")
    train, valid = [], []
    for shard in sorted(shards, key=lambda s: s.client_id):
        if shard.n_rows < 2:
            raise DataError(f"client {shard.client_id} has too few rows for a validation split")
        n_valid = min(shard.n_rows - 1, max(1, int(round(shard.n_rows * fraction))))
        order = rng_for(seed, "split", repeat, shard.client_id).permutation(shard.n_rows)
        held, kept = np.sort(order[:n_valid]), np.sort(order[n_valid:])
        train.append(ClientShard(shard.client_id, shard.features[kept], shard.outcomes[kept]))
        valid.append(ClientShard(shard.client_id, shard.features[held], shard.outcomes[held]))
    return train, valid


def _stack(shards: Sequence[ClientShard]):
    X = np.vstack([s.features for s in shards])
    y = np.concatenate([s.outcomes for s in shards])
    sites = np.concatenate([np.full(s.n_rows, s.client_id, dtype=np.int64) for s in shards])
    return X, y, sites


# ─────────────────────────────────────────────
# Covariate shift
# ─────────────────────────────────────────────

def root_site_gains(
    shards: Sequence[ClientShard], sketch_size: int, seed: int = 0
) -> Tuple[List[float], CommLedger]:
    """Best site-Gini gain per feature at the root, from sketches and left counts only"""
    labelled, task = site_labelled(_require_sites(shards))
    d = labelled[0].n_features
    config = ForestConfig(
        trees=1, mtry=d, sketch_size=sketch_size, seed=seed, task=task, bootstrap=False
    )
    server = FederationServer([FederatedClient(s) for s in labelled], config, d)
    replies = server.initialize()
    counts = {cid: reply.n_rows for cid, reply in replies.items()}
    root = NodeTask(0, "", tuple(range(d)))
    sketches = server.collect_sketches([root]).get(root.key, {})

    features, thresholds = [], []
    for j in range(d):
        parts = []
        for cid in sorted(sketches):
            fs = next(f for f in sketches[cid].features if f.feature == j)
            parts.append(QuantileSketch(tuple(fs.breakpoints), counts[cid]))
        for t in candidate_thresholds(pool_sketches(parts), sketch_size):
            features.append(j)
            thresholds.append(float(t))
    batch = CandidateBatch(tree_id=0, path="", features=features, thresholds=thresholds)
    replies = server.collect_left_counts({root.key: batch}).get(root.key, {})

    # K-category summaries: position k holds client k's count
    ids = sorted(counts)
    parent = np.zeros(task.width)
    left = np.zeros((len(thresholds), task.width))
    for k, cid in enumerate(ids):
        parent[k] = counts[cid]
        if cid in replies:
            left[:, k] = np.asarray(replies[cid].left_counts, dtype=np.float64)
    gains = gain_array(task, parent, left, "gini") if thresholds else np.zeros(0)
    gains = np.where(np.isnan(gains), 0.0, np.maximum(gains, 0.0))
    per_feature = [0.0] * d
    for j, g in zip(features, gains):
        per_feature[j] = max(per_feature[j], float(g))
    return per_feature, server.ledger


def site_classifier_auc(
    shards: Sequence[ClientShard],
    sketch_size: int,
    seed: int = 0,
    trees: int = 25,
    max_depth: int = 4,
    min_leaf: int = 5,
    validation_fraction: float = 0.3,
) -> float:
    """Held-out one-vs-rest AUC of a federated forest predicting the client index"""
    labelled, task = site_labelled(_require_sites(shards))
    train, valid = split_shards(labelled, validation_fraction, seed)
    config = ForestConfig(
        trees=trees, max_depth=max_depth, min_leaf=min_leaf, mtry="sqrt",
        sketch_size=sketch_size, seed=seed, task=task,
    )
    forest = fit(train, config, method="site_classifier")
    X, y, _ = _stack(valid)
    shares = forest.vote_shares(X)
    if task.num_categories == 2:
        return float(roc_auc_score(y, shares[:, 1]))
    return float(roc_auc_score(y, shares, multi_class="ovr", average="macro", labels=list(range(task.num_categories))))


def covariate_shift_score(
    shards: Sequence[ClientShard],
    sketch_size: int = 32,
    seed: int = 0,
    site_trees: int = 25,
    site_depth: int = 4,
    validation_fraction: float = 0.3,
) -> CovariateShiftScore:
    per_feature, ledger = root_site_gains(shards, sketch_size, seed)
    auc = site_classifier_auc(
        shards, sketch_size, seed, trees=site_trees, max_depth=site_depth,
        validation_fraction=validation_fraction,
    )
    score = CovariateShiftScore(max(per_feature) if per_feature else 0.0, auc, per_feature, ledger.summary())
    logger.info("covariate shift: max root gain %.4g, site AUC %.4f", score.max_root_gain, auc)
    return score


# ─────────────────────────────────────────────
# Outcome shift
# ─────────────────────────────────────────────

def _validation_metric(task: TaskKind, y_true, y_pred) -> float:
    if task.is_regression:
        return float(r2_score(y_true, y_pred))
    return float(accuracy_score(np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)))


def outcome_shift_score(
    shards: Sequence[ClientShard],
    config: ForestConfig,
    seed: int = 0,
    validation_fraction: float = 0.3,
    repeats: int = 3,
) -> OutcomeShiftScore:
    """Validation gain of the (X, H) forest over the X-only forest, averaged over splits"""
    shards = _require_sites(shards)
    if repeats < 1:
        raise ConfigError("diagnostics need at least one repeat")
    without_h = ForestConfig.model_validate({**config.model_dump(), "include_h": False})
    with_h = ForestConfig.model_validate({**config.model_dump(), "include_h": True})
    deltas = []
    for repeat in range(repeats):
        train, valid = split_shards(shards, validation_fraction, seed, repeat)
        X, y, sites = _stack(valid)
        plain = fit(train, without_h).predict(X, sites)
        augmented = fit(train, with_h).predict(X, sites)
        deltas.append(
            _validation_metric(config.task, y, augmented) - _validation_metric(config.task, y, plain)
        )
    delta = float(np.mean(deltas))
    se = float(np.std(deltas, ddof=1) / np.sqrt(len(deltas))) if len(deltas) > 1 else 0.0
    band = max(2.0 * se, MIN_BAND)
    metric = "r2" if config.task.is_regression else "accuracy"
    logger.info("outcome shift: delta %.4g (%s), band %.4g", delta, metric, band)
    return OutcomeShiftScore(delta, band, metric, deltas)


# ─────────────────────────────────────────────
# Report
# ─────────────────────────────────────────────

def recommend(site_auc: float, delta: float, band: float, auc_threshold: float = 0.6) -> str:
    """fast_mode only when neither covariates nor outcomes separate the clients"""
    if site_auc < auc_threshold and delta < band:
        return "fast_mode"
    return "robust_mode"


def diagnose(
    shards: Sequence[ClientShard],
    config: ForestConfig,
    site_trees: int = 25,
    site_depth: int = 4,
    validation_fraction: float = 0.3,
    repeats: int = 3,
    auc_threshold: float = 0.6,
    seed: Optional[int] = None,
) -> DiagnosticsReport:
    seed = config.seed if seed is None else seed
    covariate = covariate_shift_score(
        shards, config.sketch_size, seed, site_trees, site_depth, validation_fraction
    )
    outcome = outcome_shift_score(shards, config, seed, validation_fraction, repeats)
    return DiagnosticsReport(
        covariate_shift_gain=covariate.max_root_gain,
        site_auc=covariate.site_auc,
        per_feature_site_gains=covariate.per_feature_gains,
        outcome_shift_delta=outcome.delta,
        outcome_shift_band=outcome.band,
        metric_name=outcome.metric_name,
        recommendation=recommend(covariate.site_auc, outcome.delta, outcome.band, auc_threshold),
        scalars_up=covariate.ledger.scalars_up,
    )
