"""
Protocol driver: seed schedule, round budget, ledger reconciliation and the raw-data firewall
"""
import numpy as np
import pytest
from scipy.stats import chisquare

from client import ClientShard, FederatedClient
from conftest import make_shards
from errors import ProtocolInconsistencyError
from federation import (
    FederationServer,
    ledger_expected,
    stratified_bootstrap,
    subsample_clients,
)
from forest import fit
from models import (
    EvalReply,
    EvalRequest,
    ForestConfig,
    InitReply,
    ShortlistReply,
    SketchReply,
    TaskEval,
)

ALLOWED_FIELDS = {
    InitReply: {"client_id", "n_rows", "n_features", "ranges"},
    SketchReply: {"client_id", "tasks"},
    ShortlistReply: {"client_id", "tasks"},
    EvalReply: {"client_id", "tasks"},
    TaskEval: {"tree_id", "path", "node_stats", "left_stats", "local_gains", "left_counts"},
}


# ─── seed schedule ───────────────────────────────────────────────────────────

def test_bootstrap_of_one_row():
    draws = stratified_bootstrap(1, range(5), seed=3, client_id=0)
    assert all(d.tolist() == [0] for d in draws.values())


def test_bootstrap_size_and_determinism():
    a = stratified_bootstrap(37, range(4), seed=11, client_id=2)
    b = stratified_bootstrap(37, [3, 2, 1, 0], seed=11, client_id=2)
    for tree_id in range(4):
        assert a[tree_id].size == 37
        np.testing.assert_array_equal(a[tree_id], b[tree_id])


def test_client_subsample_sizes():
    assert subsample_clients(10, 1.0, seed=0, tree_id=0) == list(range(10))
    assert all(len(subsample_clients(10, 0.3, seed=0, tree_id=t)) == 3 for t in range(20))


def test_client_subsets_are_uniform_over_trees():
    counts = np.zeros(10)
    for tree_id in range(1000):
        for k in subsample_clients(10, 0.3, seed=5, tree_id=tree_id):
            counts[k] += 1
    assert chisquare(counts).pvalue > 1e-3


# ─── ledger closed form ──────────────────────────────────────────────────────

def test_ledger_closed_form():
    assert ledger_expected("exact_quantiles", 20, 32, 3, 20 * 31) == 2523


def test_doubling_b_doubles_the_sketch_term():
    base = ledger_expected("exact_quantiles", 20, 32, 3, 0) - 3
    doubled = ledger_expected("exact_quantiles", 20, 64, 3, 0) - 3
    assert doubled - 20 == 2 * (base - 20)


@pytest.mark.parametrize("mode", ["exact_quantiles", "avgimp_topl"])
def test_live_ledger_reconciles_with_closed_form(mode):
    shards = make_shards(n_clients=3, n_rows=60, d=4, seed=2)
    config = ForestConfig(
        trees=2, max_depth=3, min_leaf=3, mtry=4, sketch_size=8, shortlist_size=2,
        mode=mode, dedup_candidates=False, seed=4,
    )
    forest = fit(shards, config)
    ledger = forest.comm_ledger
    checked = 0
    for row in ledger.rows.values():
        if row.phase != "eval":
            continue
        phases = ledger.client_rows(row.tree_id, row.path)[row.client_id]
        if mode == "exact_quantiles":
            features = phases["sketch"].features
            assert row.candidates == features * (config.sketch_size - 1)
            up = phases["sketch"].scalars_up + row.scalars_up
            assert up == ledger_expected(mode, features, config.sketch_size, 3, row.candidates)
        else:
            shortlisted = phases["sketch"].features
            reported = (phases["shortlist"].scalars_up - 3) // 2
            assert row.candidates == shortlisted * (config.sketch_size - 1)
            up = phases["shortlist"].scalars_up + phases["sketch"].scalars_up + row.scalars_up
            assert up == ledger_expected(mode, shortlisted, config.sketch_size, 3, row.candidates, reported)
        checked += 1
    assert checked > 0


# ─── round budget ────────────────────────────────────────────────────────────

@pytest.mark.parametrize(
    "mode, rule, per_level",
    [
        ("exact_quantiles", "quantile", 2),
        ("exact_quantiles", "histogram", 1),
        ("avgimp_topl", "quantile", 3),
    ],
)
@pytest.mark.parametrize("trees", [1, 5])
def test_rounds_depend_on_depth_not_on_tree_count(mode, rule, per_level, trees):
    config = ForestConfig(trees=trees, max_depth=3, min_leaf=2, mtry=3, sketch_size=8, mode=mode, candidate_rule=rule)
    forest = fit(make_shards(seed=9), config)
    # init round plus per-level rounds plus at most one summary round
    assert forest.ledger.rounds <= per_level * config.max_depth + 2


def test_constant_outcome_is_one_round_of_sketches():
    shards = [ClientShard(k, np.random.default_rng(k).normal(size=(20, 2)), np.full(20, 4.0)) for k in range(2)]
    forest = fit(shards, ForestConfig(trees=2, mtry=2, sketch_size=4))
    assert all(len(t.nodes) == 1 and t.nodes[0].value == 4.0 for t in forest.trees)
    assert forest.ledger.per_phase["sketch"]["rounds"] == 1
    assert "eval" not in forest.ledger.per_phase


# ─── firewall and consistency ────────────────────────────────────────────────

@pytest.mark.parametrize("message, fields", sorted(ALLOWED_FIELDS.items(), key=lambda item: item[0].__name__))
def test_reply_schemas_hold_only_summaries(message, fields):
    assert set(message.model_fields) == fields


class LyingClient(FederatedClient):
    """Reports a left child larger than the node it sits in"""

    def handle_eval(self, request: EvalRequest) -> EvalReply:
        reply = super().handle_eval(request)
        for task in reply.tasks:
            task.left_stats = [[row[0] + 1000.0] + row[1:] for row in task.left_stats]
        return reply


def test_inconsistent_client_reply_is_detected():
    shards = make_shards(n_clients=2, seed=1)
    config = ForestConfig(trees=1, max_depth=2, min_leaf=2, mtry=3, sketch_size=4)
    clients = [FederatedClient(shards[0]), LyingClient(shards[1])]
    server = FederationServer(clients, config, num_features=3)
    server.initialize()
    with pytest.raises(ProtocolInconsistencyError) as info:
        server.run_level(server.root_tasks(lambda t, p: [0, 1, 2]))
    assert info.value.client_id == 1


def test_feature_count_mismatch_is_detected():
    config = ForestConfig(trees=1, mtry=2)
    server = FederationServer([FederatedClient(s) for s in make_shards(n_clients=2, d=3)], config, num_features=2)
    with pytest.raises(ProtocolInconsistencyError):
        server.initialize()


def test_thread_pool_gives_the_same_forest():
    config = ForestConfig(trees=3, max_depth=3, min_leaf=2, mtry=2, sketch_size=8, seed=1)
    serial = fit(make_shards(seed=5), config)
    threaded = fit(make_shards(seed=5), config.model_copy(update={"n_jobs": 3}))
    assert serial.to_document().trees == threaded.to_document().trees
    assert serial.ledger == threaded.ledger
