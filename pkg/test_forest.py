"""
Forest growth, prediction and the model document
"""
import json

import numpy as np
import pytest

from client import ClientShard
from conftest import make_shards
from errors import DataError, MissingSiteError, ModelFormatError
from forest import Forest, Tree, TreeNode, fit
from models import ForestConfig, TaskKind
from split_engine import SplitCandidate

REG = TaskKind.regression()


def site_effect_shards(n_rows=30, seed=0):
    rng = np.random.default_rng(seed)
    return [ClientShard(k, rng.normal(size=(n_rows, 2)), 20.0 * k + 0.1 * rng.normal(size=n_rows)) for k in range(2)]


def stump(left_count=3.0, right_count=5.0) -> Forest:
    nodes = {
        "": TreeNode("", np.array([left_count + right_count, 0.0, 0.0]), 0.0, SplitCandidate.client_set([0]), 1.0, (0, 1)),
        "L": TreeNode("L", np.array([left_count, left_count, left_count]), 1.0),
        "R": TreeNode("R", np.array([right_count, 2 * right_count, 4 * right_count]), 2.0),
    }
    return Forest(REG, "variance", 1, [Tree.assemble(0, nodes, [0, 1])], sites=[0, 1])


# ─── growth ──────────────────────────────────────────────────────────────────

def test_fully_grown_tree_memorizes_a_single_client():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(40, 3))
    y = rng.normal(size=40)
    config = ForestConfig(trees=1, max_depth=64, min_leaf=1, mtry=3, bootstrap=False)
    forest = fit([ClientShard(0, X, y)], config)
    np.testing.assert_allclose(forest.predict(X, np.zeros(40, dtype=int)), y, rtol=0, atol=1e-12)


def test_constant_outcome_gives_single_leaves():
    shards = [ClientShard(k, np.random.default_rng(k).normal(size=(25, 3)), np.full(25, -1.5)) for k in range(3)]
    forest = fit(shards, ForestConfig(trees=4, mtry=2))
    assert all(len(t.nodes) == 1 for t in forest.trees)
    np.testing.assert_array_equal(forest.predict(np.zeros((5, 3))), np.full(5, -1.5))


def test_depth_is_bounded(shards, small_config):
    forest = fit(shards, small_config)
    assert max(t.depth for t in forest.trees) <= small_config.max_depth
    for tree in forest.trees:
        for node in tree.nodes:
            if not node.is_leaf:
                assert node.gain > 0


def test_growth_is_deterministic(small_config):
    a = fit(make_shards(seed=3), small_config)
    b = fit(make_shards(seed=3), small_config)
    assert a.to_json() == b.to_json()


def test_mtry_above_d_is_a_config_error(shards):
    from errors import ConfigError

    with pytest.raises(ConfigError):
        fit(shards, ForestConfig(trees=1, mtry=10))


def test_client_subsampling_records_tree_clients():
    forest = fit(make_shards(n_clients=4, seed=6), ForestConfig(trees=6, mtry=2, client_subsample_ratio=0.5))
    assert all(len(t.clients) == 2 for t in forest.trees)


def test_categorical_feature_is_split_by_category_sets():
    rng = np.random.default_rng(8)
    shards = []
    for k in range(2):
        codes = rng.integers(0, 4, size=60)
        X = np.column_stack([codes, rng.normal(size=60)])
        y = np.where(np.isin(codes, [1, 3]), 5.0, 0.0) + 0.1 * rng.normal(size=60)
        shards.append(ClientShard(k, X, y))
    config = ForestConfig(trees=1, max_depth=1, min_leaf=2, mtry=2, bootstrap=False, categorical_features=[0])
    root = fit(shards, config).trees[0].nodes[0]
    assert root.split.kind == "categorical"
    assert set(root.split.left_set) in ({0, 2}, {1, 3})


def test_classification_votes(shards):
    labelled = [ClientShard(s.client_id, s.features, (s.outcomes > 1.0).astype(int)) for s in shards]
    config = ForestConfig(trees=5, max_depth=3, mtry=2, task=TaskKind.classification(2))
    forest = fit(labelled, config)
    X = np.vstack([s.features for s in labelled])
    shares = forest.vote_shares(X)
    np.testing.assert_allclose(shares.sum(axis=1), 1.0)
    assert set(np.unique(forest.predict(X))) <= {0.0, 1.0}


# ─── prediction ──────────────────────────────────────────────────────────────

def test_identical_trees_predict_like_one_tree(shards, small_config):
    forest = fit(shards, small_config.model_copy(update={"trees": 1}))
    tripled = Forest(forest.task, forest.impurity, forest.n_features, forest.trees * 3)
    X = np.random.default_rng(0).normal(size=(20, 3))
    np.testing.assert_allclose(tripled.predict(X), forest.predict(X))


def test_h_split_needs_a_site_without_fallback():
    shards = site_effect_shards()
    forest = fit(shards, ForestConfig(trees=2, mtry=2, include_h=True, max_depth=2))
    assert forest.trees[0].nodes[0].split.kind == "client_set"
    X = np.zeros((4, 2))
    with pytest.raises(MissingSiteError):
        forest.predict(X, site_fallback=False)
    predictions = forest.predict(X, [0, 0, 1, 1])
    assert predictions[2] - predictions[0] > 15


def test_unseen_site_follows_the_larger_child():
    forest = stump()
    X = np.zeros((3, 1))
    np.testing.assert_array_equal(forest.predict(X, [0, 7, None]), [1.0, 2.0, 2.0])


def test_equal_children_send_unseen_sites_left():
    forest = stump(left_count=4.0, right_count=4.0)
    assert forest.predict(np.zeros((1, 1)), [9])[0] == 1.0


def test_wrong_feature_count_is_a_data_error(shards, small_config):
    forest = fit(shards, small_config)
    with pytest.raises(DataError):
        forest.predict(np.zeros((2, 5)))


# ─── serialization ───────────────────────────────────────────────────────────

def test_document_round_trip(tmp_path, shards, small_config):
    forest = fit(shards, small_config.model_copy(update={"include_h": True}))
    path = tmp_path / "model.json"
    forest.save(path)
    loaded = Forest.load(path)
    assert loaded.to_json() == forest.to_json()
    query_rows = np.random.default_rng(1).normal(scale=2.0, size=(1000, 3))
    sites = np.random.default_rng(2).integers(0, 3, size=1000)
    np.testing.assert_array_equal(loaded.predict(query_rows, sites), forest.predict(query_rows, sites))


def test_classification_round_trip_keeps_integer_leaves(shards):
    labelled = [ClientShard(s.client_id, s.features, (s.outcomes > 0).astype(int)) for s in shards]
    forest = fit(labelled, ForestConfig(trees=2, max_depth=2, mtry=2, task=TaskKind.classification(2)))
    loaded = Forest.from_json(forest.to_json())
    assert all(isinstance(n.value, int) for t in loaded.trees for n in t.nodes)


def test_document_is_versioned(shards, small_config):
    doc = fit(shards, small_config).to_document()
    assert doc.format == "fedforest-model"
    assert doc.version == 1


def test_broken_documents_are_rejected(tmp_path, shards, small_config):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ModelFormatError):
        Forest.load(path)
    with pytest.raises(ModelFormatError):
        Forest.from_json('{"format": "something-else", "trees": []}')
    future = json.loads(fit(shards, small_config).to_json())
    future["version"] = 2
    with pytest.raises(ModelFormatError):
        Forest.from_json(json.dumps(future))


def test_site_map_survives_the_document(shards, small_config):
    forest = fit(shards, small_config)
    forest.site_map = {4: 0, 8: 1, 15: 2}
    loaded = Forest.from_json(forest.to_json())
    assert loaded.site_map == {4: 0, 8: 1, 15: 2}
    np.testing.assert_array_equal(loaded.site_indices([15, 4, 9, None]), [2, 0, -1, -1])
    assert stump().site_indices([0, 1]) == [0, 1]
