import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_tree
from oracles import brute_force_shapley
from texboost.explain import (attribution_to_dict, global_importance, path_to_dict, replay_margin,
                              shap_values, trace_paths, tree_shap_matrix, tree_to_dot)
from texboost.gbdt import BinMapper, DecisionTree, Ensemble, GbdtConfig, train_matrix


def _stump_ensemble(base=0.0, lr=1.0):
    tree = DecisionTree(feature=[0, -1, -1], threshold=[0.5, np.nan, np.nan], bin_threshold=[0, -1, -1],
                        left=[1, -1, -1], right=[2, -1, -1], value=[0.0, -1.0, 1.0],
                        cover=[2.0, 1.0, 1.0], gain=[1.0, 0.0, 0.0])
    mapper = BinMapper((np.array([0.5]), np.array([])))
    return Ensemble(base, lr, (tree,), mapper, ("split", "other"))


def test_stump_path_goes_left():
    (path,) = trace_paths(_stump_ensemble(), {"split": 0.2, "other": 9.0})
    (step,) = path.steps
    assert step.direction == "left"
    assert (step.feature_name, step.threshold, step.observed_value) == ("split", 0.5, 0.2)
    assert step.node_train_fraction == 1.0
    assert path.leaf_value == -1.0
    assert path_to_dict(path)["steps"][0]["direction"] == "left"


def test_stump_shap_routes_right():
    attr = shap_values(_stump_ensemble(), {"split": 0.9, "other": 0.0})
    assert attr.base_value == 0.0
    assert attr.as_dict() == {"split": 1.0, "other": 0.0}
    doc = attribution_to_dict(attr, probability_scale=True)
    assert doc["margin"] == 1.0
    assert doc["base_probability"] == 0.5


def test_single_leaf_tree_attributes_nothing():
    leaf = DecisionTree(feature=[-1], threshold=[np.nan], bin_threshold=[-1], left=[-1], right=[-1],
                        value=[0.7], cover=[10.0], gain=[0.0])
    ens = Ensemble(0.0, 1.0, (leaf,), BinMapper((np.array([]),)), ("f",))
    attr = shap_values(ens, {"f": 3.0})
    assert attr.contributions.tolist() == [0.0]
    assert attr.base_value == 0.7


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 8))
def test_tree_shap_matches_subset_enumeration(seed, n_features):
    rng = np.random.default_rng(seed)
    tree = random_tree(rng, n_features, max_leaves=10)
    X = rng.normal(size=(5, n_features))
    phi = tree_shap_matrix(tree, X, n_features)
    for x, row in zip(X, phi):
        np.testing.assert_allclose(row, brute_force_shapley(tree, x, n_features), rtol=0, atol=1e-9)
        assert row.sum() + tree.expected_value() == pytest.approx(tree.predict(x[None])[0], abs=1e-9)


def _fitted(n_iter=30, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, 5))
    y = (X[:, 1] - X[:, 3] + rng.normal(scale=0.4, size=120) > 0).astype(int)
    names = [f"f{k}" for k in range(5)]
    return train_matrix(X, y, names, GbdtConfig(num_iterations=n_iter, min_samples_leaf=3)), X, names


def test_local_accuracy_on_trained_model():
    ens, X, names = _fitted()
    for x in X[:20]:
        attr = shap_values(ens, dict(zip(names, x)))
        assert attr.margin == pytest.approx(ens.margin_matrix(x[None])[0], abs=1e-9)


def test_replay_reproduces_margin_exactly():
    ens, X, names = _fitted()
    for x in X[:30]:
        paths = trace_paths(ens, dict(zip(names, x)))
        assert len(paths) == len(ens.trees)
        assert replay_margin(ens, paths) == ens.margin_matrix(x[None])[0]
        for path, tree in zip(paths, ens.trees):
            fractions = [s.node_train_fraction for s in path.steps]
            assert fractions[0] == 1.0 and all(np.diff(fractions) <= 0)
            assert path.leaf_value == tree.value[path.leaf_node]


def test_importance_unused_features_are_zero():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(60, 4))
    y = (X[:, 2] > 0).astype(int)
    names = ["a", "b", "c", "d"]
    # a single stump can only use one feature
    ens = train_matrix(X, y, names, GbdtConfig(num_iterations=1, num_leaves=2))
    ranking = global_importance(ens, [dict(zip(names, x)) for x in X])
    assert ranking[0].feature_name == "c"
    assert ranking[0].mean_abs > 0
    assert all(fi.mean_abs == 0.0 for fi in ranking[1:])
    assert [fi.feature_name for fi in ranking[1:]] == ["a", "b", "d"]


def test_importance_invariant_to_duplication():
    ens, X, names = _fitted(n_iter=10)
    rows = [dict(zip(names, x)) for x in X]
    once = global_importance(ens, rows)
    twice = global_importance(ens, rows + rows)
    assert [fi.feature_name for fi in once] == [fi.feature_name for fi in twice]
    for a, b in zip(once, twice):
        assert a.mean_abs == pytest.approx(b.mean_abs, rel=1e-12)
        assert a.mean_abs_benign == pytest.approx(b.mean_abs_benign, rel=1e-12)


def test_dot_marks_path_edges():
    ens, X, names = _fitted(n_iter=2)
    (path, _) = trace_paths(ens, dict(zip(names, X[0])))
    dot = tree_to_dot(ens, 0, path)
    assert dot.startswith('digraph "tree_0" {')
    assert dot.count('color="orange"') == len(path.steps)
    assert "observed=" in dot
    assert dot.rstrip().endswith("}")
