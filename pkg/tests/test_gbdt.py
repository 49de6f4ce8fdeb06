import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import reference_mismatches, reference_tree
from texboost.gbdt import (BinMapper, DecisionTree, Ensemble, GbdtConfig, ModelFormatError,
                           build_bins, class_probabilities, compute_gradients, grow_tree,
                           init_base_score, load_model, log_loss, model_from_dict, model_to_dict,
                           predict_margin, predict_proba, save_model, sigmoid, train, train_matrix)
from texboost.texture import FeatureVector


def test_base_score():
    assert init_base_score([0, 1]) == 0.0
    assert init_base_score([1, 1, 0, 1]) == pytest.approx(math.log(3), abs=1e-15)
    with pytest.raises(ValueError):
        init_base_score([1, 1, 1])


def test_gradients():
    r, h = compute_gradients([1.0], [0.0])
    assert (r[0], h[0]) == (0.5, 0.25)
    r, h = compute_gradients([0.0], [800.0])
    assert r[0] == pytest.approx(-1.0) and h[0] == pytest.approx(0.0, abs=1e-300)
    r, _ = compute_gradients([0.5], [0.0])
    assert r[0] == 0.0


def test_sigmoid_is_stable():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    assert math.isfinite(log_loss([1, 0], [-1000.0, 1000.0]))


def test_bins_distinct_values():
    mapper = build_bins(np.array([[1.0], [1.0], [2.0], [2.0]]))
    assert mapper.thresholds[0].tolist() == [1.5]
    assert mapper.n_bins(0) == 2


def test_bins_constant_column():
    mapper = build_bins(np.full((5, 1), 3.0))
    assert mapper.thresholds[0].size == 0
    assert mapper.n_bins(0) == 1
    assert mapper.transform(np.array([[3.0], [-9.0]])).tolist() == [[0], [0]]


def test_bins_quantile_cap():
    col = np.random.default_rng(0).uniform(size=(1000, 1))
    mapper = build_bins(col, max_bin=512)
    assert mapper.n_bins(0) <= 512
    counts = np.bincount(mapper.transform(col)[:, 0], minlength=mapper.n_bins(0))
    assert counts.min() >= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=1, max_size=200), st.integers(2, 16))
def test_bins_nonempty_and_ordered(values, max_bin):
    col = np.array(values, dtype=float)[:, None]
    mapper = build_bins(col, max_bin)
    assert mapper.n_bins(0) <= max_bin
    binned = mapper.transform(col)[:, 0]
    assert np.bincount(binned, minlength=mapper.n_bins(0)).min() >= 1
    order = np.argsort(col[:, 0], kind="stable")
    assert np.all(np.diff(binned[order]) >= 0)


def test_bin_value_on_threshold_goes_low():
    mapper = BinMapper((np.array([1.5, 2.5]),))
    assert mapper.transform(np.array([[1.5], [1.6], [2.5], [9.0]]))[:, 0].tolist() == [0, 1, 1, 2]


def _stump_config(**kw):
    base = dict(num_iterations=1, learning_rate=1.0, num_leaves=2, min_samples_leaf=1, lambda_l2=1.0)
    base.update(kw)
    return GbdtConfig(**base)


def test_perfect_binary_split():
    X = np.array([[0.0], [0.0], [1.0], [1.0]])
    y = np.array([0, 0, 1, 1])
    r, h = compute_gradients(y, np.zeros(4))
    tree = grow_tree(X.astype(int), r, h, GbdtConfig(num_leaves=8, min_samples_leaf=1))
    assert tree.n_leaves == 2
    assert np.sign(tree.value[1]) == -np.sign(tree.value[2])
    assert tree.value[1] < 0


def test_pure_node_is_single_leaf():
    tree = grow_tree(np.arange(20)[:, None], np.zeros(20), np.full(20, 0.25), GbdtConfig())
    assert tree.n_nodes == 1 and tree.value[0] == 0.0


def test_leaf_budget_two():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 5, size=(40, 3))
    tree = grow_tree(X, rng.normal(size=40), np.full(40, 0.25), GbdtConfig(num_leaves=2))
    assert tree.n_leaves <= 2


def test_hand_computed_stump():
    # labels [0,0,1,1] on x=[1,2,3,4]; base 0, residuals -0.5,-0.5,0.5,0.5, hessians 0.25
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    ens = train_matrix(X, [0, 0, 1, 1], ["x"], _stump_config())
    assert ens.base_score == 0.0
    (tree,) = ens.trees
    assert tree.threshold[0] == 2.5
    # leaf value -1 / (0.5 + 1)
    assert tree.value[1] == pytest.approx(-2 / 3) and tree.value[2] == pytest.approx(2 / 3)
    assert tree.gain[0] == pytest.approx(2 * (1 / 1.5))
    assert predict_margin(ens, {"x": 4.0}) == ens.base_score + 1.0 * tree.value[2]
    assert predict_margin(ens, {"x": 2.5}) == tree.value[1]


def test_min_samples_leaf_respected():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 2))
    cfg = GbdtConfig(num_iterations=5, num_leaves=16, min_samples_leaf=7)
    ens = train_matrix(X, (X[:, 0] > 0).astype(int), ["a", "b"], cfg)
    for tree in ens.trees:
        assert tree.n_leaves <= 16
        assert tree.cover[tree.feature < 0].min() >= 7


def test_too_few_samples():
    with pytest.raises(ValueError):
        grow_tree(np.zeros((3, 1), dtype=int), np.zeros(3), np.ones(3), GbdtConfig(min_samples_leaf=2))


def test_config_validation():
    for bad in (dict(num_iterations=0), dict(learning_rate=0), dict(num_leaves=1), dict(max_bin=1),
                dict(min_samples_leaf=0), dict(lambda_l2=-1)):
        with pytest.raises(ValueError):
            GbdtConfig(**bad)


def test_default_hyperparameters():
    cfg = GbdtConfig()
    assert (cfg.num_iterations, cfg.learning_rate, cfg.num_leaves, cfg.max_bin) == (500, 0.05, 10, 512)


def test_separable_training_accuracy():
    X = np.linspace(-1, 1, 20)[:, None]
    y = (X[:, 0] > 0).astype(int)
    ens = train_matrix(X, y, ["x"], GbdtConfig(num_iterations=50, min_samples_leaf=1))
    assert np.all((sigmoid(ens.margin_matrix(X)) >= 0.5) == y.astype(bool))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_training_loss_non_increasing(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 60))
    X = rng.normal(size=(n, 3))
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    ens = train_matrix(X, y, ["a", "b", "c"], GbdtConfig(num_iterations=30, min_samples_leaf=2))
    losses = np.r_[log_loss(y, np.full(n, ens.base_score)), ens.training_loss]
    assert np.all(np.diff(losses) <= 1e-12)
    assert ens.training_loss[-1] == pytest.approx(log_loss(y, ens.margin_matrix(X)), abs=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_first_tree_matches_exhaustive_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 30))
    X = rng.integers(0, 6, size=(n, 3)).astype(float)
    y = rng.integers(0, 2, size=n)
    y[:2] = [0, 1]
    cfg = GbdtConfig(num_iterations=1, num_leaves=int(rng.integers(2, 7)), min_samples_leaf=2)
    ens = train_matrix(X, y, ["a", "b", "c"], cfg)
    r, h = compute_gradients(y, np.full(n, ens.base_score))
    ref = reference_tree(X, r, h, cfg.num_leaves, cfg.min_samples_leaf, cfg.lambda_l2)
    assert reference_mismatches(ens.trees[0], ref) == []


def _fitted(seed=0, n=80, n_iter=20):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(scale=0.5, size=n) > 0).astype(int)
    names = ["w", "x", "y", "z"]
    ens = train_matrix(X, y, names, GbdtConfig(num_iterations=n_iter, min_samples_leaf=3))
    return ens, X, y, names


def test_training_is_deterministic():
    a, *_ = _fitted()
    b, *_ = _fitted()
    assert model_to_dict(a) == model_to_dict(b)


def test_empty_ensemble_predicts_base_score():
    mapper = BinMapper((np.array([0.0]),))
    ens = Ensemble(0.3, 0.1, (), mapper, ("f",))
    assert predict_margin(ens, {"f": 1.0}) == 0.3


def test_name_based_routing():
    ens, X, _, names = _fitted()
    row = dict(zip(names, X[3]))
    shuffled = FeatureVector(tuple(reversed(names)), [row[n] for n in reversed(names)])
    assert predict_margin(ens, shuffled) == predict_margin(ens, row)
    assert predict_margin(ens, row) == ens.margin_matrix(X[3:4])[0]
    with pytest.raises(KeyError):
        predict_margin(ens, {"w": 1.0})
    with pytest.raises(ValueError):
        predict_margin(ens, dict(row, w=math.nan))


def test_probabilities():
    ens, X, _, names = _fitted()
    probs = class_probabilities(ens, dict(zip(names, X[0])))
    assert probs["benign"] + probs["malignant"] == pytest.approx(1.0, abs=1e-15)
    assert predict_proba(ens, dict(zip(names, X[0]))) == probs["malignant"]


@pytest.mark.parametrize("column, factor", [(0, 3.0), (2, 1e-4), (3, 250.0)])
def test_scaling_one_column_keeps_trees(column, factor):
    ens, X, y, names = _fitted()
    Xs = X.copy()
    Xs[:, column] *= factor
    scaled = train_matrix(Xs, y, names, GbdtConfig(num_iterations=20, min_samples_leaf=3))
    for a, b in zip(ens.trees, scaled.trees):
        assert np.array_equal(a.feature, b.feature)
        assert np.array_equal(a.bin_threshold, b.bin_threshold)
    assert np.allclose(scaled.margin_matrix(Xs), ens.margin_matrix(X), rtol=0, atol=1e-9)
    assert np.array_equal(scaled.bin_mapper.transform(Xs), ens.bin_mapper.transform(X))


def test_train_from_vectors():
    ens, X, y, names = _fitted()
    vecs = [FeatureVector(tuple(names), row) for row in X]
    again = train(vecs, y, GbdtConfig(num_iterations=20, min_samples_leaf=3))
    assert model_to_dict(again) == model_to_dict(ens)


def test_round_trip_is_bit_exact(tmp_path):
    ens, X, _, _ = _fitted()
    path = tmp_path / "m.json"
    save_model(ens, path)
    back = load_model(path)
    probe = np.random.default_rng(5).normal(scale=2, size=(100, 4))
    assert np.array_equal(back.margin_matrix(probe), ens.margin_matrix(probe))
    assert back.base_score == ens.base_score


def test_wrong_schema_version(tmp_path):
    ens, *_ = _fitted(n_iter=2)
    doc = model_to_dict(ens)
    doc["schema_version"] = 99
    with pytest.raises(ModelFormatError, match="schema_version"):
        model_from_dict(doc)


def test_truncated_file(tmp_path):
    ens, *_ = _fitted(n_iter=2)
    path = tmp_path / "m.json"
    save_model(ens, path)
    path.write_text(path.read_text()[:50])
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_corrupt_tree_links():
    ens, *_ = _fitted(n_iter=1)
    doc = json.loads(json.dumps(model_to_dict(ens)))
    node = next(nd for nd in doc["trees"][0]["nodes"] if not nd["leaf"])
    node["left"] = 0
    with pytest.raises(ModelFormatError):
        model_from_dict(doc)


def test_tree_records_round_trip():
    ens, *_ = _fitted(n_iter=1)
    tree = ens.trees[0]
    again = DecisionTree.from_records(tree.to_records())
    assert np.array_equal(again.value, tree.value)
    assert np.array_equal(again.feature, tree.feature)
