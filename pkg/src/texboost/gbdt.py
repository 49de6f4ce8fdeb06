"""Histogram-binned gradient boosted decision trees for binary log loss.

Trees are grown leaf-wise: the leaf whose best split has the largest
second-order gain is split next, until ``num_leaves`` leaves exist or no
split with positive gain remains. Leaf values are the regularized Newton
step ``sum(residual) / (sum(hessian) + lambda_l2)``.

Class encoding: malignant = 1, benign = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tables import atomic_write_text
from .texture import FeatureVector

SCHEMA_VERSION = 1

# Gains closer than this (relative to the node's objective scale) are ties;
# it absorbs summation-order rounding so tie-breaking stays deterministic.
GAIN_TOLERANCE = 1e-10


class ModelFormatError(ValueError):
    """Model file is corrupt, truncated or of an unsupported schema version."""


@dataclass(frozen=True)
class GbdtConfig:
    num_iterations: int = 500
    learning_rate: float = 0.05
    num_leaves: int = 10
    max_bin: int = 512
    min_samples_leaf: int = 5
    lambda_l2: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_iterations < 1:
            raise ValueError("num_iterations must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.num_leaves < 2:
            raise ValueError("num_leaves must be >= 2")
        if self.max_bin < 2:
            raise ValueError("max_bin must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.lambda_l2 < 0:
            raise ValueError("lambda_l2 must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_loss(labels, margins) -> float:
    """Mean binary cross-entropy of ``labels`` under logits ``margins``."""
    y = np.asarray(labels, dtype=np.float64)
    f = np.asarray(margins, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, f) - y * f))


def _as_binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (benign) or 1 (malignant)")
    return y.astype(np.float64)


def init_base_score(labels) -> float:
    """Constant margin minimizing log loss: the log-odds of the positive rate."""
    y = _as_binary(labels)
    n_pos = float(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to initialize the model")
    return math.log(n_pos / n_neg)


def compute_gradients(labels, margins) -> tuple[np.ndarray, np.ndarray]:
    """Residuals ``y - sigmoid(F)`` (negative log-loss gradient) and hessians ``p(1-p)``."""
    y = np.asarray(labels, dtype=np.float64)
    f = np.asarray(margins, dtype=np.float64)
    if y.shape != f.shape:
        raise ValueError("labels and margins differ in shape")
    p = sigmoid(f)
    return y - p, p * (1.0 - p)


# --------------------------------------------------------------------------
# binning

@dataclass(frozen=True)
class BinMapper:
    """Per-feature ascending thresholds; ``bin(v)`` counts thresholds below ``v``.

    A value equal to a threshold lands in the lower bin, matching the
    ``value <= threshold -> left`` routing rule of the trees.
    """

    thresholds: tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for t in self.thresholds:
            arr = np.array(t, dtype=np.float64).reshape(-1)
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise ValueError("bin thresholds must be strictly increasing")
            arr.setflags(write=False)
            frozen.append(arr)
        object.__setattr__(self, "thresholds", tuple(frozen))

    @property
    def n_features(self) -> int:
        return len(self.thresholds)

    def n_bins(self, feature: int) -> int:
        return self.thresholds[feature].shape[0] + 1

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected a (n, {self.n_features}) matrix, got shape {X.shape}")
        out = np.empty(X.shape, dtype=np.int32)
        for f, thr in enumerate(self.thresholds):
            out[:, f] = np.searchsorted(thr, X[:, f], side="left")
        return out


def _column_thresholds(col: np.ndarray, max_bin: int) -> np.ndarray:
    distinct, counts = np.unique(col, return_counts=True)
    if distinct.shape[0] <= 1:
        return np.empty(0)
    mids = distinct[:-1] + (distinct[1:] - distinct[:-1]) / 2.0
    if distinct.shape[0] <= max_bin:
        return mids
    # greedy quantile cuts on distinct-value boundaries keep every bin non-empty
    n = col.shape[0]
    cum = np.cumsum(counts)
    cuts = []
    for k in range(distinct.shape[0] - 1):
        if len(cuts) >= max_bin - 1:
            break
        if cum[k] * max_bin >= (len(cuts) + 1) * n:
            cuts.append(k)
    return mids[cuts]


def build_bins(feature_matrix, max_bin: int = 512) -> BinMapper:
    """Fit histogram bins on an ``(n_samples, n_features)`` matrix.

    A feature with at most ``max_bin`` distinct values gets one bin per value
    with thresholds at the midpoints; otherwise cuts are quantile-spaced.
    """
    X = np.asarray(feature_matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("need a 2-D matrix with at least one sample")
    if max_bin < 2:
        raise ValueError("max_bin must be >= 2")
    return BinMapper(tuple(_column_thresholds(X[:, f], max_bin) for f in range(X.shape[1])))


# --------------------------------------------------------------------------
# trees

@dataclass(frozen=True)
class DecisionTree:
    """Flat binary tree; node 0 is the root, children are referenced by index.

    Leaves have ``feature == -1``. ``value`` holds the Newton value of every
    node (the output for leaves); ``cover`` the training samples reaching it.
    """

    feature: np.ndarray
    threshold: np.ndarray
    bin_threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        for name, dtype in (("feature", np.int64), ("threshold", np.float64),
                            ("bin_threshold", np.int64), ("left", np.int64),
                            ("right", np.int64), ("value", np.float64),
                            ("cover", np.float64), ("gain", np.float64)):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = self.feature.shape[0]
        if n == 0 or any(getattr(self, k).shape[0] != n for k in
                         ("threshold", "bin_threshold", "left", "right", "value", "cover", "gain")):
            raise ValueError("inconsistent tree arrays")

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of raw feature matrix ``X``."""
        X = np.asarray(X, dtype=np.float64)
        rows = np.arange(X.shape[0])
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def apply_binned(self, binned) -> np.ndarray:
        binned = np.asarray(binned)
        rows = np.arange(binned.shape[0])
        node = np.zeros(binned.shape[0], dtype=np.int64)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            go_left = binned[rows, np.where(internal, f, 0)] <= self.bin_threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def expected_value(self) -> float:
        """Cover-weighted mean leaf value, the tree's output averaged over training data."""
        leaves = self.feature < 0
        return float(np.sum(self.cover[leaves] * self.value[leaves]) / self.cover[0])

    def to_records(self) -> list[dict]:
        records = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                records.append({"leaf": True, "value": float(self.value[i]),
                                "cover": float(self.cover[i])})
            else:
                records.append({"leaf": False, "feature": int(self.feature[i]),
                                "threshold": float(self.threshold[i]),
                                "bin": int(self.bin_threshold[i]),
                                "left": int(self.left[i]), "right": int(self.right[i]),
                                "value": float(self.value[i]), "cover": float(self.cover[i]),
                                "gain": float(self.gain[i])})
        return records

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "DecisionTree":
        cols = {k: [] for k in ("feature", "threshold", "bin_threshold", "left", "right",
                                "value", "cover", "gain")}
        for rec in records:
            if rec["leaf"]:
                vals = (-1, math.nan, -1, -1, -1, rec["value"], rec["cover"], 0.0)
            else:
                vals = (rec["feature"], rec["threshold"], rec["bin"], rec["left"], rec["right"],
                        rec["value"], rec["cover"], rec["gain"])
            for key, v in zip(cols, vals):
                cols[key].append(v)
        tree = cls(**cols)
        _check_tree_links(tree)
        return tree


def _check_tree_links(tree: DecisionTree) -> None:
    n = tree.n_nodes
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        if tree.feature[i] >= 0:
            for child in (tree.left[i], tree.right[i]):
                if not 0 < child < n or child in seen:
                    raise ValueError(f"node {i} has an invalid child index {child}")
                seen.add(int(child))
                stack.append(int(child))
    if len(seen) != n:
        raise ValueError("tree contains unreachable nodes")


@dataclass
class _Split:
    gain: float
    feature: int
    bin: int


class _Grower:
    def __init__(self, binned, residuals, hessians, config: GbdtConfig, n_bins: Sequence[int]):
        self.binned = binned
        self.r = residuals
        self.h = hessians
        self.cfg = config
        self.n_features = binned.shape[1]
        self.n_bins = np.asarray(n_bins, dtype=np.int64)
        self.width = int(max(self.n_bins.max(), 2))
        self.offsets = np.arange(self.n_features, dtype=np.int64) * self.width
        # candidate boundary b separates bins <= b from the rest
        self.boundary_ok = np.arange(self.width)[None, :] < (self.n_bins[:, None] - 1)

    def leaf_value(self, idx) -> float:
        return float(self.r[idx].sum() / (self.h[idx].sum() + self.cfg.lambda_l2))

    def best_split(self, idx: np.ndarray) -> _Split | None:
        k = idx.shape[0]
        msl = self.cfg.min_samples_leaf
        if k < 2 * msl:
            return None
        lam = self.cfg.lambda_l2
        flat = (self.binned[idx] + self.offsets[None, :]).ravel()
        size = self.n_features * self.width
        hist_r = np.bincount(flat, weights=np.repeat(self.r[idx], self.n_features),
                             minlength=size).reshape(self.n_features, self.width)
        hist_h = np.bincount(flat, weights=np.repeat(self.h[idx], self.n_features),
                             minlength=size).reshape(self.n_features, self.width)
        hist_n = np.bincount(flat, minlength=size).reshape(self.n_features, self.width)
        g_left = np.cumsum(hist_r, axis=1)
        h_left = np.cumsum(hist_h, axis=1)
        n_left = np.cumsum(hist_n, axis=1)
        g_tot = float(self.r[idx].sum())
        h_tot = float(self.h[idx].sum())
        g_right = g_tot - g_left
        h_right = h_tot - h_left
        parent = g_tot * g_tot / (h_tot + lam)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = g_left ** 2 / (h_left + lam) + g_right ** 2 / (h_right + lam) - parent
        valid = self.boundary_ok & (n_left >= msl) & (k - n_left >= msl) & np.isfinite(gain)
        if not valid.any():
            return None
        gain = np.where(valid, gain, -np.inf)
        best = float(gain.max())
        tol = GAIN_TOLERANCE * max(1.0, abs(parent), abs(best))
        if best <= tol:
            return None
        # row-major argmax: lowest feature, then lowest boundary among ties
        pos = int(np.argmax(gain >= best - tol))
        f, b = divmod(pos, self.width)
        return _Split(float(gain[f, b]), f, b)


def grow_tree(binned_features, gradients, hessians, config: GbdtConfig = GbdtConfig(),
              bin_mapper: BinMapper | None = None) -> DecisionTree:
    """Grow one regression tree leaf-wise on binned inputs.

    ``gradients`` are the residuals ``y - p`` (negative loss gradients). Split
    thresholds are stored both as bin boundaries and, through ``bin_mapper``,
    as real-valued midpoints so the tree applies to unbinned inputs. Without a
    mapper the real threshold is ``bin + 0.5``.
    """
    binned = np.asarray(binned_features)
    if binned.ndim != 2:
        raise ValueError("binned features must be an (n_samples, n_features) matrix")
    r = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    n = binned.shape[0]
    if r.shape != (n,) or h.shape != (n,):
        raise ValueError("gradients and hessians must have one entry per sample")
    if n < 2 * config.min_samples_leaf:
        raise ValueError(f"need at least {2 * config.min_samples_leaf} samples to grow a tree, got {n}")
    if bin_mapper is not None:
        if bin_mapper.n_features != binned.shape[1]:
            raise ValueError("bin mapper does not match the feature count")
        n_bins = [bin_mapper.n_bins(f) for f in range(binned.shape[1])]
    else:
        n_bins = (binned.max(axis=0) + 1).tolist() if n else [1] * binned.shape[1]
    grower = _Grower(binned.astype(np.int64, copy=False), r, h, config, n_bins)

    nodes = [dict(feature=-1, threshold=math.nan, bin_threshold=-1, left=-1, right=-1,
                  value=grower.leaf_value(np.arange(n)), cover=float(n), gain=0.0)]
    members = {0: np.arange(n)}
    candidates = {0: grower.best_split(members[0])}
    n_leaves = 1
    while n_leaves < config.num_leaves:
        live = [(node_id, s) for node_id, s in candidates.items() if s is not None]
        if not live:
            break
        top = max(s.gain for _, s in live)
        tol = GAIN_TOLERANCE * max(1.0, abs(top))
        node_id, split = min((item for item in live if item[1].gain >= top - tol),
                             key=lambda item: item[0])
        idx = members.pop(node_id)
        del candidates[node_id]
        go_left = grower.binned[idx, split.feature] <= split.bin
        if bin_mapper is not None:
            thr = float(bin_mapper.thresholds[split.feature][split.bin])
        else:
            thr = split.bin + 0.5
        left_id, right_id = len(nodes), len(nodes) + 1
        nodes[node_id].update(feature=split.feature, threshold=thr, bin_threshold=split.bin,
                              left=left_id, right=right_id, gain=split.gain)
        for child_id, child_idx in ((left_id, idx[go_left]), (right_id, idx[~go_left])):
            nodes.append(dict(feature=-1, threshold=math.nan, bin_threshold=-1, left=-1, right=-1,
                              value=grower.leaf_value(child_idx), cover=float(child_idx.shape[0]),
                              gain=0.0))
            members[child_id] = child_idx
            candidates[child_id] = grower.best_split(child_idx)
        n_leaves += 1
    return DecisionTree(**{k: [nd[k] for nd in nodes] for k in nodes[0]})


# --------------------------------------------------------------------------
# ensemble

@dataclass(frozen=True)
class Ensemble:
    """``margin(x) = base_score + learning_rate * sum_m tree_m(x)``, summed in tree order."""

    base_score: float
    learning_rate: float
    trees: tuple[DecisionTree, ...]
    bin_mapper: BinMapper
    feature_names: tuple[str, ...]
    training_loss: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "training_loss", tuple(self.training_loss))
        if len(self.feature_names) != self.bin_mapper.n_features:
            raise ValueError("feature_names and bin mapper disagree on the feature count")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ValueError("duplicate feature names")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def matrix(self, features) -> np.ndarray:
        """Order name-keyed input(s) into a model-aligned ``(n, n_features)`` matrix.

        Accepts a FeatureVector, a mapping, or a sequence of either.
        """
        single = isinstance(features, (FeatureVector, Mapping))
        items = [features] if single else list(features)
        rows = []
        expected = set(self.feature_names)
        for item in items:
            lookup = item.as_dict() if isinstance(item, FeatureVector) else dict(item)
            got = set(lookup)
            if got != expected:
                missing = sorted(expected - got)
                extra = sorted(got - expected)
                raise KeyError(f"feature names do not match the model (missing {missing[:5]}, extra {extra[:5]})")
            rows.append([lookup[n] for n in self.feature_names])
        X = np.asarray(rows, dtype=np.float64).reshape(len(rows), self.n_features)
        if not np.all(np.isfinite(X)):
            raise ValueError("feature values must be finite")
        return X

    def tree_outputs(self, X) -> np.ndarray:
        """Per-tree leaf values (unscaled), shape ``(n, n_trees)``."""
        X = np.asarray(X, dtype=np.float64)
        if not self.trees:
            return np.zeros((X.shape[0], 0))
        return np.stack([t.predict(X) for t in self.trees], axis=1)

    def margin_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected a (n, {self.n_features}) matrix")
        margin = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            margin = margin + self.learning_rate * tree.predict(X)
        return margin


def train_matrix(X, labels, feature_names: Sequence[str],
                 config: GbdtConfig = GbdtConfig()) -> Ensemble:
    """Boost ``config.num_iterations`` trees on a raw ``(n, n_features)`` matrix."""
    X = np.asarray(X, dtype=np.float64)
    y = _as_binary(labels)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n_samples, n_features) with one label per row")
    if len(feature_names) != X.shape[1]:
        raise ValueError("one feature name per column is required")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    base = init_base_score(y)
    mapper = build_bins(X, config.max_bin)
    binned = mapper.transform(X)
    margin = np.full(X.shape[0], base, dtype=np.float64)
    trees, losses = [], []
    for _ in range(config.num_iterations):
        residuals, hessians = compute_gradients(y, margin)
        tree = grow_tree(binned, residuals, hessians, config, mapper)
        margin = margin + config.learning_rate * tree.predict(X)
        trees.append(tree)
        losses.append(log_loss(y, margin))
    return Ensemble(base, config.learning_rate, tuple(trees), mapper, tuple(feature_names),
                    tuple(losses))


def train(features: Sequence[FeatureVector], labels, config: GbdtConfig = GbdtConfig()) -> Ensemble:
    """Train on per-case feature vectors; names are taken from the first vector."""
    features = list(features)
    if not features:
        raise ValueError("no training cases")
    names = features[0].names
    X = np.array([v.values if v.names == names else [v[n] for n in names] for v in features],
                 dtype=np.float64)
    return train_matrix(X, labels, names, config)


def predict_margin(ensemble: Ensemble, features) -> float:
    return float(ensemble.margin_matrix(ensemble.matrix(features))[0])


def predict_proba(ensemble: Ensemble, features) -> float:
    """Probability that the ROI is malignant; benign is the complement."""
    return float(sigmoid(predict_margin(ensemble, features)))


def class_probabilities(ensemble: Ensemble, features) -> dict[str, float]:
    p = predict_proba(ensemble, features)
    return {"benign": 1.0 - p, "malignant": p}


# --------------------------------------------------------------------------
# persistence

def model_to_dict(ensemble: Ensemble) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "base_score": ensemble.base_score,
        "learning_rate": ensemble.learning_rate,
        "feature_names": list(ensemble.feature_names),
        "bin_thresholds": [t.tolist() for t in ensemble.bin_mapper.thresholds],
        "trees": [{"nodes": t.to_records()} for t in ensemble.trees],
    }


def model_from_dict(doc: Mapping) -> Ensemble:
    if not isinstance(doc, Mapping):
        raise ModelFormatError("model document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(f"unsupported model schema_version {version!r} (expected {SCHEMA_VERSION})")
    try:
        mapper = BinMapper(tuple(doc["bin_thresholds"]))
        trees = tuple(DecisionTree.from_records(t["nodes"]) for t in doc["trees"])
        ens = Ensemble(float(doc["base_score"]), float(doc["learning_rate"]), trees, mapper,
                       tuple(doc["feature_names"]))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    for tree in trees:
        if np.any(tree.feature >= ens.n_features):
            raise ModelFormatError("tree references a feature index outside the model")
    return ens


def save_model(ensemble: Ensemble, path) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(ensemble), indent=1) + "\n")


def load_model(path) -> Ensemble:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)


def config_dict(config: GbdtConfig) -> dict:
    return asdict(config)
