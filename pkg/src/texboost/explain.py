"""Decision-path tracing and exact path-dependent tree Shapley attribution.

Attributions are on the margin (log-odds) scale so that
``base_value + sum(contributions) == margin`` holds exactly up to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gbdt import DecisionTree, Ensemble, sigmoid


@dataclass(frozen=True)
class DecisionPathStep:
    feature_name: str
    threshold: float
    observed_value: float
    direction: str
    node_train_fraction: float
    node: int = 0


@dataclass(frozen=True)
class DecisionPath:
    tree_index: int
    steps: tuple[DecisionPathStep, ...]
    leaf_value: float
    leaf_node: int = 0


@dataclass(frozen=True)
class ShapAttribution:
    base_value: float
    feature_names: tuple[str, ...]
    contributions: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.feature_names, self.contributions.tolist()))

    @property
    def margin(self) -> float:
        return float(self.base_value + self.contributions.sum())


@dataclass(frozen=True)
class FeatureImportance:
    feature_name: str
    mean_abs: float
    mean_abs_benign: float
    mean_abs_malignant: float


def trace_tree(tree: DecisionTree, x: np.ndarray, names: Sequence[str], index: int) -> DecisionPath:
    steps = []
    node = 0
    root_cover = tree.cover[0]
    while tree.feature[node] >= 0:
        f = int(tree.feature[node])
        thr = float(tree.threshold[node])
        value = float(x[f])
        left = value <= thr
        steps.append(DecisionPathStep(names[f], thr, value, "left" if left else "right",
                                      float(tree.cover[node] / root_cover), node))
        node = int(tree.left[node] if left else tree.right[node])
    return DecisionPath(index, tuple(steps), float(tree.value[node]), node)


def trace_paths(ensemble: Ensemble, features) -> list[DecisionPath]:
    """One root-to-leaf path per tree for a single instance."""
    x = ensemble.matrix(features)[0]
    return [trace_tree(t, x, ensemble.feature_names, i) for i, t in enumerate(ensemble.trees)]


def replay_margin(ensemble: Ensemble, paths: Sequence[DecisionPath]) -> float:
    """Margin reassembled from traced paths, in the ensemble's summation order."""
    margin = np.float64(ensemble.base_score)
    for path in paths:
        margin = margin + ensemble.learning_rate * np.float64(path.leaf_value)
    return float(margin)


# --------------------------------------------------------------------------
# tree Shapley values
#
# Path-dependent TreeSHAP (subset-weight propagation along the unique feature
# path). The recursion visits every node regardless of the instance; only the
# "one" fractions (does x follow this edge?) depend on x, so the
# state is carried as arrays over a batch of instances.

def _extend(pweights, zero, one, depth, zero_fraction, one_fraction):
    zero.append(zero_fraction)
    one.append(one_fraction)
    pweights.append(np.ones_like(one_fraction) if depth == 0 else np.zeros_like(one_fraction))
    for i in range(depth - 1, -1, -1):
        pweights[i + 1] = pweights[i + 1] + one_fraction * pweights[i] * (i + 1) / (depth + 1)
        pweights[i] = zero_fraction * pweights[i] * (depth - i) / (depth + 1)


def _unwind(pweights, zero, one, depth, path_index):
    one_fraction = one[path_index]
    zero_fraction = zero[path_index]
    hot = one_fraction != 0
    safe_one = np.where(hot, one_fraction, 1.0)
    next_one = pweights[depth]
    for i in range(depth - 1, -1, -1):
        old = pweights[i]
        w_hot = next_one * (depth + 1) / ((i + 1) * safe_one)
        if zero_fraction != 0:
            w_cold = old * (depth + 1) / (zero_fraction * (depth - i))
        else:
            w_cold = np.zeros_like(old)
        new = np.where(hot, w_hot, w_cold)
        next_one = np.where(hot, old - new * zero_fraction * (depth - i) / (depth + 1), next_one)
        pweights[i] = new
    del pweights[depth]
    del zero[path_index]
    del one[path_index]


def _unwound_sum(pweights, zero, one, depth, path_index):
    one_fraction = one[path_index]
    zero_fraction = zero[path_index]
    hot = one_fraction != 0
    safe_one = np.where(hot, one_fraction, 1.0)
    next_one = pweights[depth]
    total = np.zeros_like(next_one)
    for i in range(depth - 1, -1, -1):
        w_hot = next_one * (depth + 1) / ((i + 1) * safe_one)
        if zero_fraction != 0:
            w_cold = pweights[i] / zero_fraction / ((depth - i) / (depth + 1))
        else:
            w_cold = np.zeros_like(w_hot)
        total = total + np.where(hot, w_hot, w_cold)
        next_one = np.where(hot, pweights[i] - w_hot * zero_fraction * (depth - i) / (depth + 1),
                            next_one)
    return total


def tree_shap_matrix(tree: DecisionTree, X, n_features: int | None = None) -> np.ndarray:
    """Exact path-dependent Shapley values of one tree, shape ``(n, n_features)``.

    Cover fractions of the training data act as the conditional
    probabilities of the features left out of a coalition.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    m = X.shape[1] if n_features is None else n_features
    phi = np.zeros((n, m))
    if tree.cover[0] <= 0:
        raise ValueError("tree carries no training cover counts")

    def recurse(node, pweights, zero, one, feats, zero_fraction, one_fraction, feature):
        pweights = list(pweights)
        zero = list(zero)
        one = list(one)
        feats = list(feats)
        depth = len(feats)
        _extend(pweights, zero, one, depth, zero_fraction, one_fraction)
        feats.append(feature)

        if tree.feature[node] < 0:
            value = tree.value[node]
            for i in range(1, depth + 1):
                w = _unwound_sum(pweights, zero, one, depth, i)
                phi[:, feats[i]] += w * (one[i] - zero[i]) * value
            return

        split = int(tree.feature[node])
        left, right = int(tree.left[node]), int(tree.right[node])
        go_left = (X[:, split] <= tree.threshold[node]).astype(np.float64)
        cover = tree.cover[node]
        incoming_zero = 1.0
        incoming_one = np.ones(n)
        if split in feats[1:]:
            k = feats.index(split, 1)
            incoming_zero = zero[k]
            incoming_one = one[k]
            _unwind(pweights, zero, one, depth, k)
            del feats[k]
        recurse(left, pweights, zero, one, feats,
                tree.cover[left] / cover * incoming_zero, incoming_one * go_left, split)
        recurse(right, pweights, zero, one, feats,
                tree.cover[right] / cover * incoming_zero, incoming_one * (1.0 - go_left), split)

    recurse(0, [], [], [], [], 1.0, np.ones(n), -1)
    return phi


def shap_matrix(ensemble: Ensemble, X) -> tuple[float, np.ndarray]:
    """``(base_value, contributions)`` for a raw model-aligned matrix ``X``."""
    X = np.asarray(X, dtype=np.float64)
    phi = np.zeros_like(X)
    expected = 0.0
    for tree in ensemble.trees:
        phi += ensemble.learning_rate * tree_shap_matrix(tree, X, ensemble.n_features)
        expected += ensemble.learning_rate * tree.expected_value()
    return ensemble.base_score + expected, phi


def shap_values(ensemble: Ensemble, features) -> ShapAttribution:
    """Per-feature additive attribution of one instance's margin."""
    base, phi = shap_matrix(ensemble, ensemble.matrix(features))
    contrib = phi[0]
    contrib.setflags(write=False)
    return ShapAttribution(base, ensemble.feature_names, contrib)


def global_importance(ensemble: Ensemble, dataset, threshold: float = 0.5) -> list[FeatureImportance]:
    """Mean |Shapley contribution| per feature, overall and per predicted class.

    Sorted by overall mean descending, ties by feature name.
    """
    X = ensemble.matrix(dataset)
    if X.shape[0] == 0:
        raise ValueError("empty dataset")
    _, phi = shap_matrix(ensemble, X)
    absphi = np.abs(phi)
    malignant = sigmoid(ensemble.margin_matrix(X)) >= threshold
    out = []
    for j, name in enumerate(ensemble.feature_names):
        col = absphi[:, j]
        out.append(FeatureImportance(
            name, float(col.mean()),
            float(col[~malignant].mean()) if (~malignant).any() else 0.0,
            float(col[malignant].mean()) if malignant.any() else 0.0))
    out.sort(key=lambda fi: (-fi.mean_abs, fi.feature_name))
    return out


# --------------------------------------------------------------------------
# export

def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def tree_to_dot(ensemble: Ensemble, tree_index: int, path: DecisionPath | None = None,
                name: str | None = None) -> str:
    """Graphviz digraph of one tree; edges on ``path`` are drawn bold orange."""
    tree = ensemble.trees[tree_index]
    names = ensemble.feature_names
    root_cover = tree.cover[0]
    on_path = set()
    observed = {}
    if path is not None:
        node = 0
        for step in path.steps:
            nxt = int(tree.left[node] if step.direction == "left" else tree.right[node])
            on_path.add((node, nxt))
            observed[node] = step.observed_value
            node = nxt
    lines = [f'digraph "{_dot_escape(name or f"tree_{tree_index}")}" {{',
             '  node [shape=box, fontname="Helvetica"];']
    for i in range(tree.n_nodes):
        cover = f"cover={tree.cover[i]:g} ({tree.cover[i] / root_cover:.3f})"
        if tree.feature[i] < 0:
            label = f"leaf value={tree.value[i]:.6g}\\n{cover}"
            lines.append(f'  n{i} [label="{label}", style=rounded];')
        else:
            label = f"{_dot_escape(names[tree.feature[i]])} <= {tree.threshold[i]:.6g}\\n{cover}"
            if i in observed:
                label += f"\\nobserved={observed[i]:.6g}"
            lines.append(f'  n{i} [label="{label}"];')
    for i in range(tree.n_nodes):
        if tree.feature[i] < 0:
            continue
        for child, tag in ((int(tree.left[i]), "yes"), (int(tree.right[i]), "no")):
            attrs = f'label="{tag}"'
            if (i, child) in on_path:
                attrs += ', color="orange", penwidth=3'
            lines.append(f"  n{i} -> n{child} [{attrs}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def path_to_dict(path: DecisionPath) -> dict:
    return {
        "tree_index": path.tree_index,
        "leaf_node": path.leaf_node,
        "leaf_value": path.leaf_value,
        "steps": [{"node": s.node, "feature": s.feature_name, "threshold": s.threshold,
                   "observed_value": s.observed_value, "direction": s.direction,
                   "node_train_fraction": s.node_train_fraction} for s in path.steps],
    }


def attribution_to_dict(attr: ShapAttribution, probability_scale: bool = False) -> dict:
    doc = {"base_value": attr.base_value, "margin": attr.margin,
           "contributions": attr.as_dict()}
    if probability_scale:
        doc["base_probability"] = float(sigmoid(attr.base_value))
        doc["probability"] = float(sigmoid(attr.margin))
    return doc
