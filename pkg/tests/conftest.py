import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

_acceptance_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "SKIP" if report.skipped else ("PASS" if report.passed else "FAIL")
        prev = _acceptance_results.get(number)
        if prev is None or prev[1] == "PASS":
            _acceptance_results[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_results):
        title, status = _acceptance_results[number]
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title}")


def write_png(path, array, mode=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8), mode=mode).save(path)
    return path


def make_toy_dataset(root, n_benign=3, n_malignant=3, size=24, seed=0, normal=True):
    """Synthetic dataset: benign ROIs smooth, malignant ROIs noisy."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    for label, count in (("benign", n_benign), ("malignant", n_malignant)):
        for k in range(count):
            base = rng.integers(60, 120)
            if label == "benign":
                img = base + rng.integers(0, 8, size=(size, size))
            else:
                img = base + rng.integers(0, 90, size=(size, size))
            mask = np.zeros((size, size), dtype=np.uint8)
            lo = rng.integers(2, 6)
            mask[lo:size - lo, lo:size - lo] = 255
            write_png(root / label / f"{label} ({k + 1}).png", img)
            write_png(root / label / f"{label} ({k + 1})_mask.png", mask)
    if normal:
        write_png(root / "normal" / "normal (1).png", np.full((size, size), 90))
        write_png(root / "normal" / "normal (1)_mask.png", np.zeros((size, size)))
    return root


@pytest.fixture
def toy_dataset(tmp_path):
    return make_toy_dataset(tmp_path / "data", n_benign=2, n_malignant=1)


def random_tree(rng, n_features, max_leaves=12, max_cover=200):
    """Random DecisionTree with consistent covers; features may repeat on a path."""
    from texboost.gbdt import DecisionTree

    n_leaves = int(rng.integers(1, max_leaves + 1))
    nodes = [dict(feature=-1, threshold=np.nan, bin_threshold=-1, left=-1, right=-1,
                  value=float(rng.normal()), cover=float(rng.integers(n_leaves * 2, max_cover + n_leaves * 2)),
                  gain=0.0)]
    leaves = [0]
    while len(leaves) < n_leaves:
        cand = [i for i in leaves if nodes[i]["cover"] >= 2]
        if not cand:
            break
        node = cand[int(rng.integers(len(cand)))]
        leaves.remove(node)
        cover = nodes[node]["cover"]
        cl = float(rng.integers(1, cover))
        nodes[node].update(feature=int(rng.integers(n_features)), threshold=float(rng.normal()),
                           bin_threshold=0, left=len(nodes), right=len(nodes) + 1)
        for c in (cl, cover - cl):
            leaves.append(len(nodes))
            nodes.append(dict(feature=-1, threshold=np.nan, bin_threshold=-1, left=-1, right=-1,
                              value=float(rng.normal()), cover=c, gain=0.0))
    return DecisionTree(**{k: [nd[k] for nd in nodes] for k in nodes[0]})
