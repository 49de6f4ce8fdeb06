"""Command-line pipeline: extract -> compare -> train -> evaluate -> predict -> explain.

Dataset layout expected by ``extract``::

    ROOT/benign/<stem>.png      ROOT/benign/<stem>_mask.png
    ROOT/malignant/<stem>.png   ROOT/malignant/<stem>_mask.png

``normal/`` is ignored; extra ``<stem>_mask_<k>.png`` files are merged into
the ROI. Every stage reads and writes plain CSV/JSON files.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import explain as xp
from .dataset_io import DatasetError, find_cases, load_case_mask, load_image, stratified_split
from .evaluation import evaluate
from .gbdt import (GbdtConfig, ModelFormatError, load_model, save_model, sigmoid,
                   train_matrix)
from .stats import feature_comparison_report, report_csv_text
from .tables import (FeatureTable, TableError, atomic_write_text, csv_text, format_real,
                     feature_csv_text, read_feature_csv)
from .texture import FirstOrderConfig, GlcmConfig, TextureError, feature_vector


class CliError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# --------------------------------------------------------------------------
# extract

def _extract_one(job):
    case, glcm_cfg, include_fo = job
    try:
        vec = feature_vector(load_image(case.image_path), load_case_mask(case), glcm_cfg,
                             FirstOrderConfig(), include_fo)
    except (TextureError, DatasetError, OSError) as exc:
        raise CliError(f"case {case.case_id}: {exc}") from exc
    return case.case_id, case.label, vec


def cmd_extract(args) -> int:
    cases, skipped = find_cases(args.dataset)
    if skipped:
        _progress(f"warning: {len(skipped)} image(s) without a mask skipped")
    if not cases:
        raise DatasetError(f"no benign/malignant cases found under {args.dataset}")
    glcm_cfg = GlcmConfig(levels=args.glcm_levels, distances=args.distances, angles=args.angles)
    jobs = [(c, glcm_cfg, args.first_order) for c in cases]
    results = []
    step = max(1, len(jobs) // 10)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for i, res in enumerate(pool.map(_extract_one, jobs, chunksize=4), start=1):
                results.append(res)
                if i % step == 0 or i == len(jobs):
                    _progress(f"extracted {i}/{len(jobs)}")
    else:
        for i, job in enumerate(jobs, start=1):
            results.append(_extract_one(job))
            if i % step == 0 or i == len(jobs):
                _progress(f"extracted {i}/{len(jobs)}")
    ids, labels, vectors = zip(*results)
    atomic_write_text(args.output, feature_csv_text(ids, labels, vectors))
    return 0


# --------------------------------------------------------------------------
# table-driven stages

def _select(table: FeatureTable, split: str, test_fraction: float, seed: int) -> FeatureTable:
    if split == "all":
        return table
    train_idx, test_idx = stratified_split(table.labels, test_fraction, seed)
    return table.subset(train_idx if split == "train" else test_idx)


def _load_table(args) -> FeatureTable:
    return _select(read_feature_csv(args.features), args.split, args.test_fraction, args.seed)


def _model_matrix(model, table: FeatureTable) -> np.ndarray:
    if set(model.feature_names) != set(table.names):
        missing = sorted(set(model.feature_names) - set(table.names))
        extra = sorted(set(table.names) - set(model.feature_names))
        raise CliError(f"feature schema mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    cols = [table.names.index(n) for n in model.feature_names]
    return table.matrix[:, cols]


def cmd_compare(args) -> int:
    table = _load_table(args)
    report = feature_comparison_report(table.vectors(), table.labels)
    atomic_write_text(args.output, report_csv_text(report))
    return 0


def cmd_train(args) -> int:
    table = _load_table(args)
    config = GbdtConfig(num_iterations=args.num_iterations, learning_rate=args.learning_rate,
                        num_leaves=args.num_leaves, max_bin=args.max_bin,
                        min_samples_leaf=args.min_samples_leaf, lambda_l2=args.lambda_l2,
                        seed=args.seed)
    _progress(f"training on {len(table)} cases, {len(table.names)} features, "
              f"{config.num_iterations} iterations")
    model = train_matrix(table.matrix, table.binary_labels(), table.names, config)
    loss_path = args.loss_output or Path(str(args.model) + ".loss.csv")
    loss_csv = csv_text(["iteration", "train_log_loss"],
                        [[str(i), format_real(v)] for i, v in enumerate(model.training_loss, start=1)])
    save_model(model, args.model)
    atomic_write_text(loss_path, loss_csv)
    return 0


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    table = _load_table(args)
    proba = sigmoid(model.margin_matrix(_model_matrix(model, table)))
    report = evaluate(proba, table.binary_labels(), args.threshold)
    if args.csv_output:
        atomic_write_text(args.csv_output, report.to_csv())
    if args.output:
        atomic_write_text(args.output, report.to_json())
    else:
        sys.stdout.write(report.to_json())
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    table = _load_table(args)
    p = np.atleast_1d(sigmoid(model.margin_matrix(_model_matrix(model, table))))
    rows = [[cid, lab, format_real(1.0 - pm), format_real(pm)]
            for cid, lab, pm in zip(table.case_ids, table.labels, p.tolist())]
    text = csv_text(["case_id", "label", "p_benign", "p_malignant"], rows)
    if args.output:
        atomic_write_text(args.output, text)
    else:
        sys.stdout.write(text)
    return 0


def _safe_name(case_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", case_id).strip("_") or "case"


def cmd_explain(args) -> int:
    model = load_model(args.model)
    table = _load_table(args)
    if args.case:
        wanted = set(args.case)
        unknown = wanted - set(table.case_ids)
        if unknown:
            raise CliError(f"unknown case id(s): {sorted(unknown)}")
        table = table.subset([i for i, c in enumerate(table.case_ids) if c in wanted])
    n_trees = min(args.trees, len(model.trees))
    X = _model_matrix(model, table)
    base, phi = xp.shap_matrix(model, X)
    margins = model.margin_matrix(X)
    paths_doc, shap_doc, dots = {}, {}, {}
    for row, cid in enumerate(table.case_ids):
        x = X[row]
        paths = [xp.trace_tree(model.trees[t], x, model.feature_names, t) for t in range(n_trees)]
        paths_doc[cid] = [xp.path_to_dict(p) for p in paths]
        attr = xp.ShapAttribution(base, model.feature_names, phi[row])
        doc = xp.attribution_to_dict(attr, args.probability)
        doc["model_margin"] = float(margins[row])
        shap_doc[cid] = doc
        dots[cid] = "\n".join(
            xp.tree_to_dot(model, t, paths[t], name=f"{cid} tree {t}") for t in range(n_trees))
    importance = xp.global_importance(model, [dict(zip(model.feature_names, r)) for r in X]) \
        if len(X) else []
    out = Path(args.output_dir)
    atomic_write_text(out / "paths.json", json.dumps(paths_doc, indent=1) + "\n")
    atomic_write_text(out / "shap.json", json.dumps(shap_doc, indent=1) + "\n")
    atomic_write_text(out / "importance.json", json.dumps(
        [{"feature": fi.feature_name, "mean_abs": fi.mean_abs,
          "mean_abs_benign": fi.mean_abs_benign, "mean_abs_malignant": fi.mean_abs_malignant}
         for fi in importance], indent=1) + "\n")
    for cid, text in dots.items():
        atomic_write_text(out / "dot" / f"{_safe_name(cid)}.dot", text)
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texboost", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="compute texture features for every case")
    p.add_argument("--dataset", required=True, type=Path, help="dataset root directory")
    p.add_argument("--output", required=True, type=Path, help="feature CSV to write")
    p.add_argument("--distances", type=_int_list, default=(1, 3, 5))
    p.add_argument("--angles", type=_int_list, default=(0, 45, 90, 135))
    p.add_argument("--glcm-levels", type=int, default=256)
    p.add_argument("--first-order", action="store_true",
                   help="append the 8 first-order statistics")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_extract)

    def table_args(p, default_split):
        p.add_argument("--features", required=True, type=Path, help="feature CSV")
        p.add_argument("--split", choices=("all", "train", "test"), default=default_split)
        p.add_argument("--test-fraction", type=float, default=0.2)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("compare", help="Welch t-test of each feature, benign vs malignant")
    table_args(p, "all")
    p.add_argument("--output", required=True, type=Path)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("train", help="train the boosted tree model")
    table_args(p, "train")
    p.add_argument("--model", required=True, type=Path, help="model JSON to write")
    p.add_argument("--loss-output", type=Path, help="per-iteration loss CSV (default MODEL.loss.csv)")
    p.add_argument("--num-iterations", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--num-leaves", type=int, default=10)
    p.add_argument("--max-bin", type=int, default=512)
    p.add_argument("--min-samples-leaf", type=int, default=5)
    p.add_argument("--lambda-l2", type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a model on a labeled split")
    table_args(p, "test")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--output", type=Path, help="JSON report (default stdout)")
    p.add_argument("--csv-output", type=Path, help="one-row CSV report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="benign/malignant probabilities per case")
    table_args(p, "all")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--output", type=Path, help="CSV to write (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="decision paths, DOT trees and SHAP attributions")
    table_args(p, "all")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--output-dir", required=True, type=Path)
    p.add_argument("--trees", type=int, default=2, help="number of leading trees to export")
    p.add_argument("--case", action="append", help="restrict to this case id (repeatable)")
    p.add_argument("--probability", action="store_true",
                   help="also report base and total on the probability scale")
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, DatasetError, TableError, ModelFormatError, TextureError,
            ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"texboost {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
