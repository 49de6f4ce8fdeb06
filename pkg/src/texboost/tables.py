"""CSV interchange between pipeline stages and atomic file output."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset_io import LABELS
from .texture import FeatureVector


class TableError(ValueError):
    """Malformed or inconsistent feature / report CSV."""


def format_real(x: float) -> str:
    """17 significant digits, enough for a lossless float round-trip."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.17g}"


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


@dataclass(frozen=True)
class FeatureTable:
    case_ids: tuple[str, ...]
    labels: tuple[str, ...]
    names: tuple[str, ...]
    matrix: np.ndarray

    def __len__(self) -> int:
        return len(self.case_ids)

    def vectors(self) -> list[FeatureVector]:
        return [FeatureVector(self.names, row) for row in self.matrix]

    def binary_labels(self) -> np.ndarray:
        return np.array([lab == "malignant" for lab in self.labels], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "FeatureTable":
        idx = list(indices)
        return FeatureTable(tuple(self.case_ids[i] for i in idx),
                            tuple(self.labels[i] for i in idx),
                            self.names, self.matrix[idx])


def feature_csv_text(case_ids: Sequence[str], labels: Sequence[str],
                     vectors: Sequence[FeatureVector]) -> str:
    if not (len(case_ids) == len(labels) == len(vectors)):
        raise TableError("case ids, labels and vectors differ in length")
    if not vectors:
        raise TableError("no rows to write")
    names = vectors[0].names
    rows = []
    for cid, lab, vec in zip(case_ids, labels, vectors):
        if vec.names != names:
            raise TableError(f"case {cid} has a different feature layout")
        rows.append([cid, lab, *(format_real(v) for v in vec.values)])
    return csv_text(["case_id", "label", *names], rows)


def write_feature_csv(path, case_ids, labels, vectors) -> None:
    atomic_write_text(path, feature_csv_text(case_ids, labels, vectors))


def read_feature_csv(path) -> FeatureTable:
    """Parse a ``case_id,label,<features...>`` table written by :func:`write_feature_csv`."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise TableError(f"{path}: not UTF-8 text") from exc
    if not rows:
        raise TableError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 3 or header[0] != "case_id" or header[1] != "label":
        raise TableError(f"{path}: header must start with case_id,label and name at least one feature")
    names = tuple(header[2:])
    if len(set(names)) != len(names):
        raise TableError(f"{path}: duplicate feature columns")
    ids, labels, values = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TableError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        if row[1] not in LABELS:
            raise TableError(f"{path}:{lineno}: unknown label {row[1]!r}")
        try:
            values.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise TableError(f"{path}:{lineno}: {exc}") from exc
        ids.append(row[0])
        labels.append(row[1])
    if not ids:
        raise TableError(f"{path}: no data rows")
    return FeatureTable(tuple(ids), tuple(labels), names, np.asarray(values, dtype=np.float64))
