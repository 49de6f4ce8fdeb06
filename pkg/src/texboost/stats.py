"""Welch two-sample t-test and the benign-vs-malignant feature report."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tables import csv_text, format_real
from .texture import FeatureVector, canonical_sort_key

_CF_TOL = 1e-12
_CF_MAX_ITER = 10_000
_TINY = 1e-300


@dataclass(frozen=True)
class TTestResult:
    mean_a: float
    mean_b: float
    t_statistic: float
    degrees_of_freedom: float
    p_value: float


def _betacf(a: float, b: float, x: float) -> float:
    """Modified Lentz evaluation of the incomplete-beta continued fraction."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _ibeta(a: float, b: float, x: float, y: float) -> float:
    """I_x(a, b) with ``y == 1 - x`` supplied separately to keep precision near 1."""
    if x == 0.0:
        return 0.0
    if y == 0.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    front = math.exp(log_front)
    # the fraction converges fast only on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    return _ibeta(a, b, x, 1.0 - x)


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for a Student t variable with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    denom = df + t * t
    return min(1.0, max(0.0, _ibeta(0.5 * df, 0.5, df / denom, t * t / denom)))


def t_test(group_a: Sequence[float], group_b: Sequence[float]) -> TTestResult:
    """Welch unequal-variance two-sided t-test of ``group_a`` vs ``group_b``.

    When both groups have zero variance the statistic is 0 (p = 1) for equal
    means and +-inf (p = 0) otherwise; df then falls back to ``n_a + n_b - 2``.
    """
    a = np.asarray(group_a, dtype=np.float64).reshape(-1)
    b = np.asarray(group_b, dtype=np.float64).reshape(-1)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each group needs at least two values")
    na, nb = a.shape[0], b.shape[0]
    mean_a, mean_b = float(a.mean()), float(b.mean())
    va = float(a.var(ddof=1)) / na
    vb = float(b.var(ddof=1)) / nb
    se2 = va + vb
    diff = mean_a - mean_b
    if se2 == 0.0:
        df = float(na + nb - 2)
        if diff == 0.0:
            return TTestResult(mean_a, mean_b, 0.0, df, 1.0)
        return TTestResult(mean_a, mean_b, math.copysign(math.inf, diff), df, 0.0)
    t = diff / math.sqrt(se2)
    # normalize before squaring so tiny variances do not underflow
    scale = max(va, vb)
    ua, ub = va / scale, vb / scale
    df = (ua + ub) ** 2 / (ua * ua / (na - 1) + ub * ub / (nb - 1))
    return TTestResult(mean_a, mean_b, t, df, student_t_two_sided_p(t, df))


def feature_comparison_report(features: Sequence[FeatureVector], labels: Sequence[str],
                              group_a: str = "benign", group_b: str = "malignant") -> dict[str, TTestResult]:
    """Per-feature Welch test between two label groups, in canonical feature order."""
    if len(features) != len(labels):
        raise ValueError("features and labels differ in length")
    idx_a = [i for i, lab in enumerate(labels) if lab == group_a]
    idx_b = [i for i, lab in enumerate(labels) if lab == group_b]
    if not idx_a or not idx_b:
        missing = group_a if not idx_a else group_b
        raise ValueError(f"no {missing} cases to compare")
    names = features[0].names
    matrix = np.array([[vec[n] for n in names] if vec.names != names else vec.values
                       for vec in features], dtype=np.float64)
    report = {}
    for col in sorted(range(len(names)), key=lambda k: canonical_sort_key(names[k])):
        report[names[col]] = t_test(matrix[idx_a, col], matrix[idx_b, col])
    return report


def report_csv_text(report: Mapping[str, TTestResult]) -> str:
    rows = [[name, format_real(r.mean_a), format_real(r.mean_b), format_real(r.t_statistic),
             format_real(r.degrees_of_freedom), format_real(r.p_value)]
            for name, r in report.items()]
    return csv_text(["feature", "mean_benign", "mean_malignant", "t", "df", "p"], rows)
