"""Accuracy-matrix metrics and the paired t-test.

``acc[k][j]`` is the test accuracy on task ``j`` measured after training
task ``k`` (0-based, ``j <= k``).  Functions accept either the matrix or any
object with an ``acc`` attribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Two-sided 0.05 critical values of Student's t, indexed by degrees of freedom.
T_CRIT_05 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365, 8: 2.306,
    9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145, 15: 2.131,
    16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086, 21: 2.080, 22: 2.074,
    23: 2.069, 24: 2.064, 25: 2.060, 26: 2.056, 27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
}
T_CRIT_05_LARGE = 1.960


def _matrix(report_or_acc):
    return getattr(report_or_acc, "acc", report_or_acc)


def average_accuracy(report_or_acc) -> float:
    acc = _matrix(report_or_acc)
    n = len(acc)
    if n == 0 or len(acc[-1]) != n or any(v is None or math.isnan(v) for v in acc[-1]):
        raise ValueError("final boundary is missing accuracy entries")
    return float(np.mean(acc[-1]))


def taskwise_curve(report_or_acc) -> list[tuple[int, float]]:
    acc = _matrix(report_or_acc)
    return [(k + 1, float(np.mean(row[:k + 1]))) for k, row in enumerate(acc)]


def forgetting(report_or_acc) -> list[float]:
    """Per task ``j``: best accuracy at any boundary ``k >= j`` minus the final accuracy."""
    acc = _matrix(report_or_acc)
    n = len(acc)
    return [float(max(acc[k][j] for k in range(j, n)) - acc[n - 1][j]) for j in range(n)]


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    significant: bool
    mean_diff: float
    sd_diff: float


def t_critical(df: int) -> float:
    return T_CRIT_05.get(df, T_CRIT_05_LARGE if df > 30 else float("nan"))


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test at the 0.05 level on ``a - b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError(f"paired samples need equal length >= 2, got {a.shape} and {b.shape}")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, df, False, mean, sd)
        return TTestResult(math.copysign(math.inf, mean), df, True, mean, sd)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, df, abs(t) > t_critical(df), mean, sd)
