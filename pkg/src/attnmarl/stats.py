"""Statistics for learning-curve aggregation and run comparison."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr, stdtrit


@dataclass(frozen=True)
class WelchResult:
    statistic: float
    dof: float
    p_value: float


def welch_t_test(a, b) -> WelchResult:
    """Two-sample unequal-variance t-test (two-sided).

    Identical samples give statistic 0 and p = 1 by convention (the test has
    nothing to distinguish).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("welch_t_test needs at least two samples per side")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        return WelchResult(statistic=0.0, dof=float(a.size + b.size - 2), p_value=1.0)
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2.0 * float(stdtr(dof, -abs(t)))
    return WelchResult(statistic=float(t), dof=float(dof), p_value=p)


def t_confidence_interval(values, level: float = 0.95):
    """Mean and two-sided t-interval. A single value collapses to the mean."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot form a confidence interval from no values")
    mean = float(values.mean())
    if values.size == 1:
        return mean, mean, mean
    t_crit = float(stdtrit(values.size - 1, 0.5 + level / 2.0))
    half = t_crit * float(values.std(ddof=1)) / math.sqrt(values.size)
    return mean, mean - half, mean + half


def aggregate_curves(per_seed: dict, level: float = 0.95):
    """Aggregate {seed: (iterations, values)} into per-iteration rows of
    (iteration, mean, ci_low, ci_high, n). All seeds must share one iteration
    grid; anything else is a sign of mixed-up runs."""
    if not per_seed:
        raise ValueError("no curves to aggregate")
    seeds = sorted(per_seed)
    grid = np.asarray(per_seed[seeds[0]][0])
    for s in seeds[1:]:
        if not np.array_equal(np.asarray(per_seed[s][0]), grid):
            raise ValueError(f"iteration grid of seed {s} does not match seed {seeds[0]}")
    rows = []
    for idx, it in enumerate(grid):
        vals = np.array([per_seed[s][1][idx] for s in seeds], dtype=np.float64)
        mean, lo, hi = t_confidence_interval(vals, level)
        rows.append((int(it), mean, lo, hi, len(seeds)))
    return rows
