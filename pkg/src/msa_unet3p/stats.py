"""Paired one-tailed t-test and the four-level significance markers used in the tables."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats as _st

# (threshold, marker) checked in order; 0.1 and 0.2 are weak-evidence levels
MARKERS = ((0.01, "▽▽"), (0.05, "▽"), (0.1, "◇"), (0.2, "◇◇"))

# True when larger values are better
HIGHER_IS_BETTER = {"recall": True, "f1": True, "dice": True, "asd": False, "acd": False}


def paired_t(treatment, baseline) -> tuple[float, int]:
    """t statistic of the paired differences treatment - baseline, and its dof."""
    a = np.asarray(treatment, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        t = math.copysign(math.inf, mean) if mean != 0 else math.nan
    else:
        t = mean / (sd / math.sqrt(n))
    return float(t), n - 1


def one_tailed_p(t: float, df: int, greater: bool = True) -> float:
    """P-value for H1: mean difference > 0 (``greater``) or < 0."""
    if math.isnan(t):
        return math.nan
    return float(_st.t.sf(t, df) if greater else _st.t.cdf(t, df))


def paired_test(treatment, baseline, metric: str) -> dict:
    t, df = paired_t(treatment, baseline)
    p = one_tailed_p(t, df, greater=HIGHER_IS_BETTER.get(metric, True))
    return {"t": t, "df": df, "p": p, "marker": marker(p)}


def marker(p: float) -> str:
    if p is None or math.isnan(p):
        return ""
    for thr, m in MARKERS:
        if p < thr:
            return m
    return ""
