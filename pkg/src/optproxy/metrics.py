"""Aggregations used in the evaluation reports."""

import numpy as np

GAP_SHIFT = 0.01
VIOLATION_SHIFT = 1.0


def shifted_geomean(values, shift):
    """exp(mean(log(v + shift))) - shift; values must exceed -shift."""
    v = np.asarray(values, dtype=float) + shift
    if v.size == 0:
        return float("nan")
    if np.any(v <= 0):
        raise ValueError("shifted values must be positive")
    return float(np.exp(np.mean(np.log(v))) - shift)


def summarize(values, shift=GAP_SHIFT):
    v = np.asarray(values, dtype=float)
    return {
        "mean": float(v.mean()),
        "geomean": shifted_geomean(v, shift),
        "min": float(v.min()),
        "p99": float(np.percentile(v, 99)),
        "max": float(v.max()),
    }
