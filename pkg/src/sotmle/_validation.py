"""Input validation helpers shared by the estimator classes and the functional API."""

from __future__ import annotations

import numpy as np


def check_covariates(w, name="w"):
    """Return covariates as a finite 2-d float array of shape (n, d)."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w.reshape(-1, 1)
    if w.ndim != 2:
        raise ValueError(f"{name} must be 1-d or 2-d, got shape {w.shape}")
    if w.shape[1] < 1:
        raise ValueError(f"{name} has no columns")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"{name} contains non-finite values")
    return w


def check_binary(a, name="a"):
    a = np.asarray(a)
    if a.ndim != 1:
        a = a.reshape(-1)
    as_float = a.astype(float)
    if not np.all(np.isin(as_float, (0.0, 1.0))):
        raise ValueError(f"{name} must contain only 0/1 values")
    return as_float.astype(np.int8)


def check_missing_outcome(a, y):
    """Return y as float with NaN exactly where a == 0.

    Raises when an observed unit has no outcome. Values supplied for
    unobserved units are an error, because they usually indicate a
    mis-coded indicator column.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.shape[0] != a.shape[0]:
        raise ValueError(f"y has {y.shape[0]} entries, a has {a.shape[0]}")
    observed = a == 1
    if np.any(np.isnan(y[observed])):
        row = int(np.flatnonzero(observed & np.isnan(y))[0])
        raise ValueError(f"missing outcome for observed unit (row {row})")
    if np.any(~np.isnan(y[~observed])):
        row = int(np.flatnonzero(~observed & ~np.isnan(y))[0])
        raise ValueError(f"outcome present for unobserved unit (row {row})")
    if np.any(~np.isfinite(y[observed])):
        raise ValueError("y contains infinite values")
    out = y.copy()
    out[~observed] = np.nan
    return out


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability_open(value, name):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


def as_predictions(values, n, name):
    """Coerce a predictor's output to a 1-d float array of length n."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] == 1 and n != 1:
        values = np.full(n, values[0])
    if values.shape[0] != n:
        raise ValueError(f"{name} returned {values.shape[0]} values for {n} points")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{name} returned non-finite values")
    return values
