"""Data containers, the plug-in mean functional, its canonical gradient and
the second- and third-order remainder terms of the missing-outcome model.

Predictors throughout the package are plain callables mapping an ``(m, d)``
covariate array to ``m`` values. They are evaluated in batches, never one
point at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from ._validation import (
    as_predictions,
    check_binary,
    check_covariates,
    check_missing_outcome,
)

Predictor = Callable[[np.ndarray], np.ndarray]

DEFAULT_TRUNC_G = 0.01
QBAR_BOUND = 1e-4
# Sums over at least this many terms go through math.fsum.
COMPENSATED_SUM_THRESHOLD = 100_000

ESTIMATOR_NAMES = ("TMLE1", "TMLE1STAR", "TMLE2", "ROBINS2")


def clamp_g(values, trunc_g=DEFAULT_TRUNC_G):
    return np.clip(np.asarray(values, dtype=float), trunc_g, 1.0)


def clamp_qbar(values):
    return np.clip(np.asarray(values, dtype=float), QBAR_BOUND, 1.0 - QBAR_BOUND)


def safe_logit(p):
    return logit(clamp_qbar(p))


def stable_mean(values):
    """Mean of a 1-d array, compensated for long arrays."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("empty dataset")
    if values.size >= COMPENSATED_SUM_THRESHOLD:
        return math.fsum(values) / values.size
    return float(np.sum(values) / values.size)


@dataclass(frozen=True)
class Observation:
    """A single unit ``(w, a, y)``; ``y`` is ``None`` whenever ``a == 0``."""

    w: np.ndarray
    a: int
    y: Optional[float] = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if not np.all(np.isfinite(w)):
            raise ValueError("covariates must be finite")
        object.__setattr__(self, "w", w)
        if self.a not in (0, 1):
            raise ValueError(f"a must be 0 or 1, got {self.a!r}")
        if self.a == 0 and self.y is not None:
            raise ValueError("outcome present for unobserved unit")


@dataclass(frozen=True)
class Dataset:
    """Columnar sample of the observed data structure ``(W, A, AY)``.

    Parameters
    ----------
    w : array of shape (n, d)
        Covariates.
    a : array of shape (n,)
        Missingness indicator, 1 when the outcome is observed.
    y : array of shape (n,)
        Outcome, NaN exactly where ``a == 0``.
    """

    w: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        w = check_covariates(self.w)
        a = check_binary(self.a)
        if a.shape[0] != w.shape[0]:
            raise ValueError(f"a has {a.shape[0]} rows, w has {w.shape[0]}")
        y = check_missing_outcome(a, self.y)
        if w.shape[0] < 1:
            raise ValueError("empty dataset")
        if not np.any(a == 1):
            raise ValueError("no observed outcomes; outcome regression is unidentifiable")
        y_obs = y[a == 1]
        if np.any((y_obs < 0.0) | (y_obs > 1.0)):
            raise ValueError("observed outcomes must lie in [0, 1]; rescale first")
        for name, arr in (("w", w), ("a", a), ("y", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return self.w.shape[0]

    @property
    def d(self):
        return self.w.shape[1]

    @property
    def observed(self):
        return self.a == 1

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]):
        if len(observations) == 0:
            raise ValueError("empty dataset")
        dims = {o.w.shape[0] for o in observations}
        if len(dims) != 1:
            raise ValueError(f"observations have unequal covariate dimensions {sorted(dims)}")
        w = np.vstack([o.w for o in observations])
        a = np.array([o.a for o in observations])
        y = np.array([np.nan if o.y is None else o.y for o in observations], dtype=float)
        return cls(w, a, y)

    def observations(self):
        for i in range(self.n):
            yield Observation(self.w[i], int(self.a[i]), None if self.a[i] == 0 else float(self.y[i]))

    def take(self, index):
        index = np.asarray(index)
        return Dataset(self.w[index], self.a[index], self.y[index])

    def y_filled(self, fill=0.0):
        """Outcome with unobserved entries replaced by ``fill``."""
        return np.where(self.observed, self.y, fill)


@dataclass(frozen=True)
class NuisancePair:
    """Outcome regression and missingness score, with truncation applied on access."""

    qbar: Predictor
    g: Predictor
    trunc_g: float = DEFAULT_TRUNC_G

    def qbar_values(self, w):
        w = check_covariates(w)
        return clamp_qbar(as_predictions(self.qbar(w), w.shape[0], "qbar"))

    def g_values(self, w):
        w = check_covariates(w)
        return clamp_g(as_predictions(self.g(w), w.shape[0], "g"), self.trunc_g)

    def raw_g_values(self, w):
        w = check_covariates(w)
        return as_predictions(self.g(w), w.shape[0], "g")


@dataclass
class EstimateReport:
    """Result of one estimator run, in scaled outcome units unless noted."""

    estimator_name: str
    psi: float
    se: float
    ci_lower: float
    ci_upper: float
    epsilon: np.ndarray
    score_residuals: np.ndarray
    bandwidth_used: Optional[np.ndarray] = None
    kernel: Optional[str] = None
    n: int = 0
    flags: dict = field(default_factory=dict)

    @property
    def out_of_range(self):
        return not (0.0 <= self.psi <= 1.0)

    def to_dict(self):
        return {
            "estimator": self.estimator_name,
            "psi": self.psi,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "epsilon": [float(e) for e in np.atleast_1d(self.epsilon)],
            "score_residuals": [float(s) for s in np.atleast_1d(self.score_residuals)],
            "bandwidth": None
            if self.bandwidth_used is None
            else [float(h) for h in np.atleast_1d(self.bandwidth_used)],
            "kernel": self.kernel,
            "n": self.n,
            "flags": dict(self.flags),
        }


def plugin_mean(dataset: Dataset, qbar: Predictor):
    """Substitution estimate: the empirical covariate mean of ``qbar``."""
    if dataset is None or dataset.n == 0:
        raise ValueError("empty dataset")
    values = as_predictions(qbar(dataset.w), dataset.n, "qbar")
    return stable_mean(values)


def eif_d1(obs: Observation, nuisance: NuisancePair, psi: float):
    """Canonical gradient of the mean functional at one observation."""
    if obs.a == 1 and obs.y is None:
        raise ValueError("missing outcome for observed unit")
    w = obs.w.reshape(1, -1)
    q = float(nuisance.qbar_values(w)[0])
    if obs.a == 0:
        return q - psi
    g = float(nuisance.g_values(w)[0])
    return (obs.y - q) / g + q - psi


def eif_values(dataset: Dataset, qbar_values, g_values, psi):
    """Vectorised canonical gradient over a dataset from precomputed predictions."""
    resid = np.where(dataset.observed, dataset.y_filled() - qbar_values, 0.0)
    return resid / g_values + qbar_values - psi


def _eval_points(points, weights):
    points = check_covariates(points, "eval_points")
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    else:
        weights = np.asarray(weights, dtype=float).reshape(-1)
        if weights.shape[0] != points.shape[0]:
            raise ValueError("weights and eval_points differ in length")
        weights = weights / weights.sum()
    return points, weights


def _g_ratio(points, nuisance, truth):
    g = as_predictions(nuisance.g(points), points.shape[0], "g")
    if np.any(g <= 0):
        raise ValueError("positivity violation")
    g0 = as_predictions(truth.g(points), points.shape[0], "true g")
    return g0 / g


def remainder_r2(eval_points, nuisance: NuisancePair, truth: NuisancePair, weights=None):
    """Second-order remainder of the first-order expansion at the given truth.

    Integrates ``(1 - g0/g) * (qbar - qbar0)`` against the weighted
    evaluation points, which stand in for the true covariate law.
    """
    points, weights = _eval_points(eval_points, weights)
    ratio = _g_ratio(points, nuisance, truth)
    diff = as_predictions(nuisance.qbar(points), points.shape[0], "qbar") - as_predictions(
        truth.qbar(points), points.shape[0], "true qbar"
    )
    return float(np.sum(weights * (1.0 - ratio) * diff))


def remainder_r3(
    eval_points,
    nuisance: NuisancePair,
    density_ratio: Predictor,
    truth: NuisancePair,
    weights=None,
):
    """Third-order remainder of the second-order expansion.

    ``density_ratio(w)`` supplies ``q_true(w) / q(w)``, so either the
    covariate density or the density of the true score values can be used.
    """
    points, weights = _eval_points(eval_points, weights)
    ratio = _g_ratio(points, nuisance, truth)
    q_ratio = as_predictions(density_ratio(points), points.shape[0], "density_ratio")
    diff = as_predictions(nuisance.qbar(points), points.shape[0], "qbar") - as_predictions(
        truth.qbar(points), points.shape[0], "true qbar"
    )
    return float(np.sum(weights * (1.0 - ratio * q_ratio) * (1.0 - ratio) * diff))


def expit_logit_update(qbar_values, shift):
    return expit(safe_logit(qbar_values) + shift)
