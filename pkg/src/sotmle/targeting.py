"""Clever covariates and the one-pass targeting update shared by the TMLE variants."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .core import Dataset, NuisancePair, safe_logit, stable_mean
from .fluctuation import FluctuationMode, FluctuationProblem, fit_fluctuation, update_qbar
from .kernel import Bandwidth, KernelFamily, NadarayaWatson, as_kernel


class EstimatorName(str, enum.Enum):
    TMLE1 = "tmle1"
    TMLE1STAR = "tmle1star"
    TMLE2 = "tmle2"
    ROBINS2 = "robins2"

    @property
    def smooths_scores(self):
        return self is EstimatorName.TMLE1STAR


@dataclass
class SmoothedScore:
    """Kernel estimate of the missingness score, on covariates or on fitted scores."""

    model: NadarayaWatson
    on_scores: bool
    nuisance: NuisancePair

    def features(self, w):
        if self.on_scores:
            return self.nuisance.g_values(w).reshape(-1, 1)
        return w

    def __call__(self, w):
        return self.model.predict(self.features(w))


def fit_smoothed_score(dataset: Dataset, nuisance: NuisancePair, on_scores, kernel, h):
    """Fit the kernel regression of A used in the second clever covariate."""
    kernel = as_kernel(kernel)
    bandwidth = None if kernel.family is KernelFamily.DISCRETE else h
    smoother = SmoothedScore(NadarayaWatson(kernel, bandwidth), on_scores, nuisance)
    smoother.model.fit(smoother.features(dataset.w), dataset.a)
    return smoother


def second_covariate(g, g_smooth):
    """``(1/g) * (1 - g_smooth/g)``."""
    return (1.0 - g_smooth / g) / g


@dataclass
class TargetedFit:
    qbar_star: Callable
    q_star: np.ndarray
    q_initial: np.ndarray
    g: np.ndarray
    psi: float
    epsilon: np.ndarray
    score_residuals: np.ndarray
    bandwidth: Optional[Bandwidth]
    covariates: np.ndarray
    flags: dict = field(default_factory=dict)


def target(
    dataset: Dataset,
    nuisance: NuisancePair,
    name=EstimatorName.TMLE1,
    kernel="gaussian",
    bandwidth: Optional[Bandwidth] = None,
    fluctuation=FluctuationMode.COVARIATE,
    leave_one_out=False,
    tol=1e-10,
    max_iter=100,
):
    """Run one targeting pass and return the updated outcome regression.

    ``bandwidth`` must already be resolved for the smoothed variants.
    """
    name = EstimatorName(name)
    fluctuation = FluctuationMode(fluctuation)
    if name is EstimatorName.ROBINS2:
        raise ValueError("the one-step comparator has no targeting step")
    w = dataset.w
    g_raw = nuisance.raw_g_values(w)
    g = nuisance.g_values(w)
    q = nuisance.qbar_values(w)
    h1 = 1.0 / g
    flags = {"positivity_truncated": int(np.sum(g_raw < nuisance.trunc_g))}

    def h1_at(x):
        return 1.0 / nuisance.g_values(x)

    if name is EstimatorName.TMLE1:
        covariates = h1.reshape(-1, 1)
        h_at = h1_at
    else:
        if fluctuation is FluctuationMode.WEIGHTED:
            raise ValueError("weighted fluctuation only applies to the first-order TMLE")
        smoother = fit_smoothed_score(dataset, nuisance, name.smooths_scores, kernel, bandwidth)
        g_smooth = smoother.model.predict(smoother.features(w), leave_one_out=leave_one_out)
        flags["kernel_fallbacks"] = smoother.model.n_fallback_
        covariates = np.column_stack([h1, second_covariate(g, g_smooth)])

        def h_at(x):
            gx = nuisance.g_values(x)
            return np.column_stack([1.0 / gx, second_covariate(gx, smoother(x))])

    obs = dataset.observed
    problem = FluctuationProblem(
        offsets=safe_logit(q[obs]),
        covariates=covariates[obs],
        outcomes=dataset.y[obs],
        mode=fluctuation,
    )
    result = fit_fluctuation(problem, tol=tol, max_iter=max_iter)
    flags["fluctuation_iterations"] = result.n_iter
    if result.dropped_column:
        flags["second_covariate_dropped"] = True

    if fluctuation is FluctuationMode.WEIGHTED:
        shift = np.full(dataset.n, result.epsilon[0])

        def h_at(x):
            return np.ones((np.asarray(x).shape[0], 1))

    else:
        shift = covariates @ result.epsilon
    q_star = expit(safe_logit(q) + shift)
    return TargetedFit(
        qbar_star=update_qbar(nuisance.qbar, result.epsilon, h_at),
        q_star=q_star,
        q_initial=q,
        g=g,
        psi=stable_mean(q_star),
        epsilon=result.epsilon,
        score_residuals=result.score_residuals,
        bandwidth=bandwidth if name is not EstimatorName.TMLE1 else None,
        covariates=covariates,
        flags=flags,
    )
