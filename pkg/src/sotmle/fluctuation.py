"""Targeting step: offset logistic regression on one or two clever covariates."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_expit

from .core import safe_logit

SEPARATION_BOUND = 50.0
COLLINEARITY_TOL = 1e-10


class FluctuationMode(str, enum.Enum):
    COVARIATE = "covariate"
    WEIGHTED = "weighted"


class FluctuationError(RuntimeError):
    """Raised when the targeting regression cannot be solved.

    ``epsilon`` and ``score_residuals`` hold the best iterate reached.
    """

    def __init__(self, message, epsilon=None, score_residuals=None):
        super().__init__(message)
        self.epsilon = epsilon
        self.score_residuals = score_residuals


class CollinearCovariatesWarning(UserWarning):
    pass


@dataclass
class FluctuationProblem:
    """Rows are the observed units.

    In ``COVARIATE`` mode the columns of ``covariates`` are regressors with
    no intercept. In ``WEIGHTED`` mode the single column is used as case
    weights for an intercept-only fit.
    """

    offsets: np.ndarray
    covariates: np.ndarray
    outcomes: np.ndarray
    mode: FluctuationMode = FluctuationMode.COVARIATE

    def __post_init__(self):
        self.mode = FluctuationMode(self.mode)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(-1)
        cov = np.asarray(self.covariates, dtype=float)
        self.covariates = cov.reshape(-1, 1) if cov.ndim == 1 else cov
        self.outcomes = np.asarray(self.outcomes, dtype=float).reshape(-1)
        m, k = self.covariates.shape
        if not (self.offsets.shape[0] == m == self.outcomes.shape[0]):
            raise ValueError("offsets, covariates and outcomes differ in length")
        if k not in (1, 2):
            raise ValueError(f"fluctuation takes 1 or 2 covariates, got {k}")
        if self.mode is FluctuationMode.WEIGHTED and k != 1:
            raise ValueError("weighted fluctuation takes a single covariate")
        if m < k:
            raise ValueError("fewer rows than fluctuation parameters")
        if not np.all(np.isfinite(self.covariates)) or not np.all(np.isfinite(self.offsets)):
            raise ValueError("non-finite offsets or covariates")

    def design_and_weights(self):
        if self.mode is FluctuationMode.WEIGHTED:
            return np.ones((self.covariates.shape[0], 1)), self.covariates[:, 0]
        return self.covariates, np.ones(self.covariates.shape[0])

    def fitted(self, epsilon):
        design, _ = self.design_and_weights()
        return expit(self.offsets + design @ np.asarray(epsilon, dtype=float))

    def score_residuals(self, epsilon):
        """``sum_i H_k(W_i) (Y_i - fitted_i)`` for each covariate column."""
        return self.covariates.T @ (self.outcomes - self.fitted(epsilon))

    def loglik(self, epsilon):
        design, weights = self.design_and_weights()
        return self.loglik_for(design, weights, np.asarray(epsilon, dtype=float))

    def loglik_for(self, design, weights, epsilon):
        eta = self.offsets + design @ epsilon
        y = self.outcomes
        return float(np.sum(weights * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta))))


@dataclass
class FluctuationResult:
    epsilon: np.ndarray
    score_residuals: np.ndarray
    n_iter: int
    dropped_column: bool = False
    loglik: float = np.nan
    loglik_start: float = np.nan
    notes: list = field(default_factory=list)

    def __iter__(self):
        # Allows ``eps, residuals = fit_fluctuation(...)``.
        return iter((self.epsilon, self.score_residuals))


def _collinear(covariates):
    norms = np.linalg.norm(covariates, axis=0)
    if norms[1] == 0.0 or norms[0] == 0.0:
        return True
    s = np.linalg.svd(covariates / norms, compute_uv=False)
    return s[-1] / s[0] < COLLINEARITY_TOL


def _newton(problem, design, weights, tol, max_iter):
    m = design.shape[0]
    eps = np.zeros(design.shape[1])

    def state(e):
        return design.T @ (weights * (problem.outcomes - expit(problem.offsets + design @ e)))

    ll = problem.loglik_for(design, weights, eps)
    score = state(eps)
    best = (eps.copy(), score.copy())
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) <= tol * m:
            return eps, it - 1
        p = expit(problem.offsets + design @ eps)
        info = (design * (weights * p * (1.0 - p))[:, None]).T @ design
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = eps + t * step
            ll_cand = problem.loglik_for(design, weights, cand)
            if ll_cand >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise FluctuationError("step-halving failed to improve the likelihood", *best)
        eps, ll = cand, ll_cand
        if np.max(np.abs(eps)) > SEPARATION_BOUND:
            raise FluctuationError("separation in fluctuation", eps.copy(), state(eps))
        score = state(eps)
        if np.max(np.abs(score)) < np.max(np.abs(best[1])):
            best = (eps.copy(), score.copy())
    if np.max(np.abs(score)) <= tol * m:
        return eps, max_iter
    raise FluctuationError(f"fluctuation did not converge in {max_iter} iterations", *best)


def fit_fluctuation(problem: FluctuationProblem, tol=1e-10, max_iter=100):
    """Maximise the offset Bernoulli likelihood over the fluctuation parameter.

    Damped Newton-Raphson from zero. Converged when every score is at most
    ``tol`` times the number of rows. When the two covariate columns are
    collinear the second one is dropped with a warning and its coefficient
    reported as zero.
    """
    design, weights = problem.design_and_weights()
    dropped = False
    if design.shape[1] == 2 and _collinear(design):
        warnings.warn(
            "clever covariates are collinear; fitting the first column only",
            CollinearCovariatesWarning,
            stacklevel=2,
        )
        design = design[:, :1]
        dropped = True
    ll0 = problem.loglik_for(design, weights, np.zeros(design.shape[1]))
    eps, n_iter = _newton(problem, design, weights, tol, max_iter)
    if dropped:
        eps = np.array([eps[0], 0.0])
    return FluctuationResult(
        epsilon=eps,
        score_residuals=problem.score_residuals(eps),
        n_iter=n_iter,
        dropped_column=dropped,
        loglik=problem.loglik(eps),
        loglik_start=ll0,
    )


def update_qbar(qbar: Callable, epsilon, h_covariates: Callable):
    """Return the fluctuated predictor ``w -> expit(logit qbar(w) + H(w) @ epsilon)``."""
    epsilon = np.atleast_1d(np.asarray(epsilon, dtype=float))

    def qbar_star(w):
        h = np.asarray(h_covariates(w), dtype=float)
        h = h.reshape(-1, 1) if h.ndim == 1 else h
        if h.shape[1] != epsilon.shape[0]:
            raise ValueError(f"{h.shape[1]} covariates for {epsilon.shape[0]} coefficients")
        return expit(safe_logit(qbar(w)) + h @ epsilon)

    return qbar_star
