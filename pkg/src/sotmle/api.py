"""Scikit-learn style front ends for the mean-outcome and treatment-effect workflows."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary, check_covariates
from .ate import TreatmentData, ate
from .core import Dataset, NuisancePair
from .estimators import (
    EstimatorConfig,
    VarianceMode,
    bootstrap_se,
    estimate,
    resolve_bandwidth,
    scale_outcome,
    unscale,
)
from .kernel import Bandwidth
from .learners import LearnerTarget, LogisticGLM, as_predictor, fit_learner
from .targeting import EstimatorName, target


def _is_binary(y):
    vals = y[np.isfinite(y)]
    return bool(np.all(np.isin(vals, (0.0, 1.0))))


class _ConfigMixin:
    def _config(self, variance=None):
        return EstimatorConfig(
            estimator=self.estimator,
            kernel=self.kernel,
            bandwidth=self.bandwidth,
            fluctuation=self.fluctuation,
            trunc_g=self.trunc_g,
            ci_level=self.ci_level,
            variance=self.variance if variance is None else variance,
            known_variance=getattr(self, "known_variance", None),
            bootstrap_reps=self.bootstrap_reps,
            cv_folds=self.cv_folds,
            seed=self.seed,
        )

    def _learners(self):
        q = LogisticGLM() if self.outcome_learner is None else self.outcome_learner
        g = LogisticGLM() if self.missingness_learner is None else self.missingness_learner
        return q, g


class TargetedMean(_ConfigMixin, BaseEstimator):
    """Mean of an outcome that is missing at random.

    Parameters
    ----------
    estimator : {"tmle1", "tmle1star", "tmle2", "robins2"}
    outcome_learner, missingness_learner : classifier or None
        Any sklearn-style classifier with ``predict_proba``; defaults to a
        logistic GLM linear in the covariates. Clones are fitted.
    kernel : str
    bandwidth : "default", "cv" or positive float(s)
    fluctuation : {"covariate", "weighted"}
    trunc_g : float
        Lower bound applied to the fitted missingness score.
    ci_level : float
    variance : {"influence", "known", "bootstrap"}
    known_variance : float or None
        Asymptotic variance used when ``variance="known"``.
    bootstrap_reps : int
    refit_in_bootstrap : bool
        Refit the nuisances on each bootstrap sample.
    cv_folds : int
    scale : "auto" or bool
        Map a continuous outcome onto [0, 1] before estimation.
    seed : int

    Attributes
    ----------
    psi_, se_, ci_ : estimate, standard error and interval on the outcome scale
    report_ : EstimateReport in the [0, 1] working scale
    nuisance_ : NuisancePair
    """

    def __init__(
        self,
        estimator="tmle1",
        outcome_learner=None,
        missingness_learner=None,
        kernel="gaussian",
        bandwidth="default",
        fluctuation="covariate",
        trunc_g=0.01,
        ci_level=0.95,
        variance="influence",
        known_variance=None,
        bootstrap_reps=200,
        refit_in_bootstrap=True,
        cv_folds=5,
        scale="auto",
        seed=0,
    ):
        self.estimator = estimator
        self.outcome_learner = outcome_learner
        self.missingness_learner = missingness_learner
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.fluctuation = fluctuation
        self.trunc_g = trunc_g
        self.ci_level = ci_level
        self.variance = variance
        self.known_variance = known_variance
        self.bootstrap_reps = bootstrap_reps
        self.refit_in_bootstrap = refit_in_bootstrap
        self.cv_folds = cv_folds
        self.scale = scale
        self.seed = seed

    def _nuisance(self, dataset):
        q_learner, g_learner = self._learners()
        q = fit_learner(q_learner, dataset, LearnerTarget.OUTCOME_GIVEN_OBSERVED)
        g = fit_learner(g_learner, dataset, LearnerTarget.MISSINGNESS)
        return NuisancePair(as_predictor(q), as_predictor(g), self.trunc_g)

    def fit(self, X, a, y):
        w = check_covariates(X, "X")
        a = check_binary(a)
        y = np.asarray(y, dtype=float).reshape(-1)
        y = np.where(a == 1, y, np.nan)
        do_scale = (not _is_binary(y)) if self.scale == "auto" else bool(self.scale)
        if do_scale:
            y, lo, hi = scale_outcome(y)
        else:
            lo, hi = 0.0, 1.0
        dataset = Dataset(w, a, y)
        config = self._config()
        refit_boot = config.variance is VarianceMode.BOOTSTRAP and self.refit_in_bootstrap
        point = replace(config, variance=VarianceMode.INFLUENCE) if refit_boot else config
        nuisance = self._nuisance(dataset)
        report = estimate(dataset, nuisance, point)
        span = hi - lo
        se, ci = report.se * span, (unscale(report.ci_lower, lo, hi), unscale(report.ci_upper, lo, hi))
        if refit_boot:

            def pipeline(sample):
                return estimate(sample, self._nuisance(sample), point).psi

            boot = bootstrap_se(dataset, pipeline, config.bootstrap_reps, config.seed, config.ci_level)
            se, ci = boot.se * span, (unscale(boot.ci_lower, lo, hi), unscale(boot.ci_upper, lo, hi))
            report.flags["bootstrap_failures"] = boot.failures
        self.__dict__.pop("qbar_star_", None)
        self.dataset_ = dataset
        self.nuisance_ = nuisance
        self.report_ = report
        self.y_range_ = (lo, hi)
        self.psi_ = unscale(report.psi, lo, hi)
        self.se_ = float(se)
        self.ci_ = ci
        self.n_features_in_ = w.shape[1]
        return self

    def predict(self, X):
        """Targeted outcome regression on the original outcome scale.

        The one-step comparator has no targeting step and returns the initial fit.
        """
        check_is_fitted(self, "report_")
        w = check_covariates(X, "X")
        name = EstimatorName(self.estimator)
        lo, hi = self.y_range_
        if name is EstimatorName.ROBINS2:
            return unscale(self.nuisance_.qbar_values(w), lo, hi)
        if not hasattr(self, "qbar_star_"):
            config = self._config(VarianceMode.INFLUENCE)
            used = self.report_.bandwidth_used
            if used is not None:
                config = replace(config, bandwidth=Bandwidth(used))
            h = resolve_bandwidth(self.dataset_, self.nuisance_, config)
            fit = target(self.dataset_, self.nuisance_, name, config.kernel, h, config.fluctuation)
            self.qbar_star_ = fit.qbar_star
        return unscale(self.qbar_star_(w), lo, hi)


class TreatmentEffect(_ConfigMixin, BaseEstimator):
    """Average treatment effect from two missing-outcome problems, one per arm.

    Parameters match :class:`TargetedMean` except ``known_variance``, which
    is not available here.

    Attributes
    ----------
    psi1_, psi0_ : mean potential outcomes
    ate_ : their difference
    se_, ci_ : standard error and interval for the difference
    result_ : AteResult
    """

    def __init__(
        self,
        estimator="tmle1",
        outcome_learner=None,
        missingness_learner=None,
        kernel="gaussian",
        bandwidth="default",
        fluctuation="covariate",
        trunc_g=0.01,
        ci_level=0.95,
        variance="influence",
        bootstrap_reps=200,
        refit_in_bootstrap=True,
        cv_folds=5,
        scale="auto",
        seed=0,
    ):
        self.estimator = estimator
        self.outcome_learner = outcome_learner
        self.missingness_learner = missingness_learner
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.fluctuation = fluctuation
        self.trunc_g = trunc_g
        self.ci_level = ci_level
        self.variance = variance
        self.bootstrap_reps = bootstrap_reps
        self.refit_in_bootstrap = refit_in_bootstrap
        self.cv_folds = cv_folds
        self.scale = scale
        self.seed = seed

    def fit(self, X, t, y, observed=None):
        data = TreatmentData(X, t, y, observed)
        q_learner, g_learner = self._learners()
        result = ate(data, self._config(), q_learner, g_learner, self.scale, self.refit_in_bootstrap)
        self.result_ = result
        self.psi1_, self.psi0_, self.ate_ = result.psi1, result.psi0, result.diff
        self.se_ = result.se
        self.ci_ = result.ci
        self.n_features_in_ = data.w.shape[1]
        return self
