"""Average treatment effect as two missing-outcome problems.

The mean potential outcome under treatment is the mean of an outcome that
is "observed" only for treated units, and likewise for control. Each arm
gets its own nuisance fits and its own targeting step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from ._validation import check_binary, check_covariates
from .core import Dataset, EstimateReport, NuisancePair
from .estimators import EstimatorConfig, VarianceMode, bootstrap_se, estimate, scale_outcome, unscale
from .learners import LearnerTarget, LogisticGLM, as_predictor, fit_learner


@dataclass(frozen=True)
class TreatmentData:
    """Covariates, binary treatment and outcome on its original scale.

    ``observed`` marks units whose outcome was recorded; it defaults to all.
    """

    w: np.ndarray
    t: np.ndarray
    y: np.ndarray
    observed: Optional[np.ndarray] = None

    def __post_init__(self):
        w = check_covariates(self.w)
        t = check_binary(self.t, "t")
        obs = np.ones(w.shape[0], dtype=np.int8) if self.observed is None else check_binary(self.observed, "a")
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if not (w.shape[0] == t.shape[0] == y.shape[0] == obs.shape[0]):
            raise ValueError("w, t, y and the observation indicator differ in length")
        if np.any(np.isnan(y[obs == 1])):
            raise ValueError("missing outcome for observed unit")
        for arm in (0, 1):
            if not np.any((t == arm) & (obs == 1)):
                raise ValueError(f"treatment arm {arm} has no observed outcomes")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", np.where(obs == 1, y, np.nan))
        object.__setattr__(self, "observed", obs)

    @property
    def n(self):
        return self.w.shape[0]

    def take(self, index):
        return TreatmentData(self.w[index], self.t[index], self.y[index], self.observed[index])

    def arm(self, treated, y_scaled):
        a = (self.t == (1 if treated else 0)) & (self.observed == 1)
        return Dataset(self.w, a.astype(np.int8), np.where(a, y_scaled, np.nan))


@dataclass
class AteResult:
    psi1: float
    psi0: float
    diff: float
    se: float
    ci_lower: float
    ci_upper: float
    report_treated: EstimateReport
    report_control: EstimateReport
    y_min: float = 0.0
    y_max: float = 1.0
    bootstrap_failures: Optional[int] = None

    @property
    def ci(self):
        return (self.ci_lower, self.ci_upper)


def _is_binary(y):
    vals = y[~np.isnan(y)]
    return np.all(np.isin(vals, (0.0, 1.0)))


def _arm_nuisance(dataset, outcome_learner, missingness_learner, trunc_g):
    g = fit_learner(missingness_learner, dataset, LearnerTarget.MISSINGNESS)
    q = fit_learner(outcome_learner, dataset, LearnerTarget.OUTCOME_GIVEN_OBSERVED)
    return NuisancePair(as_predictor(q), as_predictor(g), trunc_g)


def _point(data, config, outcome_learner, missingness_learner, scale_range, nuisances=None):
    lo, hi = scale_range
    y_scaled = (data.y - lo) / (hi - lo)
    reports, fitted = [], []
    for k, treated in enumerate((True, False)):
        ds = data.arm(treated, y_scaled)
        nuisance = (
            nuisances[k]
            if nuisances is not None
            else _arm_nuisance(ds, outcome_learner, missingness_learner, config.trunc_g)
        )
        fitted.append(nuisance)
        reports.append(estimate(ds, nuisance, config))
    return reports, fitted, lo, hi


def ate(
    data: TreatmentData,
    config: Optional[EstimatorConfig] = None,
    outcome_learner=None,
    missingness_learner=None,
    scale="auto",
    refit_nuisance=True,
):
    """Estimate ``E[Y_1]``, ``E[Y_0]`` and their difference.

    Continuous outcomes are mapped to [0, 1] with the pooled min and max
    (``scale="auto"``) and all returned quantities are back on the original
    scale. With influence-function variance the interval for the difference
    uses the sum of the two arm variances. With bootstrap variance the whole
    two-arm pipeline is resampled, refitting the nuisances when
    ``refit_nuisance`` is true.
    """
    config = EstimatorConfig() if config is None else config
    outcome_learner = LogisticGLM() if outcome_learner is None else outcome_learner
    missingness_learner = LogisticGLM() if missingness_learner is None else missingness_learner
    do_scale = (not _is_binary(data.y)) if scale == "auto" else bool(scale)
    if config.variance is VarianceMode.KNOWN:
        raise ValueError("known-variance mode is not defined for the treatment effect")

    point_config = replace(config, variance=VarianceMode.INFLUENCE)
    scale_range = scale_outcome(data.y)[1:] if do_scale else (0.0, 1.0)
    reports, nuisances, lo, hi = _point(data, point_config, outcome_learner, missingness_learner, scale_range)
    span = hi - lo
    for r in reports:
        r.psi, r.se = unscale(r.psi, lo, hi), r.se * span
        r.ci_lower, r.ci_upper = unscale(r.ci_lower, lo, hi), unscale(r.ci_upper, lo, hi)
    psi1, psi0 = reports[0].psi, reports[1].psi
    diff = psi1 - psi0

    if config.variance is VarianceMode.INFLUENCE:
        se = float(np.hypot(reports[0].se, reports[1].se))
        half = float(norm.ppf(0.5 + config.ci_level / 2.0)) * se
        return AteResult(psi1, psi0, diff, se, diff - half, diff + half, reports[0], reports[1], lo, hi)

    def pipeline(sample):
        fixed = None if refit_nuisance else nuisances
        (r1, r0), _, _, _ = _point(sample, point_config, outcome_learner, missingness_learner, scale_range, fixed)
        return (r1.psi - r0.psi) * span

    boot = bootstrap_se(data, pipeline, config.bootstrap_reps, config.seed, config.ci_level)
    return AteResult(
        psi1, psi0, diff, boot.se, boot.ci_lower, boot.ci_upper, reports[0], reports[1], lo, hi, boot.failures
    )
