"""First- and second-order estimators of a mean outcome missing at random.

``tmle1``, ``tmle1star`` and ``tmle2`` are substitution estimators: they
target the outcome regression and average it over the sample covariates, so
the estimate always lies in [0, 1]. ``robins_so`` is the one-step
second-order comparator, which adds explicit correction terms and can leave
the unit interval.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.stats import norm

from ._validation import check_positive_int, check_probability_open
from .core import (
    DEFAULT_TRUNC_G,
    Dataset,
    EstimateReport,
    NuisancePair,
    clamp_g,
    clamp_qbar,
    eif_values,
    stable_mean,
)
from .fluctuation import FluctuationError, FluctuationMode
from .kernel import (
    DENSITY_FLOOR,
    Bandwidth,
    KernelFamily,
    SmoothingTarget,
    as_bandwidth,
    as_kernel,
    default_bandwidth,
    kernel_eval,
    kernel_sums,
)
from .selection import cv_bandwidth
from .targeting import EstimatorName, target

logger = logging.getLogger(__name__)

BandwidthChoice = Union[str, float, Sequence[float], Bandwidth]


class VarianceMode(str, enum.Enum):
    INFLUENCE = "influence"
    KNOWN = "known"
    BOOTSTRAP = "bootstrap"


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings shared by every estimator.

    ``bandwidth`` is ``"default"`` (rule of thumb), ``"cv"`` (cross-validated
    choice) or a fixed positive value per dimension. With
    ``variance="known"``, ``known_variance`` is the asymptotic variance of
    the estimator and the standard error is ``sqrt(known_variance / n)``.
    """

    estimator: EstimatorName = EstimatorName.TMLE1
    kernel: object = "gaussian"
    bandwidth: BandwidthChoice = "default"
    fluctuation: FluctuationMode = FluctuationMode.COVARIATE
    trunc_g: float = DEFAULT_TRUNC_G
    trunc_q: float = DENSITY_FLOOR
    ci_level: float = 0.95
    variance: VarianceMode = VarianceMode.INFLUENCE
    known_variance: Optional[float] = None
    bootstrap_reps: int = 200
    cv_folds: int = 5
    cv_grid: Optional[tuple] = None
    leave_one_out: bool = False
    seed: int = 0
    tol: float = 1e-10
    max_iter: int = 100

    def __post_init__(self):
        object.__setattr__(self, "estimator", EstimatorName(self.estimator))
        object.__setattr__(self, "kernel", as_kernel(self.kernel))
        object.__setattr__(self, "fluctuation", FluctuationMode(self.fluctuation))
        object.__setattr__(self, "variance", VarianceMode(self.variance))
        if not isinstance(self.bandwidth, str):
            object.__setattr__(self, "bandwidth", as_bandwidth(self.bandwidth))
        elif self.bandwidth not in ("default", "cv"):
            raise ValueError(f"bandwidth must be 'default', 'cv' or a number, got {self.bandwidth!r}")
        check_probability_open(self.ci_level, "ci_level")
        if not 0.0 < self.trunc_g < 1.0:
            raise ValueError("trunc_g must lie in (0, 1)")
        if self.variance is VarianceMode.KNOWN and (self.known_variance is None or self.known_variance < 0):
            raise ValueError("known variance mode needs a nonnegative known_variance")
        if self.variance is VarianceMode.BOOTSTRAP:
            check_positive_int(self.bootstrap_reps, "bootstrap_reps", minimum=100)
        check_positive_int(self.cv_folds, "cv_folds", minimum=2)

    def with_estimator(self, name):
        return replace(self, estimator=EstimatorName(name))


def _config(config, name):
    config = EstimatorConfig() if config is None else config
    return config.with_estimator(name)


def _as_nuisance(nuisance, config):
    if nuisance.trunc_g != config.trunc_g:
        return NuisancePair(nuisance.qbar, nuisance.g, config.trunc_g)
    return nuisance


def resolve_bandwidth(dataset: Dataset, nuisance: NuisancePair, config: EstimatorConfig):
    """Concrete bandwidth for the smoothed estimators, or ``None`` when unused."""
    name = config.estimator
    if name is EstimatorName.TMLE1 or config.kernel.family is KernelFamily.DISCRETE:
        return None
    if isinstance(config.bandwidth, Bandwidth):
        return config.bandwidth
    if config.bandwidth == "cv":
        if name is EstimatorName.ROBINS2:
            raise ValueError("cross-validated bandwidth is not defined for the one-step comparator")
        return cv_bandwidth(
            dataset,
            nuisance,
            candidate_grid=config.cv_grid,
            folds=config.cv_folds,
            estimator=name,
            kernel=config.kernel,
            seed=config.seed,
            fluctuation=config.fluctuation,
        ).bandwidth
    if name.smooths_scores:
        scores = nuisance.g_values(dataset.w)
        if np.ptp(scores) == 0.0:
            # Constant scores: every bandwidth gives the same smoother.
            return Bandwidth(1.0)
        return default_bandwidth(dataset, SmoothingTarget.SCORE_VALUES, scores)
    return default_bandwidth(dataset, SmoothingTarget.COVARIATES)


def _z(level):
    return float(norm.ppf(0.5 + level / 2.0))


def _variance_from_eif(eif):
    if eif.size < 2:
        raise ValueError("influence variance needs at least two observations")
    return float(np.var(eif, ddof=1) / eif.size)


def influence_variance(dataset: Dataset, qbar_star: Callable, g: Callable, psi, trunc_g=DEFAULT_TRUNC_G):
    """Estimated variance of the estimator: sample variance of the canonical gradient over ``n``."""
    q = clamp_qbar(qbar_star(dataset.w))
    gv = clamp_g(g(dataset.w), trunc_g)
    return _variance_from_eif(eif_values(dataset, q, gv, psi))


def _standard_error(dataset, eif, config, rerun):
    """Returns ``(se, bootstrap_result)``; the second item is ``None`` unless bootstrapping."""
    if config.variance is VarianceMode.INFLUENCE:
        return np.sqrt(_variance_from_eif(eif)), None
    if config.variance is VarianceMode.KNOWN:
        return np.sqrt(config.known_variance / dataset.n), None
    boot = bootstrap_se(dataset, rerun, config.bootstrap_reps, config.seed, config.ci_level)
    return boot.se, boot


def _report(name, psi, dataset, eif, config, rerun, epsilon, residuals, bandwidth, flags):
    se, boot = _standard_error(dataset, eif, config, rerun)
    if boot is None:
        half = _z(config.ci_level) * se
        lo, hi = psi - half, psi + half
    else:
        lo, hi = boot.ci_lower, boot.ci_upper
        flags["bootstrap_failures"] = boot.failures
    return EstimateReport(
        estimator_name=name.name,
        psi=float(psi),
        se=float(se),
        ci_lower=float(lo),
        ci_upper=float(hi),
        epsilon=np.atleast_1d(epsilon),
        score_residuals=np.atleast_1d(residuals),
        bandwidth_used=None if bandwidth is None else bandwidth.values,
        kernel=str(config.kernel),
        n=dataset.n,
        flags=flags,
    )


def _tmle(dataset, nuisance, config, name):
    config = _config(config, name)
    nuisance = _as_nuisance(nuisance, config)
    h = resolve_bandwidth(dataset, nuisance, config)
    fit = target(
        dataset,
        nuisance,
        name,
        config.kernel,
        h,
        config.fluctuation,
        config.leave_one_out,
        config.tol,
        config.max_iter,
    )
    eif = eif_values(dataset, fit.q_star, fit.g, fit.psi)
    fixed = replace(config, bandwidth=h, variance=VarianceMode.INFLUENCE) if h is not None else replace(
        config, variance=VarianceMode.INFLUENCE
    )

    def rerun(ds):
        return _tmle(ds, nuisance, fixed, name).psi

    return _report(name, fit.psi, dataset, eif, config, rerun, fit.epsilon, fit.score_residuals, h, fit.flags)


def tmle1(dataset: Dataset, nuisance: NuisancePair, config: Optional[EstimatorConfig] = None):
    """First-order TMLE: one clever covariate ``1/g``."""
    return _tmle(dataset, nuisance, config, EstimatorName.TMLE1)


def tmle2(dataset: Dataset, nuisance: NuisancePair, config: Optional[EstimatorConfig] = None):
    """Second-order TMLE with the score smoothed over the covariate space."""
    return _tmle(dataset, nuisance, config, EstimatorName.TMLE2)


def tmle1star(dataset: Dataset, nuisance: NuisancePair, config: Optional[EstimatorConfig] = None):
    """TMLE whose second clever covariate smooths A on the fitted score values."""
    return _tmle(dataset, nuisance, config, EstimatorName.TMLE1STAR)


def robins_double_sum(dataset: Dataset, q, g, q_density, kernel, h):
    """Average of the kernel-smoothed second-order gradient over all ordered pairs.

    Returns ``(total, diagonal)`` where ``diagonal`` is the part coming from
    the ``i == j`` terms, both divided by ``n**2``.
    """
    n = dataset.n
    a = dataset.a.astype(float)
    resid = np.where(dataset.observed, dataset.y_filled() - q, 0.0)
    lead = 2.0 * a * resid / (g * q_density)
    mass, mass_observed = kernel_sums(dataset.w, dataset.w, np.vstack([np.ones(n), a]), kernel, h)
    total = np.sum(lead * (mass - mass_observed / g)) / n**2
    k0 = kernel_eval(np.zeros(dataset.d), kernel, 1.0 if h is None else h)
    diagonal = np.sum(lead * k0 * (1.0 - a / g)) / n**2
    return float(total), float(diagonal)


def robins_so(dataset: Dataset, nuisance: NuisancePair, config: Optional[EstimatorConfig] = None):
    """One-step second-order estimator.

    Plug-in mean, plus the empirical mean of the canonical gradient, plus
    half the double sum of the second-order gradient over all ordered pairs
    (diagonal included). The covariate density in that gradient is a kernel
    density estimate floored at ``config.trunc_q``.
    """
    config = _config(config, EstimatorName.ROBINS2)
    nuisance = _as_nuisance(nuisance, config)
    h = resolve_bandwidth(dataset, nuisance, config)
    kernel_h = 1.0 if h is None else h
    q = nuisance.qbar_values(dataset.w)
    g = nuisance.g_values(dataset.w)
    raw_density = kernel_sums(dataset.w, dataset.w, np.ones(dataset.n), config.kernel, kernel_h)[0] / dataset.n
    density = np.maximum(raw_density, config.trunc_q)
    plugin = stable_mean(q)
    first = stable_mean(np.where(dataset.observed, dataset.y_filled() - q, 0.0) / g)
    second, diagonal = robins_double_sum(dataset, q, g, density, config.kernel, kernel_h)
    psi = plugin + first + 0.5 * second

    floored = int(np.sum(raw_density < config.trunc_q))
    if floored > 0.05 * dataset.n:
        logger.warning("covariate density floored at %d of %d points", floored, dataset.n)
    flags = {
        "out_of_range": not (0.0 <= psi <= 1.0),
        "plugin": plugin,
        "first_order_correction": first,
        "second_order_correction": 0.5 * second,
        "diagonal_contribution": 0.5 * diagonal,
        "density_floored": floored,
        "positivity_truncated": int(np.sum(nuisance.raw_g_values(dataset.w) < config.trunc_g)),
    }
    eif = eif_values(dataset, q, g, psi)
    fixed = replace(config, bandwidth=h if h is not None else config.bandwidth, variance=VarianceMode.INFLUENCE)

    def rerun(ds):
        return robins_so(ds, nuisance, fixed).psi

    return _report(
        EstimatorName.ROBINS2, psi, dataset, eif, config, rerun, np.array([]), np.array([first, 0.5 * second]), h, flags
    )


ESTIMATORS = {
    EstimatorName.TMLE1: tmle1,
    EstimatorName.TMLE1STAR: tmle1star,
    EstimatorName.TMLE2: tmle2,
    EstimatorName.ROBINS2: robins_so,
}


def estimate(dataset: Dataset, nuisance: NuisancePair, config: Optional[EstimatorConfig] = None):
    """Dispatch on ``config.estimator``."""
    config = EstimatorConfig() if config is None else config
    return ESTIMATORS[config.estimator](dataset, nuisance, config)


@dataclass
class BootstrapResult:
    se: float
    ci_lower: float
    ci_upper: float
    estimates: np.ndarray
    failures: int

    def __iter__(self):
        return iter((self.se, (self.ci_lower, self.ci_upper)))


_REPLICATE_ERRORS = (ValueError, FluctuationError, RuntimeError, np.linalg.LinAlgError)


def bootstrap_se(data, pipeline: Callable, B, seed=0, ci_level=0.95, max_failure_rate=0.1):
    """Nonparametric bootstrap of ``pipeline(resampled_data)``.

    ``data`` is anything with ``n`` and ``take(index)``. Replicate ``b``
    draws its indices from its own child seed, so results do not depend on
    evaluation order. Replicates that raise are dropped and counted.
    """
    B = check_positive_int(B, "B", minimum=2)
    children = np.random.SeedSequence(seed).spawn(B)
    estimates = np.full(B, np.nan)
    for b, child in enumerate(children):
        idx = np.random.default_rng(child).integers(0, data.n, data.n)
        try:
            estimates[b] = float(pipeline(data.take(idx)))
        except _REPLICATE_ERRORS as exc:
            logger.debug("bootstrap replicate %d failed: %s", b, exc)
    ok = estimates[np.isfinite(estimates)]
    failures = B - ok.size
    if failures > max_failure_rate * B:
        raise RuntimeError(f"{failures} of {B} bootstrap replicates failed")
    alpha = 1.0 - ci_level
    lo, hi = np.quantile(ok, [alpha / 2.0, 1.0 - alpha / 2.0])
    return BootstrapResult(float(np.std(ok, ddof=1)), float(lo), float(hi), estimates, failures)


def scale_outcome(y):
    """Map outcomes affinely onto [0, 1]; returns ``(scaled, min, max)``.

    Missing entries (NaN) are ignored when computing the range and stay NaN.
    """
    y = np.asarray(y, dtype=float)
    lo, hi = float(np.nanmin(y)), float(np.nanmax(y))
    if not hi > lo:
        raise ValueError("degenerate outcome range")
    return (y - lo) / (hi - lo), lo, hi


def nudge_unit(values, margin=1e-4):
    """Pull values at the ends of [0, 1] inside by ``margin``."""
    return np.clip(values, margin, 1.0 - margin)


def unscale(psi_scaled, y_min, y_max):
    return psi_scaled * (y_max - y_min) + y_min
