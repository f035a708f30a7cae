"""Second-order targeted estimators of a mean outcome missing at random."""

__version__ = "0.1.0"

from .api import TargetedMean, TreatmentEffect
from .ate import AteResult, TreatmentData, ate
from .core import (
    Dataset,
    EstimateReport,
    NuisancePair,
    Observation,
    eif_d1,
    eif_values,
    plugin_mean,
    remainder_r2,
    remainder_r3,
)
from .estimators import (
    EstimatorConfig,
    VarianceMode,
    bootstrap_se,
    estimate,
    robins_so,
    tmle1,
    tmle1star,
    tmle2,
)
from .fluctuation import FluctuationMode, FluctuationProblem, fit_fluctuation
from .kernel import Bandwidth, KernelFamily, KernelSpec, NadarayaWatson, default_bandwidth
from .learners import LogisticGLM, perturb
from .selection import cv_bandwidth
from .simulation import SimGridConfig, efficiency_bound, generate, oracle_psi0, run_grid
from .targeting import EstimatorName

__all__ = [
    "AteResult",
    "Bandwidth",
    "Dataset",
    "EstimateReport",
    "EstimatorConfig",
    "EstimatorName",
    "FluctuationMode",
    "FluctuationProblem",
    "KernelFamily",
    "KernelSpec",
    "LogisticGLM",
    "NadarayaWatson",
    "NuisancePair",
    "Observation",
    "SimGridConfig",
    "TargetedMean",
    "TreatmentData",
    "TreatmentEffect",
    "VarianceMode",
    "ate",
    "bootstrap_se",
    "cv_bandwidth",
    "default_bandwidth",
    "efficiency_bound",
    "eif_d1",
    "eif_values",
    "estimate",
    "fit_fluctuation",
    "generate",
    "oracle_psi0",
    "perturb",
    "plugin_mean",
    "remainder_r2",
    "remainder_r3",
    "robins_so",
    "run_grid",
    "tmle1",
    "tmle1star",
    "tmle2",
]
