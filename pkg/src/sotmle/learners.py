"""Initial nuisance estimators.

The built-in learner is a logistic GLM fitted by iteratively reweighted
least squares on a user-chosen design. Any sklearn-style classifier with
``fit`` and ``predict_proba`` can replace it. ``perturb`` degrades a fitted
GLM so that it converges at a chosen rate, which is how the simulation
harness controls nuisance accuracy.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_is_fitted

from ._validation import check_covariates, check_probability_open
from .core import Dataset

DesignTerm = Union[str, Callable[[np.ndarray], np.ndarray]]

SEPARATION_NORM = 50.0
_TERM = re.compile(r"^(?:(exp|log|sq)\()?w(\d*)\)?$")


class LearnerTarget(str, enum.Enum):
    OUTCOME_GIVEN_OBSERVED = "outcome"
    MISSINGNESS = "missingness"


class SeparationError(RuntimeError):
    pass


class RankDeficiencyError(ValueError):
    pass


def _term_columns(term, w):
    if callable(term):
        cols = np.asarray(term(w), dtype=float)
        return cols.reshape(-1, 1) if cols.ndim == 1 else cols, [getattr(term, "__name__", "custom")]
    if term in ("1", "intercept"):
        return np.ones((w.shape[0], 1)), ["1"]
    match = _TERM.match(term.replace(" ", ""))
    if match is None:
        raise ValueError(f"unknown design term {term!r}")
    func, index = match.groups()
    idx = range(w.shape[1]) if index == "" else [int(index) - 1]
    if any(j < 0 or j >= w.shape[1] for j in idx):
        raise ValueError(f"design term {term!r} refers to a missing column")
    base = w[:, list(idx)]
    transform = {None: lambda x: x, "exp": np.exp, "log": np.log, "sq": np.square}[func]
    names = [f"{func}(w{j + 1})" if func else f"w{j + 1}" for j in idx]
    return transform(base), names


def design_matrix(w, design: Sequence[DesignTerm]):
    """Stack design terms evaluated on ``w``.

    Terms are ``"1"``, ``"w"`` (all columns), ``"w2"``, ``"exp(w3)"``,
    ``"exp(w)"``, ``"sq(w1)"``, ``"log(w1)"`` or a callable of ``w``.
    Returns the matrix and its column names.
    """
    w = check_covariates(w)
    blocks, names = [], []
    for term in design:
        cols, nm = _term_columns(term, w)
        if cols.shape[1] != len(nm):
            nm = [f"{nm[0]}[{k}]" for k in range(cols.shape[1])]
        blocks.append(cols)
        names.extend(nm)
    x = np.hstack(blocks)
    if not np.all(np.isfinite(x)):
        raise ValueError("design produced non-finite values")
    return x, names


@dataclass(frozen=True)
class LearnerSpec:
    design: tuple = ("1", "w")
    target: LearnerTarget = LearnerTarget.MISSINGNESS

    def __post_init__(self):
        object.__setattr__(self, "design", tuple(self.design))
        object.__setattr__(self, "target", LearnerTarget(self.target))


class LogisticGLM(ClassifierMixin, BaseEstimator):
    """Logistic regression by Newton-Raphson (IRLS), no penalty.

    Accepts fractional responses in [0, 1] (quasi-binomial fit).

    Parameters
    ----------
    design : sequence of design terms
        See :func:`design_matrix`. The default fits an intercept plus all
        covariates linearly.
    tol : float
        Convergence threshold on the largest absolute score.
    max_iter : int
    """

    def __init__(self, design=("1", "w"), tol=1e-10, max_iter=100):
        self.design = design
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, sample_weight=None):
        x, names = design_matrix(X, self.design)
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise ValueError("X and y differ in length")
        if np.any((y < 0) | (y > 1)):
            raise ValueError("responses must lie in [0, 1]")
        sw = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        _check_rank(x, names)

        beta = np.zeros(x.shape[1])
        for it in range(1, self.max_iter + 1):
            p = expit(x @ beta)
            score = x.T @ (sw * (y - p))
            info = (x * (sw * p * (1.0 - p))[:, None]).T @ x
            step = np.linalg.solve(info, score)
            beta = beta + step
            if np.linalg.norm(beta) > SEPARATION_NORM:
                raise SeparationError(f"separation: coefficient norm exceeded {SEPARATION_NORM}")
            score = x.T @ (sw * (y - expit(x @ beta)))
            # Second clause: step already at round-off scale for large n.
            if np.max(np.abs(score)) < self.tol or np.max(np.abs(step)) < 1e-13 * (1.0 + np.max(np.abs(beta))):
                break
        else:
            raise RuntimeError(f"IRLS did not converge in {self.max_iter} iterations")

        p = expit(x @ beta)
        info = (x * (sw * p * (1.0 - p))[:, None]).T @ x
        self.coef_ = beta
        self.covariance_ = np.linalg.inv(info)
        self.feature_names_ = names
        self.n_iter_ = it
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = check_covariates(X).shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        x, _ = design_matrix(X, self.design)
        return x @ self.coef_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


def _check_rank(x, names):
    if np.linalg.matrix_rank(x, tol=1e-10 * max(1.0, np.abs(x).max())) == x.shape[1]:
        return
    for k in range(1, x.shape[1] + 1):
        sub = x[:, :k]
        if np.linalg.matrix_rank(sub, tol=1e-10 * max(1.0, np.abs(sub).max())) < k:
            raise RankDeficiencyError(f"design is rank deficient at column {names[k - 1]!r}")


class ConstantLearner(ClassifierMixin, BaseEstimator):
    """Predicts ``level`` everywhere; fitting is a no-op."""

    def __init__(self, level=0.5):
        self.level = level

    def fit(self, X=None, y=None, sample_weight=None):
        check_probability_open(self.level, "level")
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        n = check_covariates(X).shape[0]
        return np.full(n, np.log(self.level / (1.0 - self.level)))

    def predict_proba(self, X):
        p = np.full(check_covariates(X).shape[0], float(self.level))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)


def constant_learner(level):
    """A fitted predictor that returns ``level`` everywhere."""
    return ConstantLearner(level).fit()


def as_predictor(model):
    """Wrap a fitted classifier (or a plain callable) as ``w -> P(1 | w)``."""
    if callable(model) and not hasattr(model, "predict_proba"):
        return model
    return lambda w: model.predict_proba(check_covariates(w))[:, 1]


def fit_learner(learner, dataset: Dataset, target=LearnerTarget.MISSINGNESS):
    """Clone and fit any sklearn-style classifier for one nuisance target."""
    target = LearnerTarget(target)
    model = clone(learner)
    if target is LearnerTarget.MISSINGNESS:
        return model.fit(dataset.w, dataset.a)
    obs = dataset.observed
    return model.fit(dataset.w[obs], dataset.y[obs])


def fit_logistic(dataset: Dataset, spec: LearnerSpec):
    """Fit the logistic GLM of ``spec`` to the outcome or missingness target."""
    return fit_learner(LogisticGLM(design=spec.design), dataset, spec.target)


@dataclass(frozen=True)
class PerturbedPredictor:
    """``w -> expit(LP(w) * u - v)`` for one fixed draw ``(u, v)``."""

    base: object
    rate: float
    n: int
    u: float
    v: float

    def linear_predictor(self, w):
        return self.base.decision_function(w) * self.u - self.v

    def __call__(self, w):
        return expit(self.linear_predictor(w))


def _row_keys(w):
    w = np.ascontiguousarray(check_covariates(w))
    return w.view(np.dtype((np.void, w.dtype.itemsize * w.shape[1]))).reshape(-1)


class UnitPerturbedPredictor:
    """``w_i -> expit(LP(w_i) * u_i - v_i)`` with one draw per support point.

    Only points of the support (the sample the draws were made for) can be
    evaluated; any row subset or resample of the sample qualifies.
    """

    def __init__(self, base, rate, n, support, u, v):
        self.base = base
        self.rate = float(rate)
        self.n = int(n)
        self.support = check_covariates(support)
        self.u = np.asarray(u, dtype=float)
        self.v = np.asarray(v, dtype=float)
        keys = _row_keys(self.support)
        self._order = np.argsort(keys, kind="stable")
        self._sorted = keys[self._order]

    def _index(self, w):
        keys = _row_keys(w)
        pos = np.searchsorted(self._sorted, keys)
        pos = np.minimum(pos, self._sorted.size - 1)
        if not np.all(self._sorted[pos] == keys):
            raise ValueError("unit-level perturbation evaluated outside its sample")
        return self._order[pos]

    def linear_predictor(self, w):
        idx = self._index(w)
        return self.base.decision_function(w) * self.u[idx] - self.v[idx]

    def __call__(self, w):
        return expit(self.linear_predictor(w))


def perturb(base, rate, n, rng, support=None):
    """Degrade a fitted GLM so that its error shrinks like ``n**-rate``.

    Draws ``u ~ Uniform(1 - n**-rate, 1)`` and then
    ``v ~ Normal(3 n**-rate, n**-rate)``. Without ``support`` there is one
    draw that every evaluation shares. With ``support`` (the sample) each
    unit gets its own draw, all ``u`` first and then all ``v``.
    """
    if rate < 0:
        raise ValueError("rate must be nonnegative")
    scale = float(n) ** (-float(rate))
    if support is not None:
        m = check_covariates(support).shape[0]
        u = rng.uniform(1.0 - scale, 1.0, m)
        v = rng.normal(3.0 * scale, scale, m)
        return UnitPerturbedPredictor(base, rate, n, support, u, v)
    u = rng.uniform(1.0 - scale, 1.0)
    v = rng.normal(3.0 * scale, scale)
    return PerturbedPredictor(base=base, rate=float(rate), n=int(n), u=float(u), v=float(v))
