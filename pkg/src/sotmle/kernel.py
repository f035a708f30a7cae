"""Product kernels, Nadaraya-Watson smoothing, kernel density estimation and
the default bandwidth rule."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_covariates
from .core import Dataset

DENSITY_FLOOR = 1e-4
# Upper bound on the number of kernel weights held in memory at once.
_BLOCK_ELEMENTS = 2_000_000
_SQRT_2PI = np.sqrt(2.0 * np.pi)


class KernelFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN_ORDER4 = "gaussian4"
    DISCRETE = "discrete"


_ORDERS = {
    KernelFamily.GAUSSIAN: 1,
    KernelFamily.EPANECHNIKOV: 1,
    KernelFamily.GAUSSIAN_ORDER4: 3,
    KernelFamily.DISCRETE: 1,
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family; ``order`` is the highest polynomial degree it annihilates."""

    family: KernelFamily = KernelFamily.GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))

    @property
    def order(self):
        return _ORDERS[self.family]

    @property
    def nonnegative(self):
        return self.family is not KernelFamily.GAUSSIAN_ORDER4

    def __str__(self):
        return self.family.value


GAUSSIAN = KernelSpec(KernelFamily.GAUSSIAN)


def as_kernel(spec):
    if spec is None:
        return GAUSSIAN
    if isinstance(spec, KernelSpec):
        return spec
    return KernelSpec(KernelFamily(spec))


@dataclass(frozen=True)
class Bandwidth:
    """Positive smoothing scale, either one value or one per dimension."""

    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float)).reshape(-1)
        if values.size == 0 or not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValueError(f"bandwidth must be positive, got {values}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def broadcast(self, d):
        if self.values.size == 1:
            return np.full(d, self.values[0])
        if self.values.size != d:
            raise ValueError(f"bandwidth has {self.values.size} entries for {d} dimensions")
        return self.values

    def scaled(self, factor):
        return Bandwidth(self.values * factor)

    def __len__(self):
        return self.values.size


def as_bandwidth(h):
    return h if isinstance(h, Bandwidth) else Bandwidth(h)


def _univariate(u, family):
    if family is KernelFamily.GAUSSIAN:
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    if family is KernelFamily.EPANECHNIKOV:
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    if family is KernelFamily.GAUSSIAN_ORDER4:
        return 0.5 * (3.0 - u * u) * np.exp(-0.5 * u * u) / _SQRT_2PI
    raise ValueError(f"no univariate form for {family}")


def kernel_eval(u, spec=GAUSSIAN, h=1.0):
    """Evaluate ``K_h(u)``; ``u`` is one vector or an ``(m, d)`` array of them."""
    spec = as_kernel(spec)
    u = np.asarray(u, dtype=float)
    single = u.ndim <= 1
    u = u.reshape(1, -1) if single else u
    h = as_bandwidth(h).broadcast(u.shape[1])
    if spec.family is KernelFamily.DISCRETE:
        out = np.all(u == 0.0, axis=1).astype(float)
    else:
        out = np.prod(_univariate(u / h, spec.family) / h, axis=1)
    return float(out[0]) if single else out


def kernel_block(query, data, spec, h):
    """Matrix of ``K_h(query_i - data_j)`` for two covariate arrays."""
    spec = as_kernel(spec)
    if spec.family is KernelFamily.DISCRETE:
        return np.all(query[:, None, :] == data[None, :, :], axis=2).astype(float)
    h = as_bandwidth(h).broadcast(query.shape[1])
    if spec.family is KernelFamily.GAUSSIAN:
        zq = query / h
        zd = data / h
        sq = np.einsum("ij,ij->i", zq, zq)[:, None] + np.einsum("ij,ij->i", zd, zd)[None, :]
        sq -= 2.0 * (zq @ zd.T)
        np.maximum(sq, 0.0, out=sq)
        sq *= -0.5
        np.exp(sq, out=sq)
        sq *= 1.0 / np.prod(h * _SQRT_2PI)
        return sq
    out = np.ones((query.shape[0], data.shape[0]))
    for j in range(query.shape[1]):
        out *= _univariate((query[:, j, None] - data[None, :, j]) / h[j], spec.family) / h[j]
    return out


def kernel_sums(query, data, weights, spec, h, exclude_self=False):
    """Row sums ``sum_j K_h(query_i - data_j) * weights[k, j]`` for each weight row.

    Computed in blocks so that memory stays bounded. Returns an array of
    shape ``(len(weights), m)``. With ``exclude_self`` the query points must
    be the data points themselves and the ``i == j`` terms are dropped.
    """
    query = check_covariates(query, "query")
    data = check_covariates(data, "data")
    if query.shape[1] != data.shape[1]:
        raise ValueError(f"query has {query.shape[1]} columns, data has {data.shape[1]}")
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    m, n = query.shape[0], data.shape[0]
    out = np.empty((weights.shape[0], m))
    rows = max(1, _BLOCK_ELEMENTS // max(n, 1))
    for start in range(0, m, rows):
        stop = min(m, start + rows)
        block = kernel_block(query[start:stop], data, spec, h)
        if exclude_self:
            idx = np.arange(start, stop)
            block[idx - start, idx] = 0.0
        out[:, start:stop] = weights @ block.T
    return out


class NadarayaWatson(RegressorMixin, BaseEstimator):
    """Kernel regression of a response on covariates.

    Queries with no kernel mass fall back to the mean response; the count
    of such queries from the last ``predict`` call is kept in
    ``n_fallback_``. Predictions are clipped to the response range, which
    only matters for higher-order kernels with negative lobes.

    Parameters
    ----------
    kernel : str or KernelSpec
    bandwidth : float, array or Bandwidth, optional
        Defaults to :func:`scott_bandwidth` on the training covariates.
    """

    def __init__(self, kernel="gaussian", bandwidth=None):
        self.kernel = kernel
        self.bandwidth = bandwidth

    def fit(self, X, y):
        X = check_covariates(X, "X")
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y differ in length")
        self.kernel_ = as_kernel(self.kernel)
        if self.kernel_.family is KernelFamily.DISCRETE:
            self.bandwidth_ = None
        elif self.bandwidth is None:
            self.bandwidth_ = scott_bandwidth(X)
        else:
            self.bandwidth_ = as_bandwidth(self.bandwidth)
            self.bandwidth_.broadcast(X.shape[1])
        self.X_ = X
        self.y_ = y
        self.mean_ = float(y.mean())
        self.range_ = (float(y.min()), float(y.max()))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, leave_one_out=False):
        check_is_fitted(self, "X_")
        X = check_covariates(X, "X")
        if leave_one_out and X.shape != self.X_.shape:
            raise ValueError("leave_one_out requires predicting at the training points")
        h = 1.0 if self.bandwidth_ is None else self.bandwidth_
        den, num = kernel_sums(
            X, self.X_, np.vstack([np.ones_like(self.y_), self.y_]), self.kernel_, h, exclude_self=leave_one_out
        )
        empty = den <= 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(empty, self.mean_, num / np.where(empty, 1.0, den))
        self.n_fallback_ = int(empty.sum())
        return np.clip(out, *self.range_)


def _query(w, d):
    # A 1-d input of length d is one point; for d == 1 a longer 1-d input is a batch.
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        w = w.reshape(1)
    if w.ndim == 1:
        if w.size == d:
            return w.reshape(1, d), True
        if d == 1:
            return w.reshape(-1, 1), False
        raise ValueError(f"query of length {w.size} does not match dimension {d}")
    return w, False


def nw_regress_covariates(w, dataset: Dataset, spec=GAUSSIAN, h=None, return_fallback=False):
    """Kernel regression of the missingness indicator on covariates at ``w``."""
    w, single = _query(w, dataset.d)
    model = NadarayaWatson(spec, h).fit(dataset.w, dataset.a)
    out = model.predict(w)
    out = float(out[0]) if single else out
    return (out, model.n_fallback_) if return_fallback else out


def nw_regress_score(w, ghat, dataset: Dataset, spec=GAUSSIAN, h=None, return_fallback=False):
    """Kernel regression of the missingness indicator on fitted score values.

    Smoothing is univariate: the distance between two units is
    ``ghat(w1) - ghat(w2)`` whatever the covariate dimension.
    """
    w, single = _query(w, dataset.d)
    train = np.asarray(ghat(dataset.w), dtype=float).reshape(-1, 1)
    query = np.asarray(ghat(w), dtype=float).reshape(-1, 1)
    model = NadarayaWatson(spec, h).fit(train, dataset.a)
    out = model.predict(query)
    out = float(out[0]) if single else out
    return (out, model.n_fallback_) if return_fallback else out


def kde_density(w, dataset: Dataset, spec=GAUSSIAN, h=None, floor=DENSITY_FLOOR):
    """Kernel density estimate of the covariates at ``w``, floored at ``floor``."""
    w, single = _query(w, dataset.d)
    if h is None:
        h = scott_bandwidth(dataset.w)
    dens = kernel_sums(w, dataset.w, np.ones(dataset.n), spec, h)[0] / dataset.n
    dens = np.maximum(dens, floor)
    return float(dens[0]) if single else dens


def scott_bandwidth(x):
    """Per-dimension rule ``sd_j * c * n**(-1/(d+4))`` with ``c = (4/(d+2))**(1/(d+4))``."""
    x = check_covariates(x, "x")
    n, d = x.shape
    if n < 2:
        raise ValueError("bandwidth rule needs at least two points")
    sd = x.std(axis=0, ddof=1)
    if np.any(sd <= 0):
        j = int(np.flatnonzero(sd <= 0)[0])
        raise ValueError(f"degenerate covariate (dimension {j} has zero variance)")
    c = (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0))
    return Bandwidth(sd * c * n ** (-1.0 / (d + 4.0)))


class SmoothingTarget(str, enum.Enum):
    COVARIATES = "covariates"
    SCORE_VALUES = "score_values"


def default_bandwidth(dataset: Dataset, target=SmoothingTarget.COVARIATES, scores=None):
    """Default bandwidth for smoothing on covariates or on fitted score values.

    ``scores`` holds the fitted missingness scores at the sample points and
    is required when ``target`` is ``SCORE_VALUES``.
    """
    target = SmoothingTarget(target)
    if target is SmoothingTarget.COVARIATES:
        return scott_bandwidth(dataset.w)
    if scores is None:
        raise ValueError("score values required for SCORE_VALUES smoothing")
    return scott_bandwidth(np.asarray(scores, dtype=float).reshape(-1, 1))


def default_grid(base: Bandwidth, num=10, low=0.25, high=4.0):
    """Log-spaced multiples of ``base`` from ``low`` to ``high`` times."""
    return [base.scaled(f) for f in np.geomspace(low, high, num)]
