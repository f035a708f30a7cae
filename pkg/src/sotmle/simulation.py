"""Data-generating processes, oracle quantities and the Monte Carlo grid runner.

Two designs are built in. ``d1`` has a single U-shaped covariate on
[-3, 3]; ``d3`` has three dependent covariates in (0, 1). For each design
the true parameter and the efficiency bound are frozen in
``data/oracle_constants.json`` together with the seed and draw count that
produced them, and ``run_grid`` scores the estimators on a (n, p, q) grid in
which the correctly specified nuisance fits are degraded at rates ``p``
(outcome regression) and ``q`` (missingness score).
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .core import Dataset, NuisancePair
from .estimators import EstimatorConfig, estimate
from .fluctuation import FluctuationError
from .learners import LearnerTarget, LogisticGLM, fit_learner, perturb
from .targeting import EstimatorName

logger = logging.getLogger(__name__)

MIN_ORACLE_DRAWS = 100_000
ORACLE_CHUNK = 1_000_000
ORACLE_FILE = "oracle_constants.json"
RATE_GRID = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
FAILURE_FLAG_RATE = 0.02
Z95 = 1.96

_REPLICATE_ERRORS = (ValueError, RuntimeError, FluctuationError, np.linalg.LinAlgError)


class DgpName(str, enum.Enum):
    D1 = "d1"
    D3 = "d3"


@dataclass(frozen=True)
class Dgp:
    """Full-data law: covariate sampler, missingness score and outcome regression.

    ``qbar_design`` and ``g_design`` are the logistic designs that contain
    the truth; the simulation fits those and then perturbs them.
    """

    name: str
    d: int
    sample_w: Callable[[int, np.random.Generator], np.ndarray]
    g0: Callable[[np.ndarray], np.ndarray]
    qbar0: Callable[[np.ndarray], np.ndarray]
    qbar_design: tuple = ("1", "w")
    g_design: tuple = ("1", "w")

    def truth(self, trunc_g=1e-12):
        return NuisancePair(self.qbar0, self.g0, trunc_g)


def _d1_w(n, rng):
    return (6.0 * rng.beta(0.5, 0.5, n) - 3.0).reshape(-1, 1)


def _d1_g(w):
    return expit(1.0 + 0.7 * w[:, 0])


def _d1_q(w):
    x = w[:, 0]
    return expit(-3.0 + 0.5 * np.exp(x) + 0.5 * x)


def _d3_w(n, rng):
    # Small shape parameters can round a draw to exactly 0 or 1; keep it inside (0, 1).
    lo, hi = np.finfo(float).tiny, np.nextafter(1.0, 0.0)
    w1 = np.clip(rng.beta(2.0, 2.0, n), lo, hi)
    w2 = np.clip(rng.beta(2.0 * w1, 2.0), lo, hi)
    w3 = np.clip(rng.beta(2.0 * w1, 2.0 * w2), lo, hi)
    return np.column_stack([w1, w2, w3])


def _d3_g(w):
    return expit(1.0 + 0.12 * w[:, 0] + 0.1 * w[:, 1] + 0.5 * w[:, 2])


def _d3_q(w):
    return expit(-4.0 + 0.2 * w[:, 0] + 0.3 * w[:, 1] + 0.5 * np.exp(w[:, 2]))


DGPS = {
    DgpName.D1: Dgp("d1", 1, _d1_w, _d1_g, _d1_q, qbar_design=("1", "exp(w1)", "w1"), g_design=("1", "w")),
    DgpName.D3: Dgp("d3", 3, _d3_w, _d3_g, _d3_q, qbar_design=("1", "w1", "w2", "exp(w3)"), g_design=("1", "w")),
}


def get_dgp(dgp):
    if isinstance(dgp, Dgp):
        return dgp
    if isinstance(dgp, DgpName):
        return DGPS[dgp]
    return DGPS[DgpName(str(dgp).lower())]


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def generate(dgp, n, rng):
    """Draw ``n`` i.i.d. units; the outcome is kept only where ``A == 1``.

    Draw order is fixed (covariates, then A, then Y for every unit) so a
    seed determines the sample regardless of the observed pattern.
    """
    dgp = get_dgp(dgp)
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(rng)
    w = dgp.sample_w(n, rng)
    a = (rng.random(n) < dgp.g0(w)).astype(np.int8)
    y = (rng.random(n) < dgp.qbar0(w)).astype(float)
    if not np.any(a == 1):
        raise ValueError("generated sample has no observed outcomes")
    return Dataset(w, a, np.where(a == 1, y, np.nan))


def _chunks(total):
    done = 0
    while done < total:
        step = min(ORACLE_CHUNK, total - done)
        yield step
        done += step


def _check_draws(M):
    M = int(M)
    if M < MIN_ORACLE_DRAWS:
        raise ValueError(f"oracle draws must be at least {MIN_ORACLE_DRAWS}")
    return M


def _psi0_draws(dgp, M, rng):
    total = total_sq = 0.0
    for m in _chunks(M):
        q = dgp.qbar0(dgp.sample_w(m, rng))
        total += math.fsum(q)
        total_sq += math.fsum(q * q)
    mean = total / M
    var = max(total_sq / M - mean * mean, 0.0) * M / (M - 1)
    return mean, math.sqrt(var / M)


@lru_cache(maxsize=32)
def _psi0_cached(name, M, seed):
    return _psi0_draws(get_dgp(name), M, np.random.default_rng(seed))


def oracle_psi0(dgp, M, rng):
    """Monte Carlo mean of the true outcome regression over ``M`` covariate draws.

    Returns ``(psi0, mc_se)``. Calls with a built-in design and an integer
    seed are memoized.
    """
    M = _check_draws(M)
    dgp = get_dgp(dgp)
    if isinstance(rng, (int, np.integer)) and any(dgp is builtin for builtin in DGPS.values()):
        return _psi0_cached(dgp.name, M, int(rng))
    return _psi0_draws(dgp, M, _rng(rng))


def efficiency_bound(dgp, M, rng, return_se=False):
    """Variance of the canonical gradient at the truth, over ``M`` full draws.

    With ``return_se`` the Monte Carlo standard error is returned as well.
    """
    M = _check_draws(M)
    dgp = get_dgp(dgp)
    rng = _rng(rng)
    parts = []
    for m in _chunks(M):
        w = dgp.sample_w(m, rng)
        g = dgp.g0(w)
        q = dgp.qbar0(w)
        a = (rng.random(m) < g).astype(float)
        y = (rng.random(m) < q).astype(float)
        parts.append(a / g * (y - q) + q)
    eif = np.concatenate(parts)
    centred = eif - math.fsum(eif) / M
    sq = centred * centred
    bound = math.fsum(sq) / (M - 1)
    if return_se:
        return bound, float(np.std(sq, ddof=1) / math.sqrt(M))
    return bound


def compute_oracle_constants(dgp, M, seed):
    """Fresh ``psi0`` and bound with their Monte Carlo errors, from one seed.

    The two quantities use independent child streams of ``seed``.
    """
    dgp = get_dgp(dgp)
    psi_seq, bound_seq = np.random.SeedSequence(seed).spawn(2)
    psi0, psi0_se = _psi0_draws(dgp, _check_draws(M), np.random.default_rng(psi_seq))
    bound, bound_se = efficiency_bound(dgp, M, np.random.default_rng(bound_seq), return_se=True)
    return {"psi0": psi0, "psi0_mc_se": psi0_se, "bound": bound, "bound_mc_se": bound_se, "M": int(M), "seed": int(seed)}


def load_oracle_constants(path=None):
    """Frozen constants keyed by design name."""
    if path is None:
        text = resources.files("sotmle").joinpath("data", ORACLE_FILE).read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


def oracle_constants(dgp, path=None):
    name = get_dgp(dgp).name
    table = load_oracle_constants(path)
    if name not in table:
        raise KeyError(f"no frozen oracle constants for design {name!r}")
    return table[name]


@dataclass(frozen=True)
class SimGridConfig:
    """One Monte Carlo study.

    ``coverage_mode="mc"`` scores intervals of half-width 1.96 times the
    across-replicate standard deviation of each estimator in the cell;
    ``"bound"`` uses ``sqrt(bound / n)`` instead. ``draws`` selects unit-level
    or shared perturbation draws (see :func:`fit_perturbed_nuisance`).
    ``psi0`` and ``bound`` default to the frozen constants of the design.
    """

    dgp: object = DgpName.D1
    n_list: tuple = (1000,)
    p_grid: tuple = (0.5,)
    q_grid: tuple = (0.5,)
    replicates: int = 1000
    estimators: tuple = (EstimatorName.TMLE1, EstimatorName.TMLE1STAR, EstimatorName.TMLE2)
    master_seed: int = 0
    kernel: str = "gaussian"
    bandwidth: object = "default"
    fluctuation: str = "covariate"
    trunc_g: float = 0.01
    coverage_mode: str = "mc"
    draws: str = "unit"
    trim: float = 0.01
    psi0: Optional[float] = None
    bound: Optional[float] = None

    def __post_init__(self):
        for name in ("n_list", "p_grid", "q_grid", "estimators"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "estimators", tuple(EstimatorName(e) for e in self.estimators))
        if self.replicates < 2:
            raise ValueError("need at least two replicates")
        if any(int(n) < 2 for n in self.n_list):
            raise ValueError("sample sizes must be at least 2")
        if any(r < 0 for r in self.p_grid + self.q_grid):
            raise ValueError("rates must be nonnegative")
        if self.draws not in ("unit", "single"):
            raise ValueError("draws must be 'unit' or 'single'")
        if self.coverage_mode not in ("mc", "bound"):
            raise ValueError("coverage_mode must be 'mc' or 'bound'")
        if not 0.0 <= self.trim < 0.5:
            raise ValueError("trim must lie in [0, 0.5)")

    def cells(self):
        return list(itertools.product(self.n_list, self.p_grid, self.q_grid))

    def truth(self):
        """``(psi0, bound)``, frozen unless given explicitly."""
        if self.psi0 is not None and self.bound is not None:
            return float(self.psi0), float(self.bound)
        frozen = oracle_constants(self.dgp)
        psi0 = frozen["psi0"] if self.psi0 is None else self.psi0
        bound = frozen["bound"] if self.bound is None else self.bound
        return float(psi0), float(bound)


@dataclass
class MetricsRow:
    estimator: str
    n: int
    p: float
    q: float
    sqrt_n_abs_bias: float
    rvar: float
    coverage: float
    coverage_mc_se: float
    failures: int
    rvar_trimmed: float = np.nan
    mean_psi: float = np.nan
    flagged: bool = False


CSV_COLUMNS = tuple(f.name for f in MetricsRow.__dataclass_fields__.values())


def replicate_seed(master_seed, cell_index, replicate):
    return np.random.SeedSequence([int(master_seed), int(cell_index), int(replicate)])


def fit_perturbed_nuisance(dataset, dgp, p, q, rng, trunc_g=0.01, draws="unit"):
    """Correctly specified logistic fits, degraded at rates ``p`` and ``q``.

    ``draws="unit"`` gives every sample unit its own perturbation draw;
    ``"single"`` shares one draw across units. The outcome fit is perturbed
    first, then the score fit, from the same stream.
    """
    dgp = get_dgp(dgp)
    if draws not in ("unit", "single"):
        raise ValueError("draws must be 'unit' or 'single'")
    support = dataset.w if draws == "unit" else None
    q_fit = fit_learner(LogisticGLM(design=dgp.qbar_design), dataset, LearnerTarget.OUTCOME_GIVEN_OBSERVED)
    g_fit = fit_learner(LogisticGLM(design=dgp.g_design), dataset, LearnerTarget.MISSINGNESS)
    q_pert = perturb(q_fit, p, dataset.n, rng, support)
    g_pert = perturb(g_fit, q, dataset.n, rng, support)
    return NuisancePair(q_pert, g_pert, trunc_g)


def run_replicate(config: SimGridConfig, cell_index, replicate):
    """Estimates of every configured estimator on one simulated sample (NaN on failure)."""
    n, p, q = config.cells()[cell_index]
    rng = np.random.default_rng(replicate_seed(config.master_seed, cell_index, replicate))
    out = np.full(len(config.estimators), np.nan)
    try:
        data = generate(config.dgp, int(n), rng)
        nuisance = fit_perturbed_nuisance(data, config.dgp, p, q, rng, config.trunc_g, config.draws)
    except _REPLICATE_ERRORS as exc:
        logger.info("cell %d replicate %d: nuisance fit failed: %s", cell_index, replicate, exc)
        return out
    for k, name in enumerate(config.estimators):
        est_config = EstimatorConfig(
            estimator=name,
            kernel=config.kernel,
            bandwidth=config.bandwidth,
            fluctuation=config.fluctuation,
            trunc_g=config.trunc_g,
            seed=replicate,
        )
        try:
            out[k] = estimate(data, nuisance, est_config).psi
        except _REPLICATE_ERRORS as exc:
            logger.info("cell %d replicate %d: %s failed: %s", cell_index, replicate, name.value, exc)
    return out


def _run_block(config, cell_index, start, stop):
    return cell_index, start, np.vstack([run_replicate(config, cell_index, r) for r in range(start, stop)])


def replicate_estimates(config: SimGridConfig, workers=1, block=25):
    """Array of shape ``(cells, replicates, estimators)``.

    Replicates are independent streams keyed by (seed, cell, replicate), so
    the result is identical for any worker count.
    """
    cells = config.cells()
    out = np.full((len(cells), config.replicates, len(config.estimators)), np.nan)
    jobs = [
        (c, s, min(s + block, config.replicates)) for c in range(len(cells)) for s in range(0, config.replicates, block)
    ]
    if workers <= 1:
        for job in jobs:
            c, s, values = _run_block(config, *job)
            out[c, s : s + values.shape[0]] = values
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_block, config, *job) for job in jobs]
        for fut in futures:
            c, s, values = fut.result()
            out[c, s : s + values.shape[0]] = values
    return out


def cell_metrics(estimates, n, psi0, bound, coverage_mode="mc", trim=0.01):
    """Summary statistics for one estimator in one cell; failures are NaN entries.

    Returns a dict with the metric fields of :class:`MetricsRow`.
    """
    estimates = np.asarray(estimates, dtype=float)
    ok = estimates[np.isfinite(estimates)]
    failures = int(estimates.size - ok.size)
    if ok.size < 2:
        nan = float("nan")
        return dict(
            sqrt_n_abs_bias=nan, rvar=nan, coverage=nan, coverage_mc_se=nan, failures=failures,
            rvar_trimmed=nan, mean_psi=nan,
        )
    mean = float(np.mean(ok))
    var = float(np.var(ok, ddof=1))
    trimmed = stats.trimboth(np.sort(ok), trim) if trim > 0 else ok
    var_trim = float(np.var(trimmed, ddof=1)) if trimmed.size > 1 else float("nan")
    sd = math.sqrt(var) if coverage_mode == "mc" else math.sqrt(bound / n)
    cover = float(np.mean(np.abs(ok - psi0) <= Z95 * sd))
    return dict(
        sqrt_n_abs_bias=math.sqrt(n) * abs(mean - psi0),
        rvar=n * var / bound,
        coverage=cover,
        coverage_mc_se=math.sqrt(cover * (1.0 - cover) / ok.size),
        failures=failures,
        rvar_trimmed=n * var_trim / bound,
        mean_psi=mean,
    )


def summarise(config: SimGridConfig, estimates):
    psi0, bound = config.truth()
    rows = []
    for c, (n, p, q) in enumerate(config.cells()):
        for k, name in enumerate(config.estimators):
            m = cell_metrics(estimates[c, :, k], n, psi0, bound, config.coverage_mode, config.trim)
            flagged = m["failures"] > FAILURE_FLAG_RATE * config.replicates
            if flagged:
                logger.warning("%s at n=%s p=%s q=%s: %d failed replicates", name.value, n, p, q, m["failures"])
            rows.append(MetricsRow(name.value, int(n), float(p), float(q), flagged=flagged, **m))
    return rows


def run_grid(config: SimGridConfig, workers=1):
    """Simulate every cell and return one :class:`MetricsRow` per (cell, estimator)."""
    return summarise(config, replicate_estimates(config, workers))


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(rows: Sequence[MetricsRow], fh, header_lines=()):
    """CSV at full precision, preceded by ``# ``-prefixed comment lines."""
    for line in header_lines:
        fh.write(f"# {line}\n")
    fh.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        d = asdict(row)
        fh.write(",".join(_fmt(d[c]) for c in CSV_COLUMNS) + "\n")


def format_table(rows: Sequence[MetricsRow]):
    """Text table with one line per cell and one column group per estimator."""
    estimators = list(dict.fromkeys(r.estimator for r in rows))
    cells = list(dict.fromkeys((r.n, r.p, r.q) for r in rows))
    index = {(r.n, r.p, r.q, r.estimator): r for r in rows}
    head = f"{'n':>7} {'p':>6} {'q':>6}"
    sub = " " * len(head)
    for e in estimators:
        head += f" | {e:^34}"
        sub += f" | {'sqrt(n)|bias|':>12} {'rVar':>10} {'Cov':>10}"
    lines = [head, sub, "-" * len(sub)]
    for n, p, q in cells:
        line = f"{n:>7} {p:>6g} {q:>6g}"
        for e in estimators:
            r = index.get((n, p, q, e))
            if r is None:
                line += f" | {'':34}"
            else:
                line += f" | {r.sqrt_n_abs_bias:>12.6g} {r.rvar:>10.6g} {r.coverage:>10.6g}"
        lines.append(line)
    return "\n".join(lines) + "\n"
