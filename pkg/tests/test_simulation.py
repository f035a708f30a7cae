import io
import math

import numpy as np
import pytest
from scipy import integrate
from scipy.special import expit

from sotmle.simulation import (
    CSV_COLUMNS,
    DGPS,
    Dgp,
    SimGridConfig,
    cell_metrics,
    efficiency_bound,
    fit_perturbed_nuisance,
    format_table,
    generate,
    get_dgp,
    oracle_constants,
    oracle_psi0,
    replicate_estimates,
    run_grid,
    write_metrics_csv,
)

# Quadrature values for d1, computed independently of the Monte Carlo oracle.
D1_MEAN_G0 = 0.6595918032537188
D1_PSI0_QUAD = 0.3553714532495265
D1_BOUND_QUAD = 0.25052272988065977


def arcsine_expectation(f):
    """E f(W) for W = 6 B - 3, B ~ Beta(1/2, 1/2), via W = -3 cos(t), t ~ U(0, pi)."""
    return integrate.quad(lambda t: f(np.array([[-3.0 * math.cos(t)]]))[0], 0.0, math.pi, limit=200, epsabs=1e-13)[0] / math.pi


def d1_truth_by_quadrature():
    q = lambda w: 1 / (1 + math.exp(3 - 0.5 * math.exp(w[0, 0]) - 0.5 * w[0, 0]))
    g = lambda w: 1 / (1 + math.exp(-1 - 0.7 * w[0, 0]))
    psi0 = arcsine_expectation(lambda w: np.array([q(w)]))
    bound = arcsine_expectation(lambda w: np.array([q(w) * (1 - q(w)) / g(w) + (q(w) - psi0) ** 2]))
    mean_g = arcsine_expectation(lambda w: np.array([g(w)]))
    return psi0, bound, mean_g


def test_quadrature_constants_frozen():
    psi0, bound, mean_g = d1_truth_by_quadrature()
    assert psi0 == pytest.approx(D1_PSI0_QUAD, abs=1e-10)
    assert bound == pytest.approx(D1_BOUND_QUAD, abs=1e-10)
    assert mean_g == pytest.approx(D1_MEAN_G0, abs=1e-10)


def test_shipped_constants_match_quadrature():
    c = oracle_constants("d1")
    assert abs(c["psi0"] - D1_PSI0_QUAD) < 3 * c["psi0_mc_se"]
    assert abs(c["bound"] - D1_BOUND_QUAD) < 3 * c["bound_mc_se"]
    assert c["M"] >= 10**7
    d3 = oracle_constants("d3")
    assert 0 < d3["psi0"] < 1 and d3["bound"] > 0


class TestGenerate:
    def test_d1_support_and_score(self):
        ds = generate("d1", 1_000_000, np.random.default_rng(8))
        assert ds.w.min() >= -3 and ds.w.max() <= 3
        se = math.sqrt(D1_MEAN_G0 * (1 - D1_MEAN_G0) / ds.n)
        assert abs(ds.a.mean() - D1_MEAN_G0) < 3 * se

    def test_d3_support(self):
        ds = generate("d3", 50_000, np.random.default_rng(2))
        assert ds.w.shape == (50_000, 3)
        assert np.all((ds.w > 0) & (ds.w < 1))

    def test_seed_determines_sample(self):
        a = generate("d1", 100, np.random.default_rng(5))
        b = generate("d1", 100, np.random.default_rng(5))
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.y_filled(), b.y_filled())

    def test_unknown_design(self):
        with pytest.raises(ValueError):
            get_dgp("d2")


def constant_dgp(q=0.3, g=1.0):
    return Dgp(
        "flat",
        1,
        lambda n, rng: rng.normal(size=(n, 1)),
        lambda w: np.full(len(w), g),
        lambda w: np.full(len(w), q),
    )


class TestOracles:
    def test_constant_regression(self):
        psi0, se = oracle_psi0(constant_dgp(), 100_000, 1)
        assert psi0 == pytest.approx(0.3, abs=1e-12) and se < 1e-12

    def test_bound_without_missingness(self):
        bound, se = efficiency_bound(constant_dgp(), 200_000, 3, return_se=True)
        assert abs(bound - 0.21) < 4 * se

    def test_bound_exceeds_regression_variance(self):
        dgp = DGPS["d1"]
        w = dgp.sample_w(200_000, np.random.default_rng(0))
        assert efficiency_bound(dgp, 200_000, 1) > np.var(dgp.qbar0(w))

    def test_seeds_agree(self):
        a, sa = oracle_psi0("d3", 200_000, 11)
        b, sb = oracle_psi0("d3", 200_000, 12)
        assert abs(a - b) < 4 * math.hypot(sa, sb)

    def test_minimum_draws(self):
        with pytest.raises(ValueError):
            oracle_psi0("d1", 10, 0)


class TestMetrics:
    def test_hand_example(self):
        est = np.array([0.4, 0.5, 0.6, np.nan])
        m = cell_metrics(est, n=100, psi0=0.5, bound=0.25, trim=0.0)
        assert m["failures"] == 1
        assert m["sqrt_n_abs_bias"] == pytest.approx(0.0, abs=1e-12)
        assert m["rvar"] == pytest.approx(100 * 0.01 / 0.25)
        assert m["coverage"] == 1.0
        bound_mode = cell_metrics(est, n=100, psi0=0.5, bound=0.25, coverage_mode="bound", trim=0.0)
        assert bound_mode["coverage"] == pytest.approx(1 / 3)

    def test_too_few(self):
        assert math.isnan(cell_metrics([0.1, np.nan], 10, 0.1, 0.2)["rvar"])


class TestGrid:
    def test_perturbed_nuisance_modes(self):
        ds = generate("d1", 300, np.random.default_rng(0))
        unit = fit_perturbed_nuisance(ds, "d1", 0.1, 0.1, np.random.default_rng(1))
        single = fit_perturbed_nuisance(ds, "d1", 0.1, 0.1, np.random.default_rng(1), draws="single")
        assert unit.g_values(ds.w).shape == single.g_values(ds.w).shape == (300,)
        assert np.all((unit.g_values(ds.w) >= 0.01) & (unit.g_values(ds.w) <= 1))

    def test_smoke_and_worker_determinism(self):
        cfg = SimGridConfig(n_list=(200,), p_grid=(0.5, 0.1), q_grid=(0.1,), replicates=4, master_seed=3)
        one = replicate_estimates(cfg, workers=1, block=2)
        two = replicate_estimates(cfg, workers=2, block=3)
        np.testing.assert_array_equal(one, two)
        assert one.shape == (2, 4, 3) and np.all(np.isfinite(one))

    def test_rows_csv_and_table(self):
        cfg = SimGridConfig(n_list=(150,), replicates=2, master_seed=1, estimators=("tmle1",))
        rows = run_grid(cfg)
        assert len(rows) == 1 and rows[0].estimator == "tmle1"
        buf = io.StringIO()
        write_metrics_csv(rows, buf, ["hello"])
        lines = buf.getvalue().splitlines()
        assert lines[0] == "# hello" and lines[1] == ",".join(CSV_COLUMNS)
        assert len(lines[2].split(",")) == len(CSV_COLUMNS)
        assert "tmle1" in format_table(rows)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SimGridConfig(replicates=1)
        with pytest.raises(ValueError):
            SimGridConfig(draws="many")
        with pytest.raises(ValueError):
            SimGridConfig(p_grid=())

    def test_truth_override(self):
        assert SimGridConfig(psi0=0.1, bound=0.2).truth() == (0.1, 0.2)
        assert SimGridConfig(dgp="d3").truth()[0] == oracle_constants("d3")["psi0"]


@pytest.mark.slow
def test_replicate_means_centred_at_large_n():
    cfg = SimGridConfig(n_list=(10_000,), replicates=40, master_seed=8)
    psi0, _ = cfg.truth()
    est = replicate_estimates(cfg)[0]
    for k in range(est.shape[1]):
        col = est[:, k]
        assert abs(col.mean() - psi0) <= 4 * col.std(ddof=1) / math.sqrt(col.size)


@pytest.mark.slow
def test_first_order_damage_grows_with_n():
    cfg = SimGridConfig(
        n_list=(500, 1000, 2000, 10_000), p_grid=(0.01,), q_grid=(0.01,), replicates=200, master_seed=4,
        estimators=("tmle1",),
    )
    psi0, _ = cfg.truth()
    est = replicate_estimates(cfg)[:, :, 0]
    bias, se = [], []
    for (n, _, _), col in zip(cfg.cells(), est):
        bias.append(math.sqrt(n) * abs(col.mean() - psi0))
        se.append(math.sqrt(n) * col.std(ddof=1) / math.sqrt(col.size))
    for k in range(len(bias) - 1):
        assert bias[k + 1] >= bias[k] - 2 * math.hypot(se[k], se[k + 1])
    assert bias[-1] > bias[0]
