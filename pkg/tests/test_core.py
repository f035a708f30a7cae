import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from sotmle.core import (
    Dataset,
    EstimateReport,
    NuisancePair,
    Observation,
    clamp_g,
    clamp_qbar,
    eif_d1,
    eif_values,
    plugin_mean,
    remainder_r2,
    remainder_r3,
    stable_mean,
)
from sotmle.simulation import generate, oracle_constants, get_dgp

from conftest import linear_nuisance, random_dataset


def const(value):
    return lambda w: np.full(np.asarray(w).shape[0], value)


class TestDataset:
    def test_outcome_for_unobserved_rejected(self):
        with pytest.raises(ValueError, match="outcome present for unobserved unit"):
            Dataset([[0.0], [1.0]], [1, 0], [0.5, 0.2])

    def test_missing_outcome_rejected(self):
        with pytest.raises(ValueError, match="missing outcome for observed unit"):
            Dataset([[0.0], [1.0]], [1, 1], [0.5, np.nan])

    def test_needs_an_observed_unit(self):
        with pytest.raises(ValueError, match="unidentifiable"):
            Dataset([[0.0], [1.0]], [0, 0], [np.nan, np.nan])

    def test_outcome_range(self):
        with pytest.raises(ValueError, match="rescale"):
            Dataset([[0.0]], [1], [2.0])

    def test_non_finite_covariate(self):
        with pytest.raises(ValueError):
            Dataset([[np.inf]], [1], [0.5])

    def test_observation_roundtrip(self, small_dataset):
        back = Dataset.from_observations(list(small_dataset.observations()))
        np.testing.assert_array_equal(back.w, small_dataset.w)
        np.testing.assert_array_equal(back.a, small_dataset.a)
        np.testing.assert_array_equal(np.isnan(back.y), np.isnan(small_dataset.y))

    def test_observation_invariants(self):
        with pytest.raises(ValueError):
            Observation([0.0], 0, 0.3)
        with pytest.raises(ValueError):
            Observation([0.0], 2)
        with pytest.raises(ValueError, match="unequal"):
            Dataset.from_observations([Observation([0.0], 1, 0.2), Observation([0.0, 1.0], 1, 0.2)])

    def test_immutable(self, small_dataset):
        with pytest.raises(ValueError):
            small_dataset.w[0, 0] = 1.0

    def test_take(self, small_dataset):
        sub = small_dataset.take([0, 2, 2])
        assert sub.n == 3
        np.testing.assert_array_equal(sub.w[1], sub.w[2])


class TestPluginMean:
    def test_constant(self, small_dataset):
        assert plugin_mean(small_dataset, const(0.3)) == pytest.approx(0.3, abs=1e-15)

    def test_three_points(self):
        ds = Dataset([[0.0], [1.0], [2.0]], [1, 1, 1], [0.1, 0.2, 0.3])
        qbar = lambda w: np.array([0.2, 0.4, 0.6])
        assert plugin_mean(ds, qbar) == pytest.approx(0.4, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty dataset"):
            plugin_mean(None, const(0.3))

    def test_true_regression_matches_oracle(self):
        dgp = get_dgp("d1")
        frozen = oracle_constants("d1")
        ds = generate(dgp, 1_000_000, np.random.default_rng(3))
        values = dgp.qbar0(ds.w)
        est = plugin_mean(ds, dgp.qbar0)
        mc_se = math.sqrt(np.var(values, ddof=1) / values.size + frozen["psi0_mc_se"] ** 2)
        assert abs(est - frozen["psi0"]) <= 3 * mc_se


class TestEif:
    def test_unobserved(self):
        nu = NuisancePair(const(0.5), const(0.3))
        assert eif_d1(Observation([0.0], 0), nu, 0.4) == pytest.approx(0.1)

    def test_zero_residual(self):
        nu = NuisancePair(const(0.37), const(0.2))
        assert eif_d1(Observation([0.0], 1, 0.37), nu, 0.1) == pytest.approx(0.27)

    def test_direct(self):
        nu = NuisancePair(const(0.5), const(0.25))
        assert eif_d1(Observation([0.0], 1, 1.0), nu, 0.4) == pytest.approx(2.1, abs=1e-14)

    def test_missing_outcome(self):
        obs = Observation.__new__(Observation)
        object.__setattr__(obs, "w", np.array([0.0]))
        object.__setattr__(obs, "a", 1)
        object.__setattr__(obs, "y", None)
        with pytest.raises(ValueError, match="missing outcome for observed unit"):
            eif_d1(obs, NuisancePair(const(0.5), const(0.5)), 0.0)

    def test_vector_matches_scalar(self, small_dataset):
        nu = linear_nuisance(1)
        q = nu.qbar_values(small_dataset.w)
        g = nu.g_values(small_dataset.w)
        vec = eif_values(small_dataset, q, g, 0.4)
        scalar = [eif_d1(o, nu, 0.4) for o in small_dataset.observations()]
        np.testing.assert_allclose(vec, scalar, rtol=1e-13, atol=1e-15)

    @given(seed=st.integers(0, 2**31), n=st.integers(1, 60), d=st.integers(1, 3))
    def test_plugin_terms_cancel(self, seed, n, d):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(n, d))
        a = rng.integers(0, 2, n)
        a[0] = 1
        y = np.where(a == 1, rng.random(n), np.nan)
        ds = Dataset(w, a, y)
        nu = linear_nuisance(d)
        psi = plugin_mean(ds, nu.qbar_values)
        total = math.fsum(eif_d1(o, nu, psi) for o in ds.observations())
        q, g = nu.qbar_values(w), nu.g_values(w)
        expected = math.fsum(np.where(a == 1, (ds.y_filled() - q) / g, 0.0))
        assert total == pytest.approx(expected, rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("name", ["d1", "d3"])
    def test_mean_zero_at_truth(self, name):
        dgp = get_dgp(name)
        rng = np.random.default_rng(11)
        m = 100_000
        w = dgp.sample_w(m, rng)
        g, q = dgp.g0(w), dgp.qbar0(w)
        a = rng.random(m) < g
        y = (rng.random(m) < q).astype(float)
        eif = np.where(a, (y - q) / g, 0.0) + q - oracle_constants(name)["psi0"]
        assert abs(eif.mean()) <= 4 * eif.std(ddof=1) / math.sqrt(m)


class TestRemainders:
    def test_r2_vanishes(self, rng):
        pts = rng.normal(size=(50, 1))
        truth = linear_nuisance(1)
        other = linear_nuisance(1, qcoef=1.1, gcoef=-0.2)
        assert remainder_r2(pts, NuisancePair(other.qbar, truth.g), truth) == pytest.approx(0.0, abs=1e-15)
        assert remainder_r2(pts, NuisancePair(truth.qbar, other.g), truth) == pytest.approx(0.0, abs=1e-15)

    def test_r2_single_point(self):
        truth = NuisancePair(const(0.3), const(0.5))
        est = NuisancePair(const(0.4), const(0.25))
        assert remainder_r2([[0.0]], est, truth) == pytest.approx(-0.1, abs=1e-14)

    def test_positivity(self):
        truth = NuisancePair(const(0.3), const(0.5))
        with pytest.raises(ValueError, match="positivity violation"):
            remainder_r2([[0.0]], NuisancePair(const(0.4), const(0.0)), truth)
        with pytest.raises(ValueError, match="positivity violation"):
            remainder_r3([[0.0]], NuisancePair(const(0.4), const(0.0)), const(1.0), truth)

    @given(seed=st.integers(0, 2**31), m=st.integers(1, 40))
    def test_r2_bilinear(self, seed, m):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(m, 2))
        weights = rng.random(m) + 0.1
        truth = linear_nuisance(2)
        shift = rng.uniform(-0.1, 0.1, m)
        lookup = {p.tobytes(): s for p, s in zip(pts, shift)}

        def moved(k):
            return lambda w: truth.qbar(w) + k * np.array([lookup[x.tobytes()] for x in np.asarray(w)])

        g = lambda w: expit(0.1 + 0.3 * np.asarray(w)[:, 1])
        one = remainder_r2(pts, NuisancePair(moved(1.0), g), truth, weights)
        two = remainder_r2(pts, NuisancePair(moved(2.0), g), truth, weights)
        assert two == pytest.approx(2.0 * one, rel=1e-12, abs=1e-15)

    def test_r2_weighted_average(self, rng):
        pts = rng.normal(size=(20, 1))
        weights = rng.random(20)
        truth = linear_nuisance(1)
        est = linear_nuisance(1, qcoef=0.9, gcoef=0.1)
        expected = sum(
            wt * (1 - truth.g(p[None])[0] / est.g(p[None])[0]) * (est.qbar(p[None])[0] - truth.qbar(p[None])[0])
            for p, wt in zip(pts, weights)
        ) / weights.sum()
        assert remainder_r2(pts, est, truth, weights) == pytest.approx(expected, rel=1e-12)

    def test_r3_vanishes(self, rng):
        pts = rng.normal(size=(30, 1))
        truth = linear_nuisance(1)
        other = linear_nuisance(1, qcoef=1.0, gcoef=1.0)
        assert remainder_r3(pts, NuisancePair(other.qbar, truth.g), const(1.0), truth) == pytest.approx(0.0, abs=1e-15)
        assert remainder_r3(pts, NuisancePair(truth.qbar, other.g), const(1.7), truth) == pytest.approx(0.0, abs=1e-15)

    def test_r3_single_point(self):
        truth = NuisancePair(const(0.3), const(0.5))
        est = NuisancePair(const(0.4), const(0.25))
        assert remainder_r3([[0.0]], est, const(1.0), truth) == pytest.approx(0.1, abs=1e-14)


class TestNumerics:
    def test_clamps(self):
        np.testing.assert_array_equal(clamp_g([0.0, 0.5, 1.2]), [0.01, 0.5, 1.0])
        np.testing.assert_array_equal(clamp_qbar([0.0, 1.0]), [1e-4, 1 - 1e-4])

    def test_truncation_applied_on_access(self):
        nu = NuisancePair(const(0.0), const(0.001), trunc_g=0.05)
        assert nu.g_values([[0.0]])[0] == 0.05
        assert nu.raw_g_values([[0.0]])[0] == 0.001
        assert nu.qbar_values([[0.0]])[0] == 1e-4

    def test_compensated_mean(self):
        values = np.array([1e16, 1.0, -1e16] + [0.0] * 200_000)
        assert stable_mean(values) == pytest.approx(1.0 / values.size, rel=1e-12)
        with pytest.raises(ValueError, match="empty dataset"):
            stable_mean([])

    def test_report_serialises(self):
        rep = EstimateReport("TMLE1", 0.3, 0.01, 0.28, 0.32, np.array([0.1]), np.array([1e-12]))
        d = rep.to_dict()
        assert d["psi"] == 0.3 and d["bandwidth"] is None and not rep.out_of_range
