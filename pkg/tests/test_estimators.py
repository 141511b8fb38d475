import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratadj.core import ExperimentDesign, ObservedDataset, Population
from stratadj.errors import ArmTooSmall, InvalidAlpha, RankDeficient
from stratadj.estimators import (
    WlsProblem,
    confidence_interval,
    estimate_ols,
    estimate_ols_design_matrix,
    estimate_ols_int,
    estimate_unadjusted,
    fit_pooled_wls,
    fit_stratum_ols,
    normal_upper_quantile,
    wls_solve,
)
from stratadj.randomization import enumerate_assignments

from conftest import make_random_dataset


class TestWlsSolve:
    def test_exact_fit(self):
        problem = WlsProblem(np.array([2.0, 4.0]), np.array([[1.0], [2.0]]), np.ones(2))
        assert wls_solve(problem) == pytest.approx([2.0])

    def test_duplicate_column_detected(self):
        X = np.random.default_rng(0).normal(size=(10, 2))
        X = np.column_stack([X, X[:, 0]])
        with pytest.raises(RankDeficient) as err:
            wls_solve(WlsProblem(np.ones(10), X, np.ones(10)))
        assert err.value.columns  # names the dependent columns

    def test_weighted_normal_equation_residual(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 3))
        y = rng.normal(size=50)
        w = rng.uniform(0.1, 2.0, size=50)
        beta = wls_solve(WlsProblem(y, X, w))
        grad = X.T @ (w * (y - X @ beta))
        scale = np.abs(X.T @ (w * y)).max()
        assert np.abs(grad).max() < 1e-8 * max(scale, 1.0)

    def test_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            WlsProblem(np.ones(2), np.ones((2, 1)), np.zeros(2))


class TestConfidenceInterval:
    def test_standard_normal_quantile(self):
        lo, hi = confidence_interval(0.0, 1.0, 0.05)
        assert hi == pytest.approx(1.959964, abs=1e-6)
        assert lo == pytest.approx(-1.959964, abs=1e-6)
        assert normal_upper_quantile(0.025) == pytest.approx(1.9599639845, abs=1e-9)

    def test_degenerate_interval(self):
        assert confidence_interval(3.25, 0.0, 0.1) == (3.25, 3.25)

    def test_shifted_scaled(self):
        # 1 -/+ 1.959964 * 0.5
        lo, hi = confidence_interval(1.0, 0.25, 0.05)
        assert lo == pytest.approx(0.020018, abs=1e-3)
        assert hi == pytest.approx(1.979982, abs=1e-3)

    def test_invalid_alpha(self):
        with pytest.raises(InvalidAlpha):
            confidence_interval(0.0, 1.0, 1.5)


class TestUnadjusted:
    def test_p0_fixture_values(self, p0x_dataset):
        r = estimate_unadjusted(p0x_dataset, alpha=0.05)
        assert r.tau_hat == pytest.approx(-1.0, abs=1e-12)
        assert r.var_hat == pytest.approx(0.5, abs=1e-12)
        assert r.ci[0] == pytest.approx(-2.386, abs=1e-3)
        assert r.ci[1] == pytest.approx(0.386, abs=1e-3)
        assert r.se == pytest.approx(math.sqrt(0.5), abs=1e-12)

    def test_constant_outcomes_zero_everywhere(self):
        design = ExperimentDesign.from_counts([4, 6], [2, 3])
        pop = Population(design, np.full(10, 7.0), np.full(10, 7.0), np.zeros((10, 0)))
        for a in enumerate_assignments(design):
            r = estimate_unadjusted(pop.observe(a.z))
            assert r.tau_hat == pytest.approx(0.0, abs=1e-12)
            assert r.var_hat == pytest.approx(0.0, abs=1e-12)

    def test_singleton_arm_reports_undefined_variance(self):
        design = ExperimentDesign.from_counts([3], [1])
        ds = ObservedDataset(design, np.array([1, 0, 0]), np.array([1.0, 2.0, 3.0]),
                             np.zeros((3, 0)))
        r = estimate_unadjusted(ds)
        assert math.isfinite(r.tau_hat)
        assert r.var_hat is None and r.se is None and r.ci is None


class TestPooledWls:
    def test_recovers_common_slope(self):
        rng = np.random.default_rng(3)
        design = ExperimentDesign.from_counts([6, 8], [3, 4])
        X = rng.normal(size=(14, 2))
        b = np.array([1.5, -2.0])
        z = np.array([1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0], dtype=np.int8)
        y = X @ b + np.repeat([0.0, 5.0], [6, 8]) + z * 2.0
        ds = ObservedDataset(design, z, y, X)
        assert fit_pooled_wls(ds, 1) == pytest.approx(b, abs=1e-10)
        assert fit_pooled_wls(ds, 0) == pytest.approx(b, abs=1e-10)

    def test_constant_covariates_rank_deficient(self):
        design = ExperimentDesign.from_counts([6], [3])
        X = np.full((6, 1), 4.0)
        ds = ObservedDataset(design, np.array([1, 1, 1, 0, 0, 0]), np.arange(6.0), X)
        with pytest.raises(RankDeficient):
            fit_pooled_wls(ds, 1)

    def test_p0x_closed_form(self, p0x_dataset):
        # single stratum, single covariate: beta = s_xy / s_xx = 0.5 / 0.5
        assert fit_pooled_wls(p0x_dataset, 1) == pytest.approx([1.0], abs=1e-12)

    def test_small_arm_rejected(self):
        design = ExperimentDesign.from_counts([4], [1])
        ds = ObservedDataset(design, np.array([1, 0, 0, 0]), np.arange(4.0),
                             np.arange(4.0).reshape(4, 1))
        with pytest.raises(ArmTooSmall):
            fit_pooled_wls(ds, 1)


class TestOls:
    def test_exactly_linear_outcomes(self):
        rng = np.random.default_rng(4)
        design = ExperimentDesign.from_counts([6, 6], [3, 3])
        X = rng.normal(size=(12, 2))
        b = np.array([2.0, -1.0])
        pop = Population(design, 1.0 + X @ b, X @ b, X)
        truth = 1.0
        for a in enumerate_assignments(design, cap=500):
            r = estimate_ols(pop.observe(a.z))
            assert r.tau_hat == pytest.approx(truth, abs=1e-9)
            assert r.var_hat == pytest.approx(0.0, abs=1e-12)

    def test_zero_slopes_reduce_to_unadjusted(self):
        # constant outcomes within arms force zero fitted slopes
        design = ExperimentDesign.from_counts([4], [2])
        X = np.array([[0.0], [1.0], [2.0], [5.0]])
        ds = ObservedDataset(design, np.array([1, 1, 0, 0]), np.array([1.0, 1.0, 2.0, 2.0]), X)
        r_ols = estimate_ols(ds)
        r_un = estimate_unadjusted(ds)
        assert r_ols.beta_hats["beta1"] == pytest.approx([0.0], abs=1e-12)
        assert r_ols.tau_hat == pytest.approx(r_un.tau_hat, abs=1e-12)

    def test_two_paths_agree_on_p0x(self, p0x_dataset):
        assert estimate_ols(p0x_dataset).tau_hat == pytest.approx(
            estimate_ols_design_matrix(p0x_dataset), abs=1e-10
        )

    def test_design_matrix_equivalence_sweep(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            ds = make_random_dataset(rng)
            worst = max(worst, abs(estimate_ols(ds).tau_hat - estimate_ols_design_matrix(ds)))
        assert worst < 1e-8

    def test_single_stratum_design_matrix(self):
        rng = np.random.default_rng(6)
        ds = make_random_dataset(rng, B=1, K=2)
        assert estimate_ols(ds).tau_hat == pytest.approx(
            estimate_ols_design_matrix(ds), abs=1e-10
        )


class TestStratumOls:
    def test_exact_slope(self):
        design = ExperimentDesign.from_counts([8], [4])
        X = np.arange(8.0).reshape(8, 1)
        z = np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=np.int8)
        y = 3.0 * X[:, 0] + z
        ds = ObservedDataset(design, z, y, X)
        assert fit_stratum_ols(ds, 0, 1) == pytest.approx([3.0], abs=1e-10)

    def test_too_few_units(self):
        design = ExperimentDesign.from_counts([6], [2])  # n1 = K + 1 for K = 1
        rng = np.random.default_rng(7)
        ds = ObservedDataset(design, np.array([1, 1, 0, 0, 0, 0]), rng.normal(size=6),
                             rng.normal(size=(6, 1)))
        with pytest.raises(ArmTooSmall):
            fit_stratum_ols(ds, 0, 1)

    def test_simple_regression_closed_form(self):
        rng = np.random.default_rng(8)
        ds = make_random_dataset(rng, B=1, K=1, min_arm=4)
        beta = fit_stratum_ols(ds, 0, 1)
        treated = ds.z.astype(bool)
        x, y = ds.X[treated, 0], ds.y[treated]
        expected = np.cov(x, y, ddof=1)[0, 1] / np.var(x, ddof=1)
        assert beta == pytest.approx([expected], abs=1e-10)


class TestOlsInt:
    def test_homogeneous_population_matches_pooled(self):
        rng = np.random.default_rng(9)
        design = ExperimentDesign.from_counts([8, 8], [4, 4])
        X = rng.normal(size=(16, 1))
        b = np.array([2.5])
        pop = Population(design, 1.0 + X @ b, X @ b, X)
        ds = pop.observe(np.tile([1, 1, 1, 1, 0, 0, 0, 0], 2))
        assert estimate_ols_int(ds).tau_hat == pytest.approx(
            estimate_ols(ds).tau_hat, abs=1e-10
        )

    def test_single_stratum_equals_pooled(self):
        rng = np.random.default_rng(10)
        ds = make_random_dataset(rng, B=1, K=1, min_arm=4)
        assert estimate_ols_int(ds).tau_hat == pytest.approx(
            estimate_ols(ds).tau_hat, abs=1e-12
        )

    def test_small_strata_with_many_covariates_rejected(self):
        rng = np.random.default_rng(11)
        K = 10
        design = ExperimentDesign.from_counts([10, 10], [5, 5])
        X = rng.normal(size=(20, K))
        y = rng.normal(size=20)
        z = np.tile([1] * 5 + [0] * 5, 2)
        ds = ObservedDataset(design, z, y, X)
        with pytest.raises(ArmTooSmall, match="stratum 1"):
            estimate_ols_int(ds)

    def test_df_divisor_variants(self):
        rng = np.random.default_rng(12)
        ds = make_random_dataset(rng, B=2, K=1, min_arm=4)
        arm = estimate_ols_int(ds, df_divisor="arm")
        stratum = estimate_ols_int(ds, df_divisor="stratum")
        assert arm.tau_hat == pytest.approx(stratum.tau_hat, abs=1e-12)
        # the stratum divisor is larger, deflating the variance estimate
        assert stratum.var_hat < arm.var_hat

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(13)
        ds = make_random_dataset(rng, B=2, K=2, min_arm=5)
        r = estimate_ols_int(ds)
        for i in range(ds.design.B):
            lo, hi = ds.design.starts[i], ds.design.starts[i + 1]
            for arm, key in ((1, "beta1"), (0, "beta0")):
                rows = ds.z[lo:hi] == arm
                Xa = ds.X[lo:hi][rows]
                ya = ds.y[lo:hi][rows]
                Xc = Xa - Xa.mean(axis=0)
                resid = ya - ya.mean() - Xc @ r.beta_hats[key][i]
                scale = max(1.0, np.abs(Xc.T @ ya).max())
                assert np.abs(Xc.T @ resid).max() < 1e-8 * scale


class TestInvarianceProperties:
    @settings(deadline=None, max_examples=20, derandomize=True)
    @given(
        seed=st.integers(0, 2**31 - 1),
        a=st.floats(0.25, 4.0),
        b=st.floats(-10.0, 10.0),
    )
    def test_affine_equivariance(self, seed, a, b):
        ds = make_random_dataset(np.random.default_rng(seed), min_arm=4)
        scaled = ObservedDataset(ds.design, ds.z, a * ds.y + b, ds.X)
        for fn in (estimate_unadjusted, estimate_ols, estimate_ols_int):
            r0 = fn(ds)
            r1 = fn(scaled)
            assert r1.tau_hat == pytest.approx(a * r0.tau_hat, rel=1e-9, abs=1e-9)
            assert r1.var_hat == pytest.approx(a * a * r0.var_hat, rel=1e-9, abs=1e-9)
            width0 = r0.ci[1] - r0.ci[0]
            width1 = r1.ci[1] - r1.ci[0]
            assert width1 == pytest.approx(a * width0, rel=1e-9, abs=1e-9)

    @settings(deadline=None, max_examples=20, derandomize=True)
    @given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-25.0, 25.0))
    def test_covariate_translation_invariance(self, seed, shift):
        ds = make_random_dataset(np.random.default_rng(seed), min_arm=4)
        moved = ObservedDataset(ds.design, ds.z, ds.y, ds.X + shift)
        for fn in (estimate_ols, estimate_ols_int):
            r0 = fn(ds)
            r1 = fn(moved)
            assert r1.tau_hat == pytest.approx(r0.tau_hat, rel=1e-9, abs=1e-9)
            assert r1.var_hat == pytest.approx(r0.var_hat, rel=1e-9, abs=1e-9)
        assert estimate_ols_design_matrix(moved) == pytest.approx(
            estimate_ols_design_matrix(ds), rel=1e-9, abs=1e-9
        )
