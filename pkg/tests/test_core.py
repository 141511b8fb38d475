import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratadj.core import (
    ExperimentDesign,
    Population,
    StratumDesign,
    condition_diagnostics,
    stratum_summaries,
    validate_dataset,
)
from stratadj.errors import (
    DegenerateVariance,
    DimensionMismatch,
    EmptyStratumArm,
    NonFinite,
)

from conftest import make_random_dataset


def rows_one_stratum():
    return [
        ("a", 1, 1.0, (0.0,)),
        ("a", 1, 2.0, (1.0,)),
        ("a", 0, 2.0, (2.0,)),
        ("a", 0, 3.0, (3.0,)),
    ]


class TestValidateDataset:
    def test_infers_design_from_counts(self):
        ds = validate_dataset(rows_one_stratum())
        assert ds.design.B == 1
        assert ds.design.strata[0].n == 4
        assert ds.design.strata[0].n1 == 2
        assert ds.labels == ("a",)

    def test_all_treated_stratum_rejected(self):
        rows = [("s", 1, 1.0, ()), ("s", 1, 2.0, ())]
        with pytest.raises(EmptyStratumArm, match="s"):
            validate_dataset(rows)

    def test_ragged_covariates_rejected(self):
        rows = [("s", 1, 1.0, (1.0, 2.0)), ("s", 0, 2.0, (1.0, 2.0, 3.0))]
        with pytest.raises(DimensionMismatch):
            validate_dataset(rows)

    def test_non_finite_rejected(self):
        rows = [("s", 1, float("nan"), ()), ("s", 0, 2.0, ())]
        with pytest.raises(NonFinite):
            validate_dataset(rows)

    def test_first_appearance_order(self):
        rows = [("b", 1, 1.0, ()), ("a", 1, 1.0, ()), ("b", 0, 0.0, ()), ("a", 0, 0.0, ())]
        ds = validate_dataset(rows)
        assert ds.labels == ("b", "a")


class TestDesignInvariants:
    def test_weights_sum_to_one(self):
        d = ExperimentDesign.from_counts([3, 5, 9], [1, 2, 4])
        assert abs(math.fsum(d.c) - 1.0) < 1e-12
        assert ((d.p > 0) & (d.p < 1)).all()

    def test_empty_arm_rejected(self):
        with pytest.raises(EmptyStratumArm):
            StratumDesign(1, 4, 4)
        with pytest.raises(EmptyStratumArm):
            StratumDesign(1, 4, 0)


class TestStratumSummaries:
    def test_two_point_variance(self):
        ds = validate_dataset(rows_one_stratum())
        s = stratum_summaries(ds)[0]
        assert s.mean1 == pytest.approx(1.5)
        assert s.var1 == pytest.approx(0.5)

    def test_singleton_arm_marks_variance_undefined(self):
        rows = [("s", 1, 1.0, ()), ("s", 0, 2.0, ()), ("s", 0, 3.0, ())]
        s = stratum_summaries(validate_dataset(rows))[0]
        assert s.var1 is None
        assert s.var0 == pytest.approx(0.5)
        assert s.xy_cov1 is None

    def test_p0_fixture_arm_means(self, p0x_dataset):
        s = stratum_summaries(p0x_dataset)[0]
        assert s.mean1 == pytest.approx(1.5)
        assert s.mean0 == pytest.approx(2.5)
        assert s.x_mean == pytest.approx(np.array([1.5]))

    @settings(deadline=None, max_examples=25, derandomize=True)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_residual_means_are_zero(self, seed):
        ds = make_random_dataset(np.random.default_rng(seed))
        for i, s in enumerate(stratum_summaries(ds)):
            lo, hi = ds.design.starts[i], ds.design.starts[i + 1]
            treated = ds.z[lo:hi].astype(bool)
            assert abs(np.mean(ds.y[lo:hi][treated]) - s.mean1) < 1e-12
            assert abs(np.mean(ds.y[lo:hi][~treated]) - s.mean0) < 1e-12

    @settings(deadline=None, max_examples=25, derandomize=True)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_permutation_invariance_within_stratum(self, seed):
        rng = np.random.default_rng(seed)
        ds = make_random_dataset(rng)
        perm = np.concatenate([
            ds.design.starts[i] + rng.permutation(st.n)
            for i, st in enumerate(ds.design.strata)
        ])
        shuffled = type(ds)(ds.design, ds.z[perm], ds.y[perm], ds.X[perm])
        for a, b in zip(stratum_summaries(ds), stratum_summaries(shuffled)):
            assert a.mean1 == pytest.approx(b.mean1, abs=1e-12)
            assert a.var1 == pytest.approx(b.var1, abs=1e-12)
            assert a.var0 == pytest.approx(b.var0, abs=1e-12)
            assert np.allclose(a.x_mean1, b.x_mean1, atol=1e-12)


class TestConditionDiagnostics:
    def test_constant_treated_outcome_degenerate(self):
        design = ExperimentDesign.from_counts([4], [2])
        pop = Population(design, np.full(4, 3.0), np.array([0.0, 1.0, 2.0, 3.0]), np.zeros((4, 0)))
        with pytest.raises(DegenerateVariance):
            condition_diagnostics(pop)

    def test_single_spike_distance(self):
        c = 8.0
        design = ExperimentDesign.from_counts([4], [2])
        pop = Population(design, np.array([0.0, 0.0, 0.0, c]), np.array([0.0, 1.0, 2.0, 3.0]),
                         np.zeros((4, 0)))
        diag = condition_diagnostics(pop)
        assert diag.max_sq_dist_y1 == pytest.approx((3 * c / 4) ** 2 / 4)

    def test_p0_weighted_distance_matches_direct_formula(self, p0x_population):
        # independent recomputation of the display from raw arrays
        pop = p0x_population
        d = pop.design
        mean1 = pop.y1.mean()
        s2 = pop.y1.var(ddof=1)
        denom = (d.c * s2 * d.n0s / d.n1s).sum()
        expected = ((pop.y1 - mean1) ** 2).max() / (d.p[0] ** 2) / denom
        diag = condition_diagnostics(pop)
        assert diag.m1n == pytest.approx(expected, rel=1e-12)
        assert diag.m1n == pytest.approx(5.4)
        assert diag.p_range == (0.5, 0.5)

    @settings(deadline=None, max_examples=20, derandomize=True)
    @given(seed=st.integers(0, 2**31 - 1), shift=st.floats(-50, 50))
    def test_per_stratum_shift_invariance(self, seed, shift):
        rng = np.random.default_rng(seed)
        ds = make_random_dataset(rng, B=2, K=1)
        pop = Population(ds.design, ds.y, rng.normal(size=ds.design.N), ds.X)
        shifted_y1 = pop.y1.copy()
        lo, hi = pop.design.starts[0], pop.design.starts[1]
        shifted_y1[lo:hi] += shift
        shifted = Population(pop.design, shifted_y1, pop.y0, pop.X)
        a = condition_diagnostics(pop)
        b = condition_diagnostics(shifted)
        assert a.m1n == pytest.approx(b.m1n, rel=1e-9)
        assert a.max_sq_dist_y1 == pytest.approx(b.max_sq_dist_y1, rel=1e-9)
