"""Exact population-level quantities and enumeration-based ground truth.

Everything here treats the full potential-outcome table as known: fixed
means, variances, projections, and the exact randomization-distribution
moments of any estimator obtained by enumerating every assignment. The
estimators package is tested against this module, never the other way
around. Cross-stratum and cross-assignment accumulations use compensated
summation so the finite-sample identities hold to 1e-12.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import (
    ExperimentDesign,
    Population,
    arm_outcome_moments,
    grouped_sums,
    stratum_means,
)
from .errors import SingularCovariance, StratAdjError, TooLarge, VarianceUndefined
from .randomization import (
    DEFAULT_ENUMERATION_CAP,
    Assignment,
    count_assignments,
    enumerate_assignments,
    sample_assignment,
)

MAX_CONDITION_NUMBER = 1e12


# ---------------------------------------------------------------------------
# Fixed population moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PopulationMoments:
    """Non-random summary of a potential-outcome table.

    All variances and covariances use n_i - 1 divisors. ``sigma2_unadj`` is
    the exact randomization variance of the stratified difference-in-means;
    ``sigma2_y1``/``sigma2_y0`` are the exact variances of the weighted
    treated/control sample means.
    """

    tau: float
    tau_i: np.ndarray
    s2_y1: np.ndarray
    s2_y0: np.ndarray
    s2_tau: np.ndarray
    sxx_i: np.ndarray
    sxy1_i: np.ndarray
    sxy0_i: np.ndarray
    sigma2_unadj: float
    sxx: np.ndarray
    sxy1: np.ndarray
    sxy0: np.ndarray
    ybar1: float
    ybar0: float
    sigma2_y1: float
    sigma2_y0: float


def population_moments(population: Population) -> PopulationMoments:
    """All fixed per-stratum and aggregate moments of a population."""
    d = population.design
    K = population.K
    tau_unit = population.y1 - population.y0
    mean1 = stratum_means(population.y1, d)
    mean0 = stratum_means(population.y0, d)
    tau_i = mean1 - mean0

    def _center(v: np.ndarray, m: np.ndarray) -> np.ndarray:
        return v - np.repeat(m, d.ns)

    c1 = _center(population.y1, mean1)
    c0 = _center(population.y0, mean0)
    ct = c1 - c0
    starts = d.starts[:-1]
    s2_y1 = grouped_sums(c1 * c1, starts) / (d.ns - 1)
    s2_y0 = grouped_sums(c0 * c0, starts) / (d.ns - 1)
    s2_tau = grouped_sums(ct * ct, starts) / (d.ns - 1)

    if K:
        xbar = stratum_means(population.X, d)
        xc = population.X - np.repeat(xbar, d.ns, axis=0)
        sxx_i = np.empty((d.B, K, K))
        sxy1_i = np.empty((d.B, K))
        sxy0_i = np.empty((d.B, K))
        for i in range(d.B):
            lo, hi = d.starts[i], d.starts[i + 1]
            Xi = xc[lo:hi]
            denom = d.ns[i] - 1
            sxx_i[i] = Xi.T @ Xi / denom
            sxy1_i[i] = Xi.T @ c1[lo:hi] / denom
            sxy0_i[i] = Xi.T @ c0[lo:hi] / denom
    else:
        sxx_i = np.zeros((d.B, 0, 0))
        sxy1_i = np.zeros((d.B, 0))
        sxy0_i = np.zeros((d.B, 0))
    sxx = np.einsum("i,ijk->jk", d.c, sxx_i)
    sxy1 = d.c @ sxy1_i
    sxy0 = d.c @ sxy0_i

    c2 = d.c * d.c
    sigma2_unadj = math.fsum(c2 * (s2_y1 / d.n1s + s2_y0 / d.n0s - s2_tau / d.ns))
    sigma2_y1 = math.fsum(c2 * s2_y1 * (1.0 / d.n1s - 1.0 / d.ns))
    sigma2_y0 = math.fsum(c2 * s2_y0 * (1.0 / d.n0s - 1.0 / d.ns))
    return PopulationMoments(
        tau=math.fsum(d.c * tau_i),
        tau_i=tau_i,
        s2_y1=s2_y1,
        s2_y0=s2_y0,
        s2_tau=s2_tau,
        sxx_i=sxx_i,
        sxy1_i=sxy1_i,
        sxy0_i=sxy0_i,
        sigma2_unadj=sigma2_unadj,
        sxx=sxx,
        sxy1=sxy1,
        sxy0=sxy0,
        ybar1=math.fsum(d.c * mean1),
        ybar0=math.fsum(d.c * mean0),
        sigma2_y1=sigma2_y1,
        sigma2_y0=sigma2_y0,
    )


# ---------------------------------------------------------------------------
# Population projections (fixed, non-random regression decompositions)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectionSet:
    """Projection of potential outcomes on centered covariates.

    ``mode`` is "pooled" (one slope vector per arm, weighted across strata)
    or "per-stratum" (own slopes per stratum and arm). ``sigma2`` is the
    exact randomization variance of the matching adjusted estimator built
    from the residual variances.
    """

    mode: str
    beta1: np.ndarray
    beta0: np.ndarray
    resid1: np.ndarray
    resid0: np.ndarray
    s2_resid1: np.ndarray
    s2_resid0: np.ndarray
    s2_resid_tau: np.ndarray
    sx_resid1: np.ndarray
    sx_resid0: np.ndarray
    sigma2: float


def _solve_spd(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    if mat.shape[0] == 0:
        return np.zeros(rhs.shape[-1] if rhs.ndim else 0)
    cond = np.linalg.cond(mat)
    if not np.isfinite(cond) or cond > MAX_CONDITION_NUMBER:
        raise SingularCovariance(f"{what} has condition number {cond:.3g}")
    return np.linalg.solve(mat, rhs)


def population_projections(population: Population, mode: str = "pooled") -> ProjectionSet:
    """Fixed projection coefficients, residuals, and residual variances.

    Raises SingularCovariance when the relevant covariance matrix (pooled
    weighted, or any single stratum's) is numerically singular.
    """
    if mode not in ("pooled", "per-stratum"):
        raise ValueError(f"mode must be 'pooled' or 'per-stratum', got {mode!r}")
    d = population.design
    K = population.K
    pm = population_moments(population)

    if mode == "pooled":
        beta1 = _solve_spd(pm.sxx, pm.sxy1, "pooled covariate covariance")
        beta0 = _solve_spd(pm.sxx, pm.sxy0, "pooled covariate covariance")
        beta1_rows = np.broadcast_to(beta1, (d.B, K))
        beta0_rows = np.broadcast_to(beta0, (d.B, K))
    else:
        beta1 = np.empty((d.B, K))
        beta0 = np.empty((d.B, K))
        for i in range(d.B):
            beta1[i] = _solve_spd(pm.sxx_i[i], pm.sxy1_i[i], f"stratum {i + 1} covariate covariance")
            beta0[i] = _solve_spd(pm.sxx_i[i], pm.sxy0_i[i], f"stratum {i + 1} covariate covariance")
        beta1_rows, beta0_rows = beta1, beta0

    mean1 = stratum_means(population.y1, d)
    mean0 = stratum_means(population.y0, d)
    if K:
        xbar = stratum_means(population.X, d)
        xc = population.X - np.repeat(xbar, d.ns, axis=0)
        fit1 = np.einsum("ij,ij->i", xc, np.repeat(beta1_rows, d.ns, axis=0))
        fit0 = np.einsum("ij,ij->i", xc, np.repeat(beta0_rows, d.ns, axis=0))
    else:
        xc = np.zeros((d.N, 0))
        fit1 = fit0 = np.zeros(d.N)
    resid1 = population.y1 - np.repeat(mean1, d.ns) - fit1
    resid0 = population.y0 - np.repeat(mean0, d.ns) - fit0

    starts = d.starts[:-1]
    rt = resid1 - resid0
    s2_r1 = grouped_sums(resid1 * resid1, starts) / (d.ns - 1)
    s2_r0 = grouped_sums(resid0 * resid0, starts) / (d.ns - 1)
    s2_rt = grouped_sums(rt * rt, starts) / (d.ns - 1)
    if K:
        sx_r1 = grouped_sums(xc * resid1[:, None], starts) / (d.ns - 1)[:, None]
        sx_r0 = grouped_sums(xc * resid0[:, None], starts) / (d.ns - 1)[:, None]
    else:
        sx_r1 = sx_r0 = np.zeros((d.B, 0))
    c2 = d.c * d.c
    sigma2 = math.fsum(c2 * (s2_r1 / d.n1s + s2_r0 / d.n0s - s2_rt / d.ns))
    return ProjectionSet(
        mode=mode,
        beta1=beta1,
        beta0=beta0,
        resid1=resid1,
        resid0=resid0,
        s2_resid1=s2_r1,
        s2_resid0=s2_r0,
        s2_resid_tau=s2_rt,
        sx_resid1=sx_r1,
        sx_resid0=sx_r0,
        sigma2=sigma2,
    )


def _all_p_equal(design: ExperimentDesign) -> bool:
    n1, n = design.n1s, design.ns
    return all(int(n1[i]) * int(n[0]) == int(n1[0]) * int(n[i]) for i in range(design.B))


@dataclass(frozen=True)
class VarianceGaps:
    """Exact finite-population variance differences between the estimators.

    ``gap_unadj_ols`` equals N*(sigma2_unadj - sigma2_ols) only when every
    stratum treats the same proportion (``gap_unadj_ols_exact``); otherwise
    the identity is asymptotic only. ``gap_ols_olsint`` is exact always.
    """

    delta2: np.ndarray
    tilde_delta2: np.ndarray
    gap_unadj_ols: float
    gap_unadj_ols_exact: bool
    gap_ols_olsint: float


def variance_gaps(
    population: Population,
    pooled: ProjectionSet,
    per_stratum: ProjectionSet,
) -> VarianceGaps:
    """Per-stratum and aggregate variance-reduction terms."""
    if pooled.mode != "pooled" or per_stratum.mode != "per-stratum":
        raise ValueError("pass the pooled and per-stratum projection sets in order")
    d = population.design
    pm = population_moments(population)
    p = d.p
    q = 1.0 - p
    delta2 = np.empty(d.B)
    tilde_delta2 = np.empty(d.B)
    gamma_terms = np.empty(d.B)
    for i in range(d.B):
        beta_mix = q[i] * pooled.beta1 + p[i] * pooled.beta0
        beta_mix_i = q[i] * per_stratum.beta1[i] + p[i] * per_stratum.beta0[i]
        gamma = q[i] * (per_stratum.beta1[i] - pooled.beta1) + p[i] * (per_stratum.beta0[i] - pooled.beta0)
        pq = p[i] * q[i]
        delta2[i] = beta_mix @ pm.sxx_i[i] @ beta_mix / pq
        tilde_delta2[i] = beta_mix_i @ pm.sxx_i[i] @ beta_mix_i / pq
        gamma_terms[i] = gamma @ pm.sxx_i[i] @ gamma / pq
    return VarianceGaps(
        delta2=delta2,
        tilde_delta2=tilde_delta2,
        gap_unadj_ols=math.fsum(d.c * delta2),
        gap_unadj_ols_exact=_all_p_equal(d),
        gap_ols_olsint=math.fsum(d.c * gamma_terms),
    )


# ---------------------------------------------------------------------------
# Exact randomization-distribution moments by enumeration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExactMoments:
    mean: float
    variance: float
    skipped: int
    count: int


def exact_estimator_moments(
    population: Population,
    estimator: Callable[[Assignment], float],
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> ExactMoments:
    """Exact mean and variance of an estimator over all assignments.

    Assignments where the estimator raises a package error are skipped and
    counted; enumerable test populations are constructed so none are.
    """
    values: list[float] = []
    skipped = 0
    for a in enumerate_assignments(population.design, cap=cap):
        try:
            values.append(float(estimator(a)))
        except StratAdjError:
            skipped += 1
    count = len(values) + skipped
    if not values:
        raise VarianceUndefined("estimator failed on every assignment")
    mean = math.fsum(values) / len(values)
    variance = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return ExactMoments(mean=mean, variance=variance, skipped=skipped, count=count)


@dataclass(frozen=True)
class EnumerationStatistics:
    """Per-assignment statistics over the full assignment space."""

    tau_hats: np.ndarray      # stratified difference in means
    var_hats: np.ndarray      # its conservative variance estimator
    ybar1_hats: np.ndarray    # weighted treated sample mean
    cov_hats: np.ndarray      # weighted treated sample covariance of (b, d)
    count: int


def enumeration_statistics(
    population: Population,
    cap: int = DEFAULT_ENUMERATION_CAP,
    cov_pair: tuple[np.ndarray, np.ndarray] | None = None,
) -> EnumerationStatistics:
    """One enumeration pass collecting the identity-suite statistics.

    ``cov_pair`` selects the (b, d) population vectors whose weighted
    treated-arm sample covariance is tracked; defaults to (y1, y1), i.e. the
    sample variance of the treated potential outcome.
    """
    d = population.design
    if not ((d.n1s >= 2).all() and (d.n0s >= 2).all()):
        raise VarianceUndefined("enumeration statistics need two units per arm in every stratum")
    b, dd = cov_pair if cov_pair is not None else (population.y1, population.y1)
    starts = d.starts[:-1]
    c2 = d.c * d.c
    taus, vars_, ybars, covs = [], [], [], []
    for a in enumerate_assignments(d, cap=cap):
        z = a.z
        y = np.where(z == 1, population.y1, population.y0)
        m = arm_outcome_moments(d, z, y)
        taus.append(math.fsum(d.c * (m.mean1 - m.mean0)))
        vars_.append(math.fsum(c2 * (m.var1 / d.n1s + m.var0 / d.n0s)))
        ybars.append(math.fsum(d.c * m.mean1))

        zf = z.astype(np.float64)
        bsum = grouped_sums(zf * b, starts)
        dsum = grouped_sums(zf * dd, starts)
        bc = (b - np.repeat(bsum / d.n1s, d.ns)) * zf
        dc = (dd - np.repeat(dsum / d.n1s, d.ns)) * zf
        s_ibd = grouped_sums(bc * dc, starts) / (d.n1s - 1)
        covs.append(math.fsum(d.c * s_ibd))
    return EnumerationStatistics(
        tau_hats=np.array(taus),
        var_hats=np.array(vars_),
        ybar1_hats=np.array(ybars),
        cov_hats=np.array(covs),
        count=len(taus),
    )


def variance_estimator_bias(population: Population, cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Exact enumeration mean of the variance estimator minus the true variance.

    Equals sum_i c_i^2 * S2_tau_i / n_i; zero exactly when the unit-level
    effect is constant within every stratum. Requires two units per arm in
    every stratum.
    """
    d = population.design
    if not ((d.n1s >= 2).all() and (d.n0s >= 2).all()):
        raise VarianceUndefined("variance estimator needs 2 <= n1_i <= n_i - 2 in every stratum")
    stats = enumeration_statistics(population, cap=cap)
    pm = population_moments(population)
    return math.fsum(stats.var_hats) / stats.count - pm.sigma2_unadj


def conservativeness_gap_closed_form(population: Population) -> float:
    """sum_i c_i^2 * S2_tau_i / n_i, the exact expected variance overshoot."""
    d = population.design
    pm = population_moments(population)
    return math.fsum(d.c * d.c * pm.s2_tau / d.ns)


def sigma_for_method(population: Population, method: str) -> float:
    """True randomization SD of the named estimator's leading term."""
    if method == "unadj":
        return math.sqrt(population_moments(population).sigma2_unadj)
    if method == "ols":
        return math.sqrt(population_projections(population, "pooled").sigma2)
    if method == "ols_int":
        return math.sqrt(population_projections(population, "per-stratum").sigma2)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Identity suite: the machine-checkable finite-sample facts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OracleFixture:
    name: str
    population: Population
    equal_p: bool


@dataclass(frozen=True)
class IdentityResult:
    identity: str
    fixture: str
    passed: bool
    error: float
    tolerance: float


def _random_population(
    seed: int, ns: list[int], n1s: list[int], K: int, effect: float = 0.5
) -> Population:
    from .randomization import substream

    design = ExperimentDesign.from_counts(ns, n1s)
    rng = substream(seed)
    X = rng.normal(size=(design.N, K)) if K else np.zeros((design.N, 0))
    b1 = rng.normal(size=K)
    b0 = rng.normal(size=K)
    y1 = effect + (X @ b1 if K else 0.0) + rng.normal(size=design.N)
    y0 = (X @ b0 if K else 0.0) + rng.normal(size=design.N)
    return Population(design, y1, y0, X)


def builtin_fixtures(scale: str = "default") -> tuple[OracleFixture, ...]:
    """Deterministic populations with enumerable assignment spaces."""
    p0_design = ExperimentDesign.from_counts([4], [2])
    p0 = Population(p0_design, np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 1.0, 2.0, 3.0]),
                    np.zeros((4, 0)))
    p0x = Population(p0_design, p0.y1, p0.y0, np.array([[0.0], [1.0], [2.0], [3.0]]))
    p1 = Population(p0_design, p0.y1, np.zeros(4), np.zeros((4, 0)))
    fixtures = [
        OracleFixture("p0", p0, equal_p=True),
        OracleFixture("p0x", p0x, equal_p=True),
        OracleFixture("p1", p1, equal_p=True),
        OracleFixture("balanced-2", _random_population(101, [6, 4], [3, 2], 2), equal_p=True),
        OracleFixture("unequal-p", _random_population(202, [6, 5], [2, 3], 1), equal_p=False),
        OracleFixture("three-strata", _random_population(303, [6, 6, 4], [3, 3, 2], 2), equal_p=True),
    ]
    if scale == "large":
        fixtures += [
            OracleFixture("wide", _random_population(404, [10, 8], [5, 4], 2), equal_p=True),
            OracleFixture("deep", _random_population(505, [12, 6], [6, 3], 2), equal_p=True),
            OracleFixture("big", _random_population(606, [10, 10], [5, 5], 3), equal_p=True),
        ]
    elif scale != "default":
        raise ValueError(f"scale must be 'default' or 'large', got {scale!r}")
    return tuple(fixtures)


def run_identity_suite(
    fixtures: Iterable[OracleFixture] | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[IdentityResult]:
    """Check every exact finite-sample identity on each fixture.

    Covers: exact mean/variance of the difference-in-means and of the
    weighted treated mean, the exact conservativeness gap, exactness of the
    treated-arm sample covariance, projection orthogonality, the outcome and
    residual variance decompositions, the variance orderings and gap
    identities, and agreement of the two adjusted-estimator constructions.
    """
    from .estimators import estimate_ols, estimate_ols_design_matrix

    if fixtures is None:
        fixtures = builtin_fixtures()
    results: list[IdentityResult] = []

    def check(identity: str, fixture: str, error: float, tol: float) -> None:
        results.append(IdentityResult(identity, fixture, bool(error <= tol), float(error), tol))

    for fx in fixtures:
        pop = fx.population
        d = pop.design
        pm = population_moments(pop)
        K = pop.K
        cov_pair = (pop.y1, pop.X[:, 0]) if K else (pop.y1, pop.y1)
        stats = enumeration_statistics(pop, cap=cap, cov_pair=cov_pair)
        M = stats.count

        def rel(err: float, magnitude: float) -> float:
            return err / magnitude if magnitude > 1.0 else err

        enum_mean = math.fsum(stats.tau_hats) / M
        enum_var = math.fsum((stats.tau_hats - enum_mean) ** 2) / M
        check("prop1-mean", fx.name, rel(abs(enum_mean - pm.tau), abs(pm.tau)), 1e-12)
        check("prop1-variance", fx.name, rel(abs(enum_var - pm.sigma2_unadj), pm.sigma2_unadj), 1e-12)

        ymean = math.fsum(stats.ybar1_hats) / M
        yvar = math.fsum((stats.ybar1_hats - ymean) ** 2) / M
        check("prop2-mean", fx.name, rel(abs(ymean - pm.ybar1), abs(pm.ybar1)), 1e-12)
        check("prop2-variance", fx.name, rel(abs(yvar - pm.sigma2_y1), pm.sigma2_y1), 1e-12)

        gap = math.fsum(stats.var_hats) / M - pm.sigma2_unadj
        check("conservative-gap", fx.name,
              rel(abs(gap - conservativeness_gap_closed_form(pop)), abs(gap)), 1e-12)

        if K:
            sibd_target = math.fsum(d.c * (pm.sxy1_i[:, 0]))
        else:
            sibd_target = math.fsum(d.c * pm.s2_y1)
        sibd_mean = math.fsum(stats.cov_hats) / M
        check("covariance-unbiased", fx.name, rel(abs(sibd_mean - sibd_target), abs(sibd_target)), 1e-12)

        if K:
            pooled = population_projections(pop, "pooled")
            per = population_projections(pop, "per-stratum")

            orth1 = np.abs(d.c @ pooled.sx_resid1).max()
            orth0 = np.abs(d.c @ pooled.sx_resid0).max()
            check("pooled-orthogonality", fx.name, max(orth1, orth0), 1e-10)

            dec_err = 0.0
            for i in range(d.B):
                lhs1 = pm.s2_y1[i]
                rhs1 = (pooled.beta1 @ pm.sxx_i[i] @ pooled.beta1
                        + pooled.s2_resid1[i] + 2.0 * pooled.sx_resid1[i] @ pooled.beta1)
                lhs0 = pm.s2_y0[i]
                rhs0 = (pooled.beta0 @ pm.sxx_i[i] @ pooled.beta0
                        + pooled.s2_resid0[i] + 2.0 * pooled.sx_resid0[i] @ pooled.beta0)
                dec_err = max(dec_err, abs(lhs1 - rhs1), abs(lhs0 - rhs0))
            check("outcome-decomposition", fx.name, dec_err, 1e-10)

            res_err = 0.0
            for i in range(d.B):
                d1 = per.beta1[i] - pooled.beta1
                d0 = per.beta0[i] - pooled.beta0
                res_err = max(
                    res_err,
                    abs(pooled.s2_resid1[i] - (d1 @ pm.sxx_i[i] @ d1 + per.s2_resid1[i])),
                    abs(pooled.s2_resid0[i] - (d0 @ pm.sxx_i[i] @ d0 + per.s2_resid0[i])),
                )
            check("residual-decomposition", fx.name, res_err, 1e-10)

            gaps = variance_gaps(pop, pooled, per)
            N = d.N
            check("variance-ordering", fx.name, max(0.0, N * (per.sigma2 - pooled.sigma2)), 1e-10)
            check("interaction-gap", fx.name,
                  abs(N * (pooled.sigma2 - per.sigma2) - gaps.gap_ols_olsint), 1e-10)
            if fx.equal_p:
                check("adjustment-gap", fx.name,
                      abs(N * (pm.sigma2_unadj - pooled.sigma2) - gaps.gap_unadj_ols), 1e-10)

            a = sample_assignment(d, 12345)
            ds = pop.observe(a.z)
            try:
                eq_err = abs(estimate_ols(ds).tau_hat - estimate_ols_design_matrix(ds))
            except StratAdjError:
                eq_err = math.inf
            check("estimator-equivalence", fx.name, eq_err, 1e-8)
    return results
