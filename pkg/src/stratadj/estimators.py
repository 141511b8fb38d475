"""Average-treatment-effect estimators, conservative variances, intervals.

Three point estimators share the same report shape:

* ``unadj``    stratified difference in means;
* ``ols``      pooled regression adjustment (one slope vector per arm,
               fitted by weighted least squares across strata);
* ``ols_int``  stratum-by-stratum regression adjustment (own slopes per
               stratum and arm).

Every variance estimator here is conservative: its randomization expectation
is at least the true variance of the point estimator, so the reported
intervals cover at no less than the nominal rate in large samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import ndtri

from .core import (
    ExperimentDesign,
    ObservedDataset,
    arm_covariate_means,
    arm_outcome_moments,
    grouped_sums,
    stratum_means,
)
from .errors import ArmTooSmall, InvalidAlpha, MethodInapplicable, RankDeficient

METHODS = ("unadj", "ols", "ols_int")


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate, conservative variance, and confidence interval.

    ``var_hat``/``se``/``ci`` are None when the design cannot support the
    variance estimator (some arm has fewer than two units); the point
    estimate is still reported.
    """

    method: str
    tau_hat: float
    var_hat: float | None
    se: float | None
    ci: tuple[float, float] | None
    alpha: float
    per_stratum: tuple[float, ...]
    beta_hats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class WlsProblem:
    """Weighted least-squares input: response, regressors, nonnegative weights."""

    response: np.ndarray
    regressors: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if not (w > 0).any():
            raise ValueError("need at least one strictly positive weight")


def wls_solve(problem: WlsProblem) -> np.ndarray:
    """Minimize sum of w * (response - regressors @ beta)^2.

    Solved by column-pivoted QR on the sqrt-weight-scaled rows (never the
    normal equations). Raises RankDeficient with the dependent column indices
    when the pivoted rank falls short.
    """
    K = problem.regressors.shape[1]
    if K == 0:
        return np.zeros(0)
    sw = np.sqrt(problem.weights)
    A = problem.regressors * sw[:, None]
    b = problem.response * sw
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(np.float64).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.count_nonzero(diag > tol))
    if rank < K:
        dependent = tuple(sorted(int(j) for j in piv[rank:]))
        raise RankDeficient(
            f"regressor matrix has rank {rank} < {K}; dependent columns {list(dependent)}",
            dependent,
        )
    beta = np.empty(K)
    beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ b)
    return beta


def normal_upper_quantile(prob: float) -> float:
    """Upper-tail standard normal quantile, accurate to ~1e-15."""
    return float(ndtri(1.0 - prob))


def confidence_interval(tau_hat: float, var_hat: float, alpha: float) -> tuple[float, float]:
    """Two-sided normal interval tau_hat +/- q_{alpha/2} * sqrt(var_hat)."""
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}")
    if var_hat < 0:
        raise ValueError(f"variance must be nonnegative, got {var_hat}")
    half = normal_upper_quantile(alpha / 2.0) * math.sqrt(var_hat)
    return (tau_hat - half, tau_hat + half)


# ---------------------------------------------------------------------------
# Arm views: rows of one arm, centered at stratum-arm sample means.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ArmView:
    arm: int
    counts: np.ndarray      # per-stratum units in this arm
    starts: np.ndarray      # segment offsets into the arm-only arrays
    y_mean: np.ndarray      # per-stratum arm outcome means
    x_mean: np.ndarray      # per-stratum arm covariate means, (B, K)
    y_centered: np.ndarray  # arm rows, outcome minus its stratum-arm mean
    x_centered: np.ndarray  # arm rows, covariates minus stratum-arm means


def _arm_view(dataset: ObservedDataset, arm: int) -> _ArmView:
    d = dataset.design
    mask = dataset.z == arm
    counts = d.n1s if arm == 1 else d.n0s
    moments = arm_outcome_moments(d, dataset.z, dataset.y)
    y_mean = moments.mean1 if arm == 1 else moments.mean0
    if dataset.K:
        xm1, xm0 = arm_covariate_means(d, dataset.z, dataset.X)
        x_mean = xm1 if arm == 1 else xm0
        x_centered = (dataset.X - np.repeat(x_mean, d.ns, axis=0))[mask]
    else:
        x_mean = np.zeros((d.B, 0))
        x_centered = np.zeros((int(counts.sum()), 0))
    y_centered = (dataset.y - np.repeat(y_mean, d.ns))[mask]
    starts = np.zeros(d.B, dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    return _ArmView(arm, counts, starts, y_mean, x_mean, y_centered, x_centered)


def _require_arm_counts(dataset: ObservedDataset, arm: int, minimum: int) -> None:
    counts = dataset.design.n1s if arm == 1 else dataset.design.n0s
    short = np.nonzero(counts < minimum)[0]
    if short.size:
        raise ArmTooSmall(
            f"stratum {int(short[0]) + 1}: arm {arm} has {int(counts[short[0]])} units, "
            f"needs at least {minimum}"
        )


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------

def estimate_unadjusted(dataset: ObservedDataset, alpha: float = 0.05) -> EstimateReport:
    """Stratified difference-in-means with its Neyman-style variance.

    tau_hat = sum_i c_i (mean_treated_i - mean_control_i); the variance
    estimator sum_i c_i^2 (s2_i1/n1_i + s2_i0/n0_i) needs two units per arm
    in every stratum, otherwise var/se/ci come back as None.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}")
    d = dataset.design
    m = arm_outcome_moments(d, dataset.z, dataset.y)
    tau_i = m.mean1 - m.mean0
    tau_hat = math.fsum(d.c * tau_i)
    var_hat = se = ci = None
    if (d.n1s >= 2).all() and (d.n0s >= 2).all():
        var_hat = math.fsum(d.c * d.c * (m.var1 / d.n1s + m.var0 / d.n0s))
        se = math.sqrt(var_hat)
        ci = confidence_interval(tau_hat, var_hat, alpha)
    return EstimateReport("unadj", tau_hat, var_hat, se, ci, alpha, tuple(map(float, tau_i)))


def _pooled_beta(design: ExperimentDesign, view: _ArmView) -> np.ndarray:
    weights = np.repeat(design.c / (view.counts - 1.0), view.counts)
    return wls_solve(WlsProblem(view.y_centered, view.x_centered, weights))


def fit_pooled_wls(dataset: ObservedDataset, arm: int) -> np.ndarray:
    """Common adjustment slopes for one arm, pooled across strata.

    Weighted least squares of arm-mean-centered outcomes on arm-mean-centered
    covariates, stratum rows weighted by c_i / (count_i - 1).
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if dataset.K == 0:
        raise MethodInapplicable("regression adjustment needs at least one covariate")
    _require_arm_counts(dataset, arm, 2)
    return _pooled_beta(dataset.design, _arm_view(dataset, arm))


def _arm_residual_var(view: _ArmView, beta_by_stratum: np.ndarray, divisors: np.ndarray) -> np.ndarray:
    """Per-stratum mean squared residual of the arm fit, given per-stratum betas."""
    fitted = np.einsum("ij,ij->i", view.x_centered, np.repeat(beta_by_stratum, view.counts, axis=0))
    r = view.y_centered - fitted
    return grouped_sums(r * r, view.starts) / divisors


def estimate_ols(dataset: ObservedDataset, alpha: float = 0.05) -> EstimateReport:
    """Regression-adjusted estimator with pooled (common) slopes per arm.

    Each stratum's arm mean is shifted by the fitted slopes times the gap
    between the arm's covariate mean and the full-stratum covariate mean; the
    variance uses within-arm residual sample variances.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}")
    if dataset.K == 0:
        raise MethodInapplicable("regression adjustment needs at least one covariate")
    _require_arm_counts(dataset, 1, 2)
    _require_arm_counts(dataset, 0, 2)
    d = dataset.design
    v1 = _arm_view(dataset, 1)
    v0 = _arm_view(dataset, 0)
    beta1 = _pooled_beta(d, v1)
    beta0 = _pooled_beta(d, v0)
    xbar = stratum_means(dataset.X, d)
    adj1 = (v1.x_mean - xbar) @ beta1
    adj0 = (v0.x_mean - xbar) @ beta0
    tau_i = (v1.y_mean - adj1) - (v0.y_mean - adj0)
    tau_hat = math.fsum(d.c * tau_i)

    b1 = np.broadcast_to(beta1, (d.B, dataset.K))
    b0 = np.broadcast_to(beta0, (d.B, dataset.K))
    s2e1 = _arm_residual_var(v1, b1, v1.counts - 1.0)
    s2e0 = _arm_residual_var(v0, b0, v0.counts - 1.0)
    var_hat = math.fsum(d.c * d.c * (s2e1 / d.n1s + s2e0 / d.n0s))
    return EstimateReport(
        "ols",
        tau_hat,
        var_hat,
        math.sqrt(var_hat),
        confidence_interval(tau_hat, var_hat, alpha),
        alpha,
        tuple(map(float, tau_i)),
        {"beta1": beta1, "beta0": beta0},
    )


def estimate_ols_design_matrix(dataset: ObservedDataset) -> float:
    """Adjusted effect via one big interacted regression; verification path only.

    Regresses row-weighted outcomes on the weighted intercept, weighted
    treatment indicator, centered stratum dummies, centered covariates, and
    all treatment interactions; rows carry weights
    sqrt(n_i / (count_in_own_arm - 1)). The coefficient on the weighted
    treatment column reproduces estimate_ols's point estimate, which is the
    cheaper two-regression construction of the same fit.
    """
    if dataset.K == 0:
        raise MethodInapplicable("regression adjustment needs at least one covariate")
    _require_arm_counts(dataset, 1, 2)
    _require_arm_counts(dataset, 0, 2)
    d = dataset.design
    z = dataset.z.astype(np.float64)
    w1 = np.sqrt(d.ns / (d.n1s - 1.0))
    w0 = np.sqrt(d.ns / (d.n0s - 1.0))
    w = z * np.repeat(w1, d.ns) + (1.0 - z) * np.repeat(w0, d.ns)

    xbar = stratum_means(dataset.X, d)
    xc = dataset.X - np.repeat(xbar, d.ns, axis=0)
    xw = xc * w[:, None]

    cols = [w, z * w]
    stratum_of_row = np.repeat(np.arange(d.B), d.ns)
    for k in range(1, d.B):  # dummies for strata 2..B, centered at c_k
        bk = ((stratum_of_row == k).astype(np.float64) - d.c[k]) * w
        cols.append(bk)
        cols.append(z * bk)
    A = np.column_stack(cols + [xw, z[:, None] * xw])
    beta = wls_solve(WlsProblem(dataset.y * w, A, np.ones(d.N)))
    return float(beta[1])


def fit_stratum_ols(dataset: ObservedDataset, stratum: int, arm: int) -> np.ndarray:
    """Adjustment slopes for one stratum-arm by ordinary least squares.

    ``stratum`` is the 0-based position in the design. Needs at least K + 2
    units in the arm (fit plus one residual degree of freedom).
    """
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    if not 0 <= stratum < dataset.design.B:
        raise IndexError(f"stratum index {stratum} out of range")
    if dataset.K == 0:
        raise MethodInapplicable("regression adjustment needs at least one covariate")
    view = _arm_view(dataset, arm)
    cnt = int(view.counts[stratum])
    if cnt < dataset.K + 2:
        raise ArmTooSmall(
            f"stratum {stratum + 1}: arm {arm} has {cnt} units, needs at least K + 2 = {dataset.K + 2}"
        )
    lo = int(view.starts[stratum])
    return wls_solve(
        WlsProblem(
            view.y_centered[lo: lo + cnt],
            view.x_centered[lo: lo + cnt],
            np.ones(cnt),
        )
    )


def estimate_ols_int(
    dataset: ObservedDataset, alpha: float = 0.05, df_divisor: str = "arm"
) -> EstimateReport:
    """Regression-adjusted estimator with stratum-specific slopes.

    Every stratum-arm gets its own least-squares slopes; residual variances
    are degree-of-freedom adjusted. ``df_divisor`` picks the adjustment base:
    "arm" (default) divides each arm's residual sum of squares by
    count_in_arm - K - 1; "stratum" divides by n_i - K - 1, a compatibility
    variant that deflates the estimate when arms are unbalanced.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must be in (0, 1), got {alpha}")
    if df_divisor not in ("arm", "stratum"):
        raise ValueError(f"df_divisor must be 'arm' or 'stratum', got {df_divisor!r}")
    if dataset.K == 0:
        raise MethodInapplicable("regression adjustment needs at least one covariate")
    d = dataset.design
    K = dataset.K
    for i, st in enumerate(d.strata):
        if st.n1 <= K + 1 or st.n0 <= K + 1:
            raise ArmTooSmall(
                f"stratum {i + 1}: arm sizes ({st.n1}, {st.n0}) must exceed K + 1 = {K + 1}"
            )
    v1 = _arm_view(dataset, 1)
    v0 = _arm_view(dataset, 0)
    beta1 = np.empty((d.B, K))
    beta0 = np.empty((d.B, K))
    for i in range(d.B):
        for view, betas in ((v1, beta1), (v0, beta0)):
            lo = int(view.starts[i])
            cnt = int(view.counts[i])
            betas[i] = wls_solve(
                WlsProblem(
                    view.y_centered[lo: lo + cnt],
                    view.x_centered[lo: lo + cnt],
                    np.ones(cnt),
                )
            )
    xbar = stratum_means(dataset.X, d)
    adj1 = np.einsum("ij,ij->i", v1.x_mean - xbar, beta1)
    adj0 = np.einsum("ij,ij->i", v0.x_mean - xbar, beta0)
    tau_i = (v1.y_mean - adj1) - (v0.y_mean - adj0)
    tau_hat = math.fsum(d.c * tau_i)

    if df_divisor == "arm":
        div1 = v1.counts - K - 1.0
        div0 = v0.counts - K - 1.0
    else:
        div1 = div0 = d.ns - K - 1.0
    s2eta1 = _arm_residual_var(v1, beta1, div1)
    s2eta0 = _arm_residual_var(v0, beta0, div0)
    var_hat = math.fsum(d.c * d.c * (s2eta1 / d.n1s + s2eta0 / d.n0s))
    return EstimateReport(
        "ols_int",
        tau_hat,
        var_hat,
        math.sqrt(var_hat),
        confidence_interval(tau_hat, var_hat, alpha),
        alpha,
        tuple(map(float, tau_i)),
        {"beta1": [beta1[i] for i in range(d.B)], "beta0": [beta0[i] for i in range(d.B)]},
    )


def estimate(dataset: ObservedDataset, method: str, alpha: float = 0.05,
             df_divisor: str = "arm") -> EstimateReport:
    """Dispatch to one of the three estimators by name."""
    if method == "unadj":
        return estimate_unadjusted(dataset, alpha)
    if method == "ols":
        return estimate_ols(dataset, alpha)
    if method == "ols_int":
        return estimate_ols_int(dataset, alpha, df_divisor=df_divisor)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
