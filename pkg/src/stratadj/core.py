"""Domain model for stratified randomized experiments.

Units live in strata; within each stratum a fixed number of units receives
treatment. Potential outcomes and covariates are fixed quantities, so every
type here is immutable after construction and all operations are pure
functions. Rows are stored grouped by stratum (first-appearance order), which
lets the per-stratum statistics run as vectorized segment reductions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateVariance,
    DimensionMismatch,
    EmptyStratumArm,
    NonFinite,
)


@dataclass(frozen=True)
class StratumDesign:
    """Size and treated count of a single stratum.

    ``id`` is the 1-based position of the stratum in the design.
    """

    id: int
    n: int
    n1: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"stratum {self.id}: need at least 2 units, got n={self.n}")
        if not 1 <= self.n1 <= self.n - 1:
            raise EmptyStratumArm(
                f"stratum {self.id}: treated count {self.n1} of {self.n} leaves an empty arm"
            )

    @property
    def n0(self) -> int:
        return self.n - self.n1


@dataclass(frozen=True)
class ExperimentDesign:
    """Stratum sizes and treated counts, plus the derived weights.

    Derived quantities: ``N`` total units, ``c`` stratum weights ``n_i/N``
    (summing to 1 within 1e-12), ``p`` treated proportions in (0, 1), and
    ``starts`` offsets of each stratum's row block.
    """

    strata: tuple[StratumDesign, ...]

    def __post_init__(self) -> None:
        strata = tuple(self.strata)
        if not strata:
            raise ValueError("design needs at least one stratum")
        object.__setattr__(self, "strata", strata)
        ns = np.array([s.n for s in strata], dtype=np.int64)
        n1s = np.array([s.n1 for s in strata], dtype=np.int64)
        starts = np.zeros(len(strata) + 1, dtype=np.int64)
        np.cumsum(ns, out=starts[1:])
        for arr in (ns, n1s, starts):
            arr.flags.writeable = False
        object.__setattr__(self, "ns", ns)
        object.__setattr__(self, "n1s", n1s)
        object.__setattr__(self, "n0s", ns - n1s)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "N", int(starts[-1]))
        c = ns / self.N
        p = n1s / ns
        c.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "p", p)

    @classmethod
    def from_counts(cls, ns: Sequence[int], n1s: Sequence[int]) -> "ExperimentDesign":
        if len(ns) != len(n1s):
            raise ValueError("ns and n1s must have equal length")
        return cls(tuple(StratumDesign(i + 1, int(n), int(n1)) for i, (n, n1) in enumerate(zip(ns, n1s))))

    @property
    def B(self) -> int:
        return len(self.strata)


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Population:
    """Complete potential-outcome table: both outcomes and covariates for every unit.

    Used by the oracle and the simulation harness; never observable in a real
    experiment. Arrays are grouped by stratum following ``design.starts``.
    """

    design: ExperimentDesign
    y1: np.ndarray
    y0: np.ndarray
    X: np.ndarray

    def __post_init__(self) -> None:
        N = self.design.N
        y1 = _freeze(self.y1)
        y0 = _freeze(self.y0)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(N, -1) if X.size else X.reshape(N, 0)
        X = _freeze(X)
        if y1.shape != (N,) or y0.shape != (N,):
            raise DimensionMismatch(f"potential outcomes must have length N={N}")
        if X.shape[0] != N or X.ndim != 2:
            raise DimensionMismatch(f"covariate matrix must be N x K with N={N}")
        for name, arr in (("y1", y1), ("y0", y0), ("X", X)):
            if not np.isfinite(arr).all():
                raise NonFinite(f"{name} contains NaN or infinite values")
        object.__setattr__(self, "y1", y1)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "X", X)

    @property
    def K(self) -> int:
        return self.X.shape[1]

    def observe(self, z: np.ndarray) -> "ObservedDataset":
        """Reveal the outcomes selected by assignment vector ``z``."""
        z = np.asarray(z)
        y = np.where(z == 1, self.y1, self.y0)
        return ObservedDataset(self.design, z, y, self.X)


@dataclass(frozen=True)
class ObservedDataset:
    """One realized experiment: assignment, observed outcomes, covariates."""

    design: ExperimentDesign
    z: np.ndarray
    y: np.ndarray
    X: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        d = self.design
        z = np.ascontiguousarray(self.z, dtype=np.int8)
        y = _freeze(self.y)
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(d.N, -1) if X.size else X.reshape(d.N, 0)
        X = _freeze(X)
        if z.shape != (d.N,) or y.shape != (d.N,):
            raise DimensionMismatch(f"z and y must have length N={d.N}")
        if X.shape[0] != d.N:
            raise DimensionMismatch("covariate matrix row count does not match N")
        if not np.isin(z, (0, 1)).all():
            raise ValueError("z must be binary")
        treated = np.add.reduceat(z.astype(np.int64), d.starts[:-1])
        if not np.array_equal(treated, d.n1s):
            bad = int(np.nonzero(treated != d.n1s)[0][0]) + 1
            raise ValueError(f"stratum {bad}: treated count {treated[bad - 1]} != design n1 {d.n1s[bad - 1]}")
        if not (np.isfinite(y).all() and np.isfinite(X).all()):
            raise NonFinite("observed outcomes/covariates contain NaN or infinite values")
        z.flags.writeable = False
        labels = tuple(self.labels) if self.labels else tuple(str(s.id) for s in d.strata)
        if len(labels) != d.B:
            raise DimensionMismatch("one label per stratum required")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class StratumSummary:
    """Per-arm sample moments for one stratum.

    Variance/covariance fields are ``None`` (an explicit undefined marker,
    never 0 or NaN) whenever the arm has fewer than two units, so downstream
    variance estimators can fail loudly instead of silently.
    """

    stratum: int
    n: int
    n1: int
    mean1: float
    mean0: float
    var1: float | None
    var0: float | None
    x_mean1: np.ndarray
    x_mean0: np.ndarray
    x_cov1: np.ndarray | None
    x_cov0: np.ndarray | None
    xy_cov1: np.ndarray | None
    xy_cov0: np.ndarray | None
    x_mean: np.ndarray

    @property
    def n0(self) -> int:
        return self.n - self.n1


@dataclass(frozen=True)
class ConditionDiagnostics:
    """Finite-population regularity diagnostics.

    ``m1n``/``m0n`` are the maximum weighted squared distances of each
    potential outcome from its stratum mean, normalized by the weighted
    between-unit variance of the corresponding arm; dividing by N and checking
    smallness is the practical normality diagnostic. ``max_sq_dist_*`` are the
    raw maximum squared distances divided by N.
    """

    m1n: float
    m0n: float
    max_sq_dist_y1: float
    max_sq_dist_y0: float
    max_sq_dist_x: np.ndarray
    p_range: tuple[float, float]


# ---------------------------------------------------------------------------
# Vectorized per-stratum statistics (segment reductions over the row blocks).
# Exact two-pass mean/variance; cross-stratum aggregation elsewhere uses
# math.fsum so enumeration identities hold to 1e-12.
# ---------------------------------------------------------------------------

def grouped_sums(values: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Sum ``values`` within each stratum block. ``starts`` excludes the final offset."""
    return np.add.reduceat(values, starts, axis=0)


def stratum_means(values: np.ndarray, design: ExperimentDesign) -> np.ndarray:
    s = grouped_sums(values, design.starts[:-1])
    if values.ndim == 1:
        return s / design.ns
    return s / design.ns[:, None]


def stratum_variances(values: np.ndarray, design: ExperimentDesign) -> np.ndarray:
    """Per-stratum variances with n_i - 1 divisors (two-pass)."""
    means = stratum_means(values, design)
    centered = values - np.repeat(means, design.ns, axis=0)
    ss = grouped_sums(centered * centered, design.starts[:-1])
    return ss / (design.ns - 1)


@dataclass(frozen=True)
class ArmMoments:
    """Arm-specific per-stratum outcome moments. NaN marks arm counts < 2."""

    mean1: np.ndarray
    mean0: np.ndarray
    var1: np.ndarray
    var0: np.ndarray


def arm_outcome_moments(design: ExperimentDesign, z: np.ndarray, y: np.ndarray) -> ArmMoments:
    """Sample means and (count - 1)-divisor variances of ``y`` per stratum and arm."""
    starts = design.starts[:-1]
    zf = z.astype(np.float64)
    n1 = design.n1s
    n0 = design.n0s
    sum1 = grouped_sums(zf * y, starts)
    sum0 = grouped_sums(y, starts) - sum1
    mean1 = sum1 / n1
    mean0 = sum0 / n0
    d1 = (y - np.repeat(mean1, design.ns)) * zf
    d0 = (y - np.repeat(mean0, design.ns)) * (1.0 - zf)
    ss1 = grouped_sums(d1 * d1, starts)
    ss0 = grouped_sums(d0 * d0, starts)
    with np.errstate(divide="ignore", invalid="ignore"):
        var1 = np.where(n1 >= 2, ss1 / np.maximum(n1 - 1, 1), np.nan)
        var0 = np.where(n0 >= 2, ss0 / np.maximum(n0 - 1, 1), np.nan)
    return ArmMoments(mean1, mean0, var1, var0)


def arm_covariate_means(design: ExperimentDesign, z: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-stratum covariate sample means of each arm, shape (B, K)."""
    starts = design.starts[:-1]
    zf = z.astype(np.float64)[:, None]
    sum1 = grouped_sums(zf * X, starts)
    sum0 = grouped_sums(X, starts) - sum1
    return sum1 / design.n1s[:, None], sum0 / design.n0s[:, None]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def validate_dataset(rows: Iterable[tuple]) -> ObservedDataset:
    """Build an ObservedDataset from raw (label, z, y, x-vector) rows.

    Strata are indexed in first-appearance order of their labels; the design
    is inferred (n_i = row count, n1_i = treated count). Raises
    EmptyStratumArm, DimensionMismatch, or NonFinite on invalid input.
    """
    by_label: dict[str, list[tuple[int, float, tuple[float, ...]]]] = {}
    order: list[str] = []
    dim: int | None = None
    for row in rows:
        try:
            label, z, y, x = row
        except (TypeError, ValueError) as exc:
            raise DimensionMismatch(f"row {row!r} is not (stratum, z, y, x-vector)") from exc
        label = str(label)
        zi = int(z)
        if zi not in (0, 1):
            raise ValueError(f"stratum {label}: z must be 0 or 1, got {z!r}")
        xvec = tuple(float(v) for v in x)
        if dim is None:
            dim = len(xvec)
        elif len(xvec) != dim:
            raise DimensionMismatch(
                f"stratum {label}: covariate row has {len(xvec)} entries, expected {dim}"
            )
        yv = float(y)
        if not math.isfinite(yv) or not all(math.isfinite(v) for v in xvec):
            raise NonFinite(f"stratum {label}: non-finite outcome or covariate")
        if label not in by_label:
            by_label[label] = []
            order.append(label)
        by_label[label].append((zi, yv, xvec))
    if not order:
        raise ValueError("no rows provided")

    strata = []
    for i, label in enumerate(order):
        group = by_label[label]
        n = len(group)
        n1 = sum(r[0] for r in group)
        if n1 == 0 or n1 == n:
            raise EmptyStratumArm(f"stratum {label}: all units in one arm (n={n}, treated={n1})")
        strata.append(StratumDesign(i + 1, n, n1))
    design = ExperimentDesign(tuple(strata))

    z = np.empty(design.N, dtype=np.int8)
    y = np.empty(design.N, dtype=np.float64)
    X = np.empty((design.N, dim or 0), dtype=np.float64)
    pos = 0
    for label in order:
        for zi, yv, xvec in by_label[label]:
            z[pos] = zi
            y[pos] = yv
            X[pos, :] = xvec
            pos += 1
    return ObservedDataset(design, z, y, X, labels=tuple(order))


def stratum_summaries(dataset: ObservedDataset) -> list[StratumSummary]:
    """Per-stratum, per-arm sample moments of outcomes and covariates."""
    d = dataset.design
    moments = arm_outcome_moments(d, dataset.z, dataset.y)
    xm1, xm0 = arm_covariate_means(d, dataset.z, dataset.X)
    x_full = stratum_means(dataset.X, d) if dataset.K else np.zeros((d.B, 0))
    out = []
    for i, st in enumerate(d.strata):
        lo, hi = d.starts[i], d.starts[i + 1]
        zi = dataset.z[lo:hi].astype(bool)
        cov1 = cov0 = xy1 = xy0 = None
        if dataset.K:
            X1 = dataset.X[lo:hi][zi] - xm1[i]
            X0 = dataset.X[lo:hi][~zi] - xm0[i]
            y1c = dataset.y[lo:hi][zi] - moments.mean1[i]
            y0c = dataset.y[lo:hi][~zi] - moments.mean0[i]
            if st.n1 >= 2:
                cov1 = X1.T @ X1 / (st.n1 - 1)
                xy1 = X1.T @ y1c / (st.n1 - 1)
            if st.n0 >= 2:
                cov0 = X0.T @ X0 / (st.n0 - 1)
                xy0 = X0.T @ y0c / (st.n0 - 1)
        elif st.n1 >= 2 or st.n0 >= 2:
            empty = np.zeros((0, 0)), np.zeros(0)
            cov1, xy1 = (empty if st.n1 >= 2 else (None, None))
            cov0, xy0 = (empty if st.n0 >= 2 else (None, None))
        out.append(
            StratumSummary(
                stratum=st.id,
                n=st.n,
                n1=st.n1,
                mean1=float(moments.mean1[i]),
                mean0=float(moments.mean0[i]),
                var1=float(moments.var1[i]) if st.n1 >= 2 else None,
                var0=float(moments.var0[i]) if st.n0 >= 2 else None,
                x_mean1=xm1[i],
                x_mean0=xm0[i],
                x_cov1=cov1,
                x_cov0=cov0,
                xy_cov1=xy1,
                xy_cov0=xy0,
                x_mean=x_full[i],
            )
        )
    return out


def condition_diagnostics(population: Population) -> ConditionDiagnostics:
    """Regularity diagnostics of a potential-outcome population.

    Raises DegenerateVariance when an arm's weighted variance denominator is
    exactly zero (every stratum constant in that potential outcome).
    """
    d = population.design
    N = d.N

    def _arm(y: np.ndarray, p_weight: np.ndarray, ratio: np.ndarray, arm: str) -> tuple[float, float]:
        means = stratum_means(y, d)
        centered = y - np.repeat(means, d.ns)
        sq = centered * centered
        max_sq = np.maximum.reduceat(sq, d.starts[:-1])
        s2 = grouped_sums(sq, d.starts[:-1]) / (d.ns - 1)
        denom = math.fsum(d.c * s2 * ratio)
        if denom == 0.0:
            raise DegenerateVariance(f"every stratum is constant in y({arm})")
        m = float(np.max(max_sq / (p_weight * p_weight) / denom))
        return m, float(np.max(max_sq)) / N

    m1n, dist_y1 = _arm(population.y1, d.p, d.n0s / d.n1s, "1")
    m0n, dist_y0 = _arm(population.y0, 1.0 - d.p, d.n1s / d.n0s, "0")

    if population.K:
        xm = stratum_means(population.X, d)
        xc = population.X - np.repeat(xm, d.ns, axis=0)
        dist_x = np.max(xc * xc, axis=0) / N
    else:
        dist_x = np.zeros(0)
    return ConditionDiagnostics(
        m1n=m1n,
        m0n=m0n,
        max_sq_dist_y1=dist_y1,
        max_sq_dist_y0=dist_y0,
        max_sq_dist_x=dist_x,
        p_range=(float(d.p.min()), float(d.p.max())),
    )
