"""Monte Carlo harness: scenario populations, replication engine, metrics.

A population (covariates, coefficients, potential outcomes) is generated once
from the master seed and kept fixed; each replication draws a fresh
assignment from a stream keyed by (master_seed, replication index), so
results are identical for any worker count. Operating characteristics are
reported with bootstrap standard errors from resampling the per-replication
records.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .core import ExperimentDesign, Population
from .errors import InputError, MethodInapplicable
from .estimators import METHODS, estimate
from .oracle import population_moments, sigma_for_method
from .randomization import sample_assignment, substream

# substream domains under the master seed
_POPULATION_DOMAIN = 0
_REPLICATION_DOMAIN = 1
_BOOTSTRAP_DOMAIN = 2

SCENARIOS = ("1", "2", "3", "4", "custom")


@dataclass(frozen=True)
class ScenarioConfig:
    """Simulation settings; scenario presets pin sizes, K, and coefficients.

    Presets: "1" many small strata (B strata of 10, K=10, shared
    coefficients); "2" two large homogeneous strata of ``size``; "3" two
    large strata with independently drawn per-stratum coefficients; "4" two
    heterogeneous strata of 100 plus B small shared-coefficient strata of 10
    with K=3. "custom" takes ``stratum_sizes``/``K``/``coef_scheme``
    directly. Half of each stratum is treated (floor for odd sizes).
    """

    scenario: str = "1"
    rho: float = 0.0
    B: int | None = None
    size: int | None = None
    stratum_sizes: tuple[int, ...] | None = None
    K: int | None = None
    reps: int = 2000
    alpha: float = 0.05
    master_seed: int = 20240
    boot_reps: int = 500
    methods: tuple[str, ...] | None = None
    coef_scheme: str | None = None
    noise_variance: float | None = None
    df_divisor: str = "arm"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        kwargs = dict(data)
        for name in ("stratum_sizes", "methods"):
            if kwargs.get(name) is not None:
                kwargs[name] = tuple(kwargs[name])
        if "scenario" in kwargs:
            kwargs["scenario"] = str(kwargs["scenario"])
        return cls(**kwargs)


def resolve_config(config: ScenarioConfig) -> ScenarioConfig:
    """Fill scenario-dependent defaults and validate; idempotent."""
    cfg = config
    if cfg.scenario not in SCENARIOS:
        raise InputError(f"scenario must be one of {SCENARIOS}, got {cfg.scenario!r}")
    if not 0.0 <= cfg.rho < 1.0:
        raise InputError(f"rho must be in [0, 1), got {cfg.rho}")
    if not 0.0 < cfg.alpha < 1.0:
        raise InputError(f"alpha must be in (0, 1), got {cfg.alpha}")
    if cfg.reps < 1 or cfg.boot_reps < 1:
        raise InputError("reps and boot_reps must be positive")
    if cfg.df_divisor not in ("arm", "stratum"):
        raise InputError(f"df_divisor must be 'arm' or 'stratum', got {cfg.df_divisor!r}")

    if cfg.scenario == "1":
        B = cfg.B if cfg.B is not None else 25
        sizes = cfg.stratum_sizes or (10,) * B
        K = cfg.K if cfg.K is not None else 10
        methods = cfg.methods or ("unadj", "ols")
        scheme = cfg.coef_scheme or "shared"
    elif cfg.scenario in ("2", "3"):
        size = cfg.size if cfg.size is not None else 100
        sizes = cfg.stratum_sizes or (size, size)
        K = cfg.K if cfg.K is not None else 10
        methods = cfg.methods or METHODS
        scheme = cfg.coef_scheme or ("shared" if cfg.scenario == "2" else "per-stratum")
    elif cfg.scenario == "4":
        B = cfg.B if cfg.B is not None else 25
        sizes = cfg.stratum_sizes or ((100, 100) + (10,) * B)
        K = cfg.K if cfg.K is not None else 3
        methods = cfg.methods or METHODS
        scheme = cfg.coef_scheme or "mixed"
    else:
        if not cfg.stratum_sizes:
            raise InputError("custom scenario requires stratum_sizes")
        if cfg.K is None:
            raise InputError("custom scenario requires K")
        sizes = tuple(cfg.stratum_sizes)
        K = cfg.K
        methods = cfg.methods or METHODS
        scheme = cfg.coef_scheme or "shared"

    if scheme not in ("shared", "per-stratum", "mixed"):
        raise InputError(f"coef_scheme must be shared/per-stratum/mixed, got {scheme!r}")
    if any(n < 4 for n in sizes):
        raise InputError("every stratum needs at least 4 units so both arms have two")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InputError(f"unknown methods {bad}; choose from {list(METHODS)}")
    return replace(
        config,
        stratum_sizes=tuple(int(n) for n in sizes),
        B=len(sizes),
        K=int(K),
        methods=tuple(methods),
        coef_scheme=scheme,
    )


def _design_from_sizes(sizes: tuple[int, ...]) -> ExperimentDesign:
    return ExperimentDesign.from_counts(list(sizes), [n // 2 for n in sizes])


def _coef_groups(cfg: ScenarioConfig) -> tuple[int, ...]:
    B = len(cfg.stratum_sizes)
    if cfg.coef_scheme == "shared":
        return (0,) * B
    if cfg.coef_scheme == "per-stratum":
        return tuple(range(B))
    # mixed: own coefficients for the large leading strata, shared for the rest
    groups = []
    next_group = 0
    for n in cfg.stratum_sizes:
        if n >= 100:
            groups.append(next_group)
            next_group += 1
        else:
            groups.append(-1)
    shared = next_group
    return tuple(g if g >= 0 else shared for g in groups)


def _t3(rng: np.random.Generator, size: int) -> np.ndarray:
    # t with 3 degrees of freedom as normal / sqrt(chi2_3 / 3)
    return rng.standard_normal(size) / np.sqrt(rng.chisquare(3.0, size) / 3.0)


def _draw_coefficients(rng: np.random.Generator, K: int) -> tuple[np.ndarray, ...]:
    b11 = _t3(rng, K)
    b12 = 0.1 * _t3(rng, K)
    b01 = b11 + _t3(rng, K)
    b02 = b12 + 0.1 * _t3(rng, K)
    return b11, b12, b01, b02


def covariate_covariance(rho: float, K: int) -> np.ndarray:
    """Correlation matrix with entries rho^|k - l|."""
    idx = np.arange(K)
    return rho ** np.abs(idx[:, None] - idx[None, :]) if K else np.zeros((0, 0))


def generate_population(config: ScenarioConfig, seed: int | None = None) -> Population:
    """Draw and freeze one scenario population.

    Covariates are multivariate normal via the lower-triangular factor of the
    rho^|k-l| correlation matrix; signal means are X @ b_lin + exp(X @ b_exp)
    per arm; noise is normal with variance set so the signal-to-noise ratio
    is one (half the pooled across-arm signal variance), unless
    ``noise_variance`` overrides it.
    """
    cfg = resolve_config(config)
    base = cfg.master_seed if seed is None else seed
    design = _design_from_sizes(cfg.stratum_sizes)
    K = cfg.K
    rng_x = substream(base, _POPULATION_DOMAIN, 0)
    rng_coef = substream(base, _POPULATION_DOMAIN, 1)
    rng_noise = substream(base, _POPULATION_DOMAIN, 2)

    if K:
        L = np.linalg.cholesky(covariate_covariance(cfg.rho, K))
        X = rng_x.standard_normal((design.N, K)) @ L.T
    else:
        X = np.zeros((design.N, 0))

    groups = _coef_groups(cfg)
    coef_sets = [_draw_coefficients(rng_coef, K) for _ in range(max(groups) + 1)]
    m1 = np.empty(design.N)
    m0 = np.empty(design.N)
    for i in range(design.B):
        lo, hi = design.starts[i], design.starts[i + 1]
        b11, b12, b01, b02 = coef_sets[groups[i]]
        Xi = X[lo:hi]
        m1[lo:hi] = Xi @ b11 + np.exp(Xi @ b12)
        m0[lo:hi] = Xi @ b01 + np.exp(Xi @ b02)

    if cfg.noise_variance is not None:
        sigma2 = float(cfg.noise_variance)
    else:
        sigma2 = 0.5 * (float(np.var(m1, ddof=1)) + float(np.var(m0, ddof=1)))
    sigma = math.sqrt(sigma2)
    y1 = m1 + sigma * rng_noise.standard_normal(design.N)
    y0 = m0 + sigma * rng_noise.standard_normal(design.N)
    return Population(design, y1, y0, X)


# ---------------------------------------------------------------------------
# Replication engine
# ---------------------------------------------------------------------------

def method_applicability(cfg: ScenarioConfig) -> dict[str, str | None]:
    """Reason each requested method cannot run, or None when it can."""
    cfg = resolve_config(cfg)
    design = _design_from_sizes(cfg.stratum_sizes)
    out: dict[str, str | None] = {}
    for m in cfg.methods:
        reason = None
        if m in ("ols", "ols_int") and cfg.K == 0:
            reason = "no covariates"
        elif m == "ols_int":
            min_arm = int(min(design.n1s.min(), design.n0s.min()))
            if min_arm <= cfg.K + 1:
                reason = "arm size <= K+1"
        out[m] = reason
    return out


def _run_rep_chunk(args) -> dict[str, list[tuple[float, float, float]]]:
    population, methods, alpha, df_divisor, master_seed, start, stop = args
    out: dict[str, list[tuple[float, float, float]]] = {m: [] for m in methods}
    design = population.design
    for rep in range(start, stop):
        seed = np.random.SeedSequence(master_seed, spawn_key=(_REPLICATION_DOMAIN, rep))
        a = sample_assignment(design, seed)
        ds = population.observe(a.z)
        for m in methods:
            r = estimate(ds, m, alpha, df_divisor=df_divisor)
            lo, hi = r.ci if r.ci is not None else (math.nan, math.nan)
            out[m].append((r.tau_hat, lo, hi))
    return out


def _simulate_records(
    cfg: ScenarioConfig,
    population: Population,
    methods: tuple[str, ...],
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Per-replication (tau_hat, ci_lo, ci_hi) arrays, identical for any worker count."""
    reps = cfg.reps
    if workers <= 1:
        chunks = [(population, methods, cfg.alpha, cfg.df_divisor, cfg.master_seed, 0, reps)]
        results = [_run_rep_chunk(chunks[0])]
    else:
        bounds = np.linspace(0, reps, num=min(workers * 4, reps) + 1, dtype=int)
        chunks = [
            (population, methods, cfg.alpha, cfg.df_divisor, cfg.master_seed, int(a), int(b))
            for a, b in zip(bounds[:-1], bounds[1:])
            if b > a
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_rep_chunk, chunks))
    out = {}
    for m in methods:
        rows = [row for chunk in results for row in chunk[m]]
        out[m] = np.array(rows, dtype=np.float64).reshape(reps, 3)
    return out


@dataclass(frozen=True)
class MetricsRow:
    """Operating characteristics of one method with bootstrap SEs."""

    method: str
    applicable: bool
    reason: str | None
    reps: int
    bias: float | None = None
    sd: float | None = None
    rmse: float | None = None
    coverage: float | None = None
    ci_length: float | None = None
    bias_se: float | None = None
    sd_se: float | None = None
    rmse_se: float | None = None
    coverage_se: float | None = None
    ci_length_se: float | None = None


@dataclass(frozen=True)
class MetricsTable:
    """Resolved config echo plus one MetricsRow per requested method."""

    config: dict
    tau: float
    rows: tuple[MetricsRow, ...]

    def to_dict(self) -> dict:
        def sig6(x):
            return None if x is None else float(f"{x:.6g}")

        rows = []
        for r in self.rows:
            rows.append(
                {
                    "method": r.method,
                    "applicable": r.applicable,
                    "reason": r.reason,
                    "reps": r.reps,
                    "bias": sig6(r.bias),
                    "bias_se": sig6(r.bias_se),
                    "sd": sig6(r.sd),
                    "sd_se": sig6(r.sd_se),
                    "rmse": sig6(r.rmse),
                    "rmse_se": sig6(r.rmse_se),
                    "coverage": sig6(r.coverage),
                    "coverage_se": sig6(r.coverage_se),
                    "ci_length": sig6(r.ci_length),
                    "ci_length_se": sig6(r.ci_length_se),
                }
            )
        return {"config": self.config, "tau": float(f"{self.tau:.6g}"), "metrics": rows}

    def to_text(self) -> str:
        """Aligned table using the conventional scalings:
        bias x1000, sd x100, rmse x100, coverage %, CI length x100."""
        header = ["method", "bias(x1000)", "sd(x100)", "rmse(x100)", "coverage(%)", "ci-len(x100)"]
        lines = [header]
        for r in self.rows:
            if not r.applicable:
                lines.append([r.method, f"n/a ({r.reason})", "", "", "", ""])
                continue
            lines.append(
                [
                    r.method,
                    f"{abs(r.bias) * 1000:.0f}({r.bias_se * 1000:.0f})",
                    f"{r.sd * 100:.0f}({r.sd_se * 100:.0f})",
                    f"{r.rmse * 100:.0f}({r.rmse_se * 100:.0f})",
                    f"{r.coverage * 100:.1f}",
                    f"{r.ci_length * 100:.0f}",
                ]
            )
        widths = [max(len(row[j]) for row in lines) for j in range(len(header))]
        out = []
        for row in lines:
            out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(out)


def _metric_values(err: np.ndarray, tau_hats: np.ndarray, covered: np.ndarray,
                   lengths: np.ndarray) -> tuple[float, float, float, float, float]:
    bias = float(err.mean())
    sd = float(np.sqrt(np.mean((tau_hats - tau_hats.mean()) ** 2)))
    rmse = float(np.sqrt(np.mean(err * err)))
    coverage = float(covered.mean())
    ci_length = float(lengths.mean())
    return bias, sd, rmse, coverage, ci_length


def inapplicable_table(config: ScenarioConfig) -> MetricsTable:
    """All-n/a table for configs where no requested method can run."""
    cfg = resolve_config(config)
    applicability = method_applicability(cfg)
    tau = population_moments(generate_population(cfg)).tau
    rows = tuple(MetricsRow(m, False, applicability[m], cfg.reps) for m in cfg.methods)
    return MetricsTable(config=cfg.to_dict(), tau=tau, rows=rows)


def run_monte_carlo(config: ScenarioConfig, workers: int = 1) -> MetricsTable:
    """Simulate the configured experiment and tabulate operating characteristics.

    Raises MethodInapplicable when no requested method can run; individual
    inapplicable methods are reported as rows with a reason.
    """
    cfg = resolve_config(config)
    applicability = method_applicability(cfg)
    runnable = tuple(m for m in cfg.methods if applicability[m] is None)
    if not runnable:
        raise MethodInapplicable(
            "; ".join(f"{m}: {reason}" for m, reason in applicability.items())
        )
    population = generate_population(cfg)
    tau = population_moments(population).tau
    records = _simulate_records(cfg, population, runnable, workers=workers)

    boot_rng = substream(cfg.master_seed, _BOOTSTRAP_DOMAIN)
    boot_idx = boot_rng.integers(0, cfg.reps, size=(cfg.boot_reps, cfg.reps))

    rows = []
    for m in cfg.methods:
        if applicability[m] is not None:
            rows.append(MetricsRow(m, False, applicability[m], cfg.reps))
            continue
        rec = records[m]
        tau_hats, lo, hi = rec[:, 0], rec[:, 1], rec[:, 2]
        err = tau_hats - tau
        covered = ((lo <= tau) & (tau <= hi)).astype(np.float64)
        lengths = hi - lo
        bias, sd, rmse, coverage, ci_length = _metric_values(err, tau_hats, covered, lengths)

        bt = tau_hats[boot_idx]
        be = bt - tau
        b_bias = be.mean(axis=1)
        b_sd = np.sqrt(np.mean((bt - bt.mean(axis=1, keepdims=True)) ** 2, axis=1))
        b_rmse = np.sqrt(np.mean(be * be, axis=1))
        b_cov = covered[boot_idx].mean(axis=1)
        b_len = lengths[boot_idx].mean(axis=1)
        rows.append(
            MetricsRow(
                method=m,
                applicable=True,
                reason=None,
                reps=cfg.reps,
                bias=bias,
                sd=sd,
                rmse=rmse,
                coverage=coverage,
                ci_length=ci_length,
                bias_se=float(np.std(b_bias, ddof=1)),
                sd_se=float(np.std(b_sd, ddof=1)),
                rmse_se=float(np.std(b_rmse, ddof=1)),
                coverage_se=float(np.std(b_cov, ddof=1)),
                ci_length_se=float(np.std(b_len, ddof=1)),
            )
        )
    return MetricsTable(config=cfg.to_dict(), tau=tau, rows=tuple(rows))


def standardized_estimates(
    config: ScenarioConfig,
    method: str,
    population: Population | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Per-replication (tau_hat - tau) / sigma with the true sigma from the oracle."""
    cfg = resolve_config(config)
    if method not in cfg.methods:
        cfg = replace(cfg, methods=cfg.methods + (method,))
    reason = method_applicability(cfg)[method]
    if reason is not None:
        raise MethodInapplicable(f"{method}: {reason}")
    if population is None:
        population = generate_population(cfg)
    tau = population_moments(population).tau
    sigma = sigma_for_method(population, method)
    records = _simulate_records(cfg, population, (method,), workers=workers)
    return (records[method][:, 0] - tau) / sigma
