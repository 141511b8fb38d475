import numpy as np
import pytest

from stratadj.core import ExperimentDesign, ObservedDataset, Population


@pytest.fixture
def p0_population() -> Population:
    """One stratum, n=4, n1=2, y1=(1,2,3,4), y0=(0,1,2,3): constant unit effect 1."""
    design = ExperimentDesign.from_counts([4], [2])
    return Population(design, np.array([1.0, 2.0, 3.0, 4.0]), np.array([0.0, 1.0, 2.0, 3.0]),
                      np.zeros((4, 0)))


@pytest.fixture
def p0x_population(p0_population) -> Population:
    """P0 plus the single covariate x = (0, 1, 2, 3)."""
    return Population(p0_population.design, p0_population.y1, p0_population.y0,
                      np.array([[0.0], [1.0], [2.0], [3.0]]))


@pytest.fixture
def p1_population(p0_population) -> Population:
    """P0 with y0 = 0, so unit effects are (1,2,3,4) and S2_tau = 5/3."""
    return Population(p0_population.design, p0_population.y1, np.zeros(4), np.zeros((4, 0)))


@pytest.fixture
def p0x_dataset(p0x_population) -> ObservedDataset:
    """P0-X observed under z = (1,1,0,0): y = (1,2,2,3)."""
    return p0x_population.observe(np.array([1, 1, 0, 0], dtype=np.int8))


def make_random_dataset(rng, B=None, K=None, min_arm=2, holdout_dof=1):
    """Random dataset satisfying the pooled-fit preconditions."""
    B = B or int(rng.integers(1, 5))
    K = K or int(rng.integers(1, 4))
    while True:
        ns = rng.integers(5, 11, size=B)
        n1s = np.array([int(rng.integers(min_arm, n - min_arm + 1)) for n in ns])
        if (
            (n1s >= min_arm).all()
            and (ns - n1s >= min_arm).all()
            and (n1s - 1).sum() >= K + holdout_dof
            and (ns - n1s - 1).sum() >= K + holdout_dof
        ):
            break
    design = ExperimentDesign.from_counts(ns.tolist(), n1s.tolist())
    X = rng.normal(size=(design.N, K))
    y = rng.normal(size=design.N) + X @ rng.normal(size=K)
    z = np.zeros(design.N, dtype=np.int8)
    for i, st in enumerate(design.strata):
        pick = rng.choice(st.n, size=st.n1, replace=False)
        z[design.starts[i] + pick] = 1
    return ObservedDataset(design, z, y, X)


def make_random_population(rng, B=None, K=None, equal_p=False, sizes=None):
    """Random population with invertible per-stratum covariate covariances."""
    B = B or int(rng.integers(2, 5))
    K = K or int(rng.integers(1, 4))
    if sizes is None:
        low = max(6, K + 3)
        sizes = rng.integers(low, low + 6, size=B)
    ns = np.asarray(sizes, dtype=int)
    if equal_p:
        ns = ns + (ns % 2)  # even sizes, half treated
        n1s = ns // 2
    else:
        n1s = np.array([int(rng.integers(2, n - 1)) for n in ns])
    design = ExperimentDesign.from_counts(ns.tolist(), n1s.tolist())
    X = rng.normal(size=(design.N, K))
    y1 = 0.5 + X @ rng.normal(size=K) + rng.normal(size=design.N)
    y0 = X @ rng.normal(size=K) + rng.normal(size=design.N)
    return Population(design, y1, y0, X)
