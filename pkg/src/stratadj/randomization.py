"""Stratified complete randomization: sampling and exhaustive enumeration.

Each stratum's draw consumes a dedicated counter-based stream derived from
(seed, stratum index), so assignments are bit-reproducible regardless of
execution order or worker count.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import ExperimentDesign
from .errors import TooLarge

DEFAULT_ENUMERATION_CAP = 1_000_000

SeedLike = int | np.random.SeedSequence


@dataclass(frozen=True)
class Assignment:
    """Flat 0/1 assignment vector aligned with a design's stratum blocks."""

    z: np.ndarray

    def __post_init__(self) -> None:
        z = np.ascontiguousarray(self.z, dtype=np.int8)
        z.flags.writeable = False
        object.__setattr__(self, "z", z)

    def per_stratum(self, design: ExperimentDesign) -> list[np.ndarray]:
        return [self.z[design.starts[i]: design.starts[i + 1]] for i in range(design.B)]


def _as_seedseq(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def substream(seed: SeedLike, *path: int) -> np.random.Generator:
    """Generator on an independent Philox stream keyed by (seed, *path)."""
    base = _as_seedseq(seed)
    ss = np.random.SeedSequence(base.entropy, spawn_key=(*base.spawn_key, *path))
    return np.random.Generator(np.random.Philox(ss))


def _partial_fisher_yates(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """First k entries of a partially shuffled 0..n-1, a uniform size-k subset."""
    idx = np.arange(n)
    js = rng.integers(np.arange(k), n)
    for t in range(k):
        j = js[t]
        idx[t], idx[j] = idx[j], idx[t]
    return idx[:k]


def sample_assignment(design: ExperimentDesign, seed: SeedLike) -> Assignment:
    """Draw one stratified complete randomization.

    Within each stratum every treated subset of size n1_i is equally likely;
    strata are independent. O(n_i) per stratum via partial Fisher-Yates.
    """
    z = np.zeros(design.N, dtype=np.int8)
    for i, st in enumerate(design.strata):
        rng = substream(seed, i)
        chosen = _partial_fisher_yates(st.n, st.n1, rng)
        z[design.starts[i] + chosen] = 1
    return Assignment(z)


def count_assignments(design: ExperimentDesign) -> int:
    """Exact number of stratified assignments, prod of binomial coefficients."""
    total = 1
    for st in design.strata:
        total *= math.comb(st.n, st.n1)
    return total


def enumerate_assignments(
    design: ExperimentDesign, cap: int = DEFAULT_ENUMERATION_CAP
) -> Iterator[Assignment]:
    """Yield every assignment once, lexicographic in the chosen index sets.

    Raises TooLarge when count_assignments(design) exceeds ``cap``.
    """
    total = count_assignments(design)
    if total > cap:
        raise TooLarge(f"{total} assignments exceed the enumeration cap {cap}")
    per_stratum = [
        itertools.combinations(range(st.n), st.n1) for st in design.strata
    ]
    starts = design.starts
    N = design.N
    for combo in itertools.product(*per_stratum):
        z = np.zeros(N, dtype=np.int8)
        for i, chosen in enumerate(combo):
            z[starts[i] + np.asarray(chosen, dtype=np.int64)] = 1
        yield Assignment(z)
