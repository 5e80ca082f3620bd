"""Seeded grid samplers for Brownian motion, Q-Wiener processes and Brownian sheets.

A sheet on ``[0, 1]^N`` is simulated on the grid ``{0, 1/m, ..., 1}^N``: box
increments are i.i.d. centred Gaussians with variance ``m^-N`` (times Q), and
cumulative sums along every axis give the field, which vanishes on the axes.
On grid points the covariance is exactly prod_t min(u_t, v_t) * Q.

Every sample is drawn from its own stream ``rng.stream(seed, index)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from .measures import DiscreteMeasure, Measure, NestedMeasure
from .rng import stream


@dataclass(frozen=True)
class QSpec:
    """Diagonal covariance operator truncated to K modes."""

    eigenvalues: np.ndarray = field(default_factory=lambda: default_eigenvalues(16))

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        if lam.size == 0 or not np.all(np.isfinite(lam)) or np.any(lam <= 0):
            raise ValueError("eigenvalues must be positive and finite")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def K(self) -> int:
        return len(self.eigenvalues)

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    @classmethod
    def power_law(cls, K: int = 16, exponent: float = 2.0) -> "QSpec":
        return cls(default_eigenvalues(K, exponent))


def default_eigenvalues(K: int = 16, exponent: float = 2.0) -> np.ndarray:
    """lambda_k = k^-exponent for k = 1..K."""
    if K < 1:
        raise ValueError("K must be positive")
    return np.arange(1, K + 1, dtype=float) ** -exponent


@dataclass(frozen=True, eq=False)
class SheetSample:
    """Field values on the grid; ``values`` has shape ``(m + 1,) * N + (d,)``."""

    values: np.ndarray
    N: int
    m: int
    seed: int
    index: int = 0
    q: Optional[QSpec] = None

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.m + 1)

    def at(self, *u: float) -> np.ndarray:
        """Value at a grid point given by its coordinates in [0, 1]."""
        if len(u) != self.N:
            raise ValueError(f"expected {self.N} coordinates")
        idx = []
        for x in u:
            k = x * self.m
            if abs(k - round(k)) > 1e-9 or not 0 <= round(k) <= self.m:
                raise ValueError(f"{x} is not a grid coordinate at resolution {self.m}")
            idx.append(int(round(k)))
        return self.values[tuple(idx)]


def sample_sheet(N: int, dim: Union[int, QSpec], m: int, seed: int, index: int = 0) -> SheetSample:
    """N-parameter Brownian sheet in R^d (or in R^K with covariance Q)."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if m < 2:
        raise ValueError("grid resolution m must be at least 2")
    if isinstance(dim, QSpec):
        q, d, scale = dim, dim.K, np.sqrt(dim.eigenvalues)
    else:
        if dim < 1:
            raise ValueError("dimension must be positive")
        q, d, scale = None, int(dim), 1.0
    rng = stream(seed, index)
    incr = rng.standard_normal((m,) * N + (d,)) * (float(m) ** (-N / 2)) * scale
    for ax in range(N):
        incr = np.cumsum(incr, axis=ax)
    values = np.zeros((m + 1,) * N + (d,))
    values[(slice(1, None),) * N] = incr
    values.setflags(write=False)
    return SheetSample(values, N, m, seed, index, q)


def sample_brownian(m: int, seed: int, index: int = 0, dim: int = 1) -> SheetSample:
    return sample_sheet(1, dim, m, seed, index)


def sample_q_wiener(spec: QSpec, m: int, seed: int, index: int = 0) -> SheetSample:
    """Q-Wiener path in R^K: coordinate k is sqrt(lambda_k) times a Brownian path."""
    return sample_sheet(1, spec, m, seed, index)


def occupation_measure(s: Union[SheetSample, np.ndarray]) -> DiscreteMeasure:
    """Uniform measure on the values over grid cells.

    A cell is represented by its upper corner, so the zero boundary of a
    sheet is dropped. A plain array of path values is used as given.
    """
    if isinstance(s, SheetSample):
        pts = s.values[(slice(1, None),) * s.N].reshape(-1, s.dim)
    else:
        pts = np.asarray(s, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("path values must have shape (n,) or (n, d)")
    return DiscreteMeasure(pts, np.full(len(pts), 1.0 / len(pts)))


def nested_occupation(s: SheetSample, blocks: Union[int, Sequence[int]]) -> Measure:
    """Depth-N measure from a sheet by successive block partitions.

    ``blocks[k]`` is the number of blocks along axis k + 1 (k < N - 1). Top
    level children are the axis-1 blocks, each split along axis 2, and so on;
    the leaf is the occupation measure of the cells in the innermost block,
    which spans the whole last axis. Weights are uniform on every level.
    """
    N, m, d = s.N, s.m, s.dim
    if N == 1:
        return occupation_measure(s)
    if isinstance(blocks, (int, np.integer)):
        blocks = [int(blocks)] * (N - 1)
    blocks = [int(b) for b in blocks]
    if len(blocks) != N - 1:
        raise ValueError(f"need {N - 1} block counts for an {N}-parameter sheet, got {len(blocks)}")
    for b in blocks:
        if b < 1 or m % b:
            raise ValueError(f"indivisible grid: {m} cells cannot be split into {b} blocks")
    cells = s.values[(slice(1, None),) * N]

    def build(arr: np.ndarray, axis: int) -> Measure:
        if axis == N - 1:
            pts = arr.reshape(-1, d)
            return DiscreteMeasure(pts, np.full(len(pts), 1.0 / len(pts)))
        parts = np.split(arr, blocks[axis], axis=axis)
        return NestedMeasure(np.full(len(parts), 1.0 / len(parts)), tuple(build(p, axis + 1) for p in parts))

    return build(cells, 0)


def mean_and_se(x) -> tuple[float, float]:
    """Sample mean and its standard error."""
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


@dataclass(frozen=True)
class SelfSimilarityResult:
    statistic: float
    pvalue: float
    alpha: float

    @property
    def passed(self) -> bool:
        return self.pvalue > self.alpha


def self_similarity_test(
    m: int, n: int, seed: int, alpha: float = 0.05, permutations: int = 999
) -> SelfSimilarityResult:
    """Two-sample energy-distance test of sqrt(m) B_{1/m} against B_1.

    The two samples come from disjoint stream ranges, so they are independent.
    """
    scaled = np.array([np.sqrt(m) * sample_brownian(m, seed, i).values[1, 0] for i in range(n)])
    plain = np.array([sample_brownian(m, seed, n + i).values[m, 0] for i in range(n)])
    res = stats.permutation_test(
        (scaled, plain),
        lambda a, b: stats.energy_distance(a, b),
        n_resamples=permutations,
        alternative="greater",
        random_state=stream(seed, 2 * n),
    )
    return SelfSimilarityResult(float(res.statistic), float(res.pvalue), alpha)
