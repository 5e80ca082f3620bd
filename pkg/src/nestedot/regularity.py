"""The tau functional and Monge-rate experiments.

tau(mu, nu) is the largest mean conditional spread over optimal couplings,

    tau(mu, nu) = sup_{pi optimal} sum_i mu_i * VarHat(pi_i. / mu_i),

with VarHat(rho) = sum_n 2^-n Var((f_n)_# rho), f_n = tanh of coordinate n,
and Var(rho) = int |x - x'|^2 drho(x) drho(x') (twice the usual variance).
It vanishes exactly when the optimal coupling is unique and induced by a map.

The objective is a concave quadratic in pi. It is maximised over the optimal
face by away-step Frank-Wolfe with exact line search; the linear oracle is a
dual-simplex LP restricted to the face, so it returns vertices.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import linprog

from .measures import DiscreteMeasure, require_valid
from .otcore import inner_cost, solve_exact_ot, sq_cost
from .rng import stream
from .samplers import QSpec, occupation_measure, sample_sheet

FW_GAP_TOL = 1e-7
TAU_ZERO = 1e-6
FACE_TOL = 1e-9
MAX_FW_ITER = 20_000


class FaceError(RuntimeError):
    """The optimal face came out empty at the solver tolerance."""


@dataclass(frozen=True)
class VarHatConfig:
    """Separating family f_n(x) = tanh(x_n) with weights 2^-n, n = 1..d."""

    def features(self, points: np.ndarray) -> np.ndarray:
        """Matrix F[n, j] = f_{n+1}(points[j])."""
        return np.tanh(np.asarray(points, dtype=float)).T

    def weights(self, dim: int) -> np.ndarray:
        return 2.0 ** -np.arange(1, dim + 1)


DEFAULT_CONFIG = VarHatConfig()


def var_hat(nu: DiscreteMeasure, cfg: VarHatConfig = DEFAULT_CONFIG) -> float:
    require_valid(nu)
    F = cfg.features(nu.points)
    c = cfg.weights(nu.dim)
    w = nu.weights
    mean = F @ w
    var = 2.0 * ((F * F) @ w - mean * mean)
    return float(c @ np.maximum(var, 0.0))


class _Objective:
    """f(pi) = sum_n 2 c_n [sum_ij pi_ij F_nj^2 - sum_i (sum_j pi_ij F_nj)^2 / w_i]."""

    def __init__(self, F: np.ndarray, c: np.ndarray, w: np.ndarray):
        self.F, self.c, self.w = F, c, w
        self.lin = 2.0 * (c @ (F * F))  # (m,)

    def value(self, pi: np.ndarray) -> float:
        M = pi @ self.F.T  # (n, dims)
        return float(pi.sum(axis=0) @ self.lin - 2.0 * np.sum((M * M) / self.w[:, None] @ self.c))

    def grad(self, pi: np.ndarray) -> np.ndarray:
        M = pi @ self.F.T
        return self.lin[None, :] - 4.0 * ((M / self.w[:, None]) * self.c[None, :]) @ self.F

    def curvature(self, d: np.ndarray) -> float:
        """q(d) with f(pi + g d) = f(pi) + g <grad, d> + g^2 q(d); q <= 0."""
        D = d @ self.F.T
        return float(-2.0 * np.sum((D * D) / self.w[:, None] @ self.c))


class _FaceOracle:
    """argmax <g, pi> over transport plans supported on ``mask``."""

    def __init__(self, a: np.ndarray, b: np.ndarray, mask: np.ndarray):
        n, m = mask.shape
        self.shape = (n, m)
        self.idx = np.flatnonzero(mask.ravel())
        rows, cols = np.unravel_index(self.idx, (n, m))
        k = len(self.idx)
        A = np.zeros((n + m, k))
        A[rows, np.arange(k)] = 1.0
        A[n + cols, np.arange(k)] = 1.0
        # one marginal constraint is redundant; drop it to keep the LP full rank
        self.A = A[:-1]
        self.b = np.concatenate([a, b])[:-1]

    def __call__(self, g: np.ndarray) -> np.ndarray:
        res = linprog(-g.ravel()[self.idx], A_eq=self.A, b_eq=self.b, bounds=(0, None), method="highs-ds")
        if res.status != 0:
            raise FaceError(f"linear oracle failed on the optimal face: {res.message}")
        out = np.zeros(self.shape[0] * self.shape[1])
        out[self.idx] = np.maximum(res.x, 0.0)
        return out.reshape(self.shape)


@dataclass(frozen=True, eq=False)
class TauResult:
    value: float
    coupling: np.ndarray  # maximiser over the optimal face
    gap: float  # final Frank-Wolfe gap (upper bound on value error)
    iterations: int
    face_size: int  # number of entries allowed on the optimal face
    ot_value: float

    @property
    def is_zero(self) -> bool:
        return self.value < TAU_ZERO


def _cost(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: str) -> np.ndarray:
    if cost in ("sq", "squared-distance"):
        return sq_cost(mu.points, nu.points)
    if cost in ("inner", "neg-inner-product"):
        return -inner_cost(mu.points, nu.points)
    raise ValueError(f"unknown cost {cost!r}")


def solve_tau(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: str = "sq",
    cfg: VarHatConfig = DEFAULT_CONFIG,
    gap_tol: float = FW_GAP_TOL,
    face_tol: float = FACE_TOL,
) -> TauResult:
    """Maximise the mean conditional VarHat over optimal couplings.

    The optimal face is {pi feasible : pi_ij = 0 where C_ij - u_i - v_j > 0}
    for optimal duals (u, v); entries with reduced cost below
    ``face_tol * (1 + max|C|)`` count as zero.
    """
    require_valid(mu, nu)
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    C = _cost(mu, nu, cost)
    sol = solve_exact_ot(mu, nu, C)
    rows = mu.weights > 0
    a, b = mu.weights[rows], nu.weights
    Cr = C[rows]
    reduced = Cr - sol.dual_phi[rows, None] - sol.dual_psi[None, :]
    mask = reduced <= face_tol * (1.0 + np.abs(C).max())
    pi = sol.matrix[rows]
    if np.any(pi[~mask] > 0):
        raise FaceError("optimal plan leaves the reduced-cost face; duals and plan disagree")

    f = _Objective(cfg.features(nu.points), cfg.weights(nu.dim), a)
    # a face whose rows each allow one column holds a single Monge plan
    if np.all(mask.sum(axis=1) == 1):
        full = np.zeros_like(C)
        full[rows] = pi
        return TauResult(max(f.value(pi), 0.0), full, 0.0, 0, int(mask.sum()), sol.value)

    lmo = _FaceOracle(a, b, mask)
    active: list[np.ndarray] = [pi]
    alpha = [1.0]
    gap, it = math.inf, 0
    for it in range(1, MAX_FW_ITER + 1):
        g = f.grad(pi)
        s = lmo(g)
        gap = float(np.sum(g * (s - pi)))
        if gap < gap_tol:
            break
        scores = [float(np.sum(g * v)) for v in active]
        k = int(np.argmin(scores))
        away_gap = float(np.sum(g * pi)) - scores[k]
        if gap >= away_gap or len(active) == 1:
            d, gmax, step = s - pi, 1.0, "fw"
        else:
            d, gmax, step = pi - active[k], alpha[k] / (1.0 - alpha[k]), "away"
        slope = float(np.sum(g * d))
        q = f.curvature(d)
        gamma = gmax if q >= 0 else min(gmax, slope / (-2.0 * q))
        pi = pi + gamma * d
        if step == "fw":
            alpha = [(1.0 - gamma) * x for x in alpha]
            for j, v in enumerate(active):
                if np.array_equal(v, s):
                    alpha[j] += gamma
                    break
            else:
                active.append(s)
                alpha.append(gamma)
        else:
            alpha = [(1.0 + gamma) * x for x in alpha]
            alpha[k] -= gamma
        keep = [j for j, x in enumerate(alpha) if x > 1e-14]
        active = [active[j] for j in keep]
        alpha = [alpha[j] for j in keep]
    full = np.zeros_like(C)
    full[rows] = np.maximum(pi, 0.0)
    return TauResult(max(f.value(pi), 0.0), full, gap, it, int(mask.sum()), sol.value)


def tau(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: str = "sq", cfg: VarHatConfig = DEFAULT_CONFIG) -> float:
    return solve_tau(mu, nu, cost, cfg).value


def conditional_var_hat(pi: np.ndarray, nu: DiscreteMeasure, cfg: VarHatConfig = DEFAULT_CONFIG) -> float:
    """sum_i w_i VarHat(pi_i. / w_i) for a given coupling, row by row."""
    total = 0.0
    for row in np.asarray(pi, dtype=float):
        w = row.sum()
        if w > 0:
            total += w * var_hat(DiscreteMeasure(nu.points, row / w), cfg)
    return total


# --------------------------------------------------------------------------
# random targets


@dataclass(frozen=True)
class TargetSpec:
    """Random target measures: ``atoms`` uniform atoms, Gaussian then rescaled.

    ``kind`` is "random" or "dirac". A random target's root second moment is
    radius_fraction * radius, with the fraction uniform on [0, 1].
    """

    kind: str = "random"
    atoms: int = 5
    radius: float = 3.0

    def draw(self, seed: int, index: int, dim: int) -> DiscreteMeasure:
        rng = stream(seed, index)
        if self.kind == "dirac":
            return DiscreteMeasure.dirac(rng.standard_normal(dim))
        if self.kind != "random":
            raise ValueError(f"unknown target kind {self.kind!r}")
        return _ball_target(rng, self.atoms, dim, self.radius)


def _ball_target(rng: np.random.Generator, atoms: int, dim: int, radius: float) -> DiscreteMeasure:
    pts = rng.standard_normal((atoms, dim))
    r = radius * rng.random()
    norm = math.sqrt(float(np.mean(np.sum(pts * pts, axis=1))))
    return DiscreteMeasure(pts * (r / norm), np.full(atoms, 1.0 / atoms))


def _w2_to_origin(nu: DiscreteMeasure) -> float:
    return math.sqrt(nu.second_moment())


@dataclass(frozen=True, eq=False)
class TauRResult:
    value: float  # lower estimate of tau_R
    argmax: Optional[int]  # index into ``probes``
    probes: list  # (index, radius, tau) per probe inside the ball


def tau_R(
    mu: DiscreteMeasure,
    R: float,
    targets: int = 32,
    seed: int = 0,
    cfg: VarHatConfig = DEFAULT_CONFIG,
    atoms: Union[int, Sequence[int]] = (2, 5),
    radius_cap: Optional[float] = None,
    planted: Sequence[DiscreteMeasure] = (),
) -> TauRResult:
    """Monte-Carlo lower estimate of sup { tau(mu, nu) : W2(nu, delta_0) <= R }.

    Probe k is drawn from stream (seed, k) with root second moment uniform on
    [0, radius_cap] (default R) and kept if it lies in the ball. With a fixed
    ``radius_cap`` the kept probes grow with R, so the estimate is
    nondecreasing in R; with a fixed seed it is nondecreasing in ``targets``.
    ``planted`` measures are added as further probes.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    require_valid(mu)
    cap = R if radius_cap is None else radius_cap
    lo, hi = (atoms, atoms) if isinstance(atoms, int) else atoms
    cands = []
    for k in range(targets):
        rng = stream(seed, k)
        n_atoms = int(rng.integers(lo, hi + 1))
        cands.append(_ball_target(rng, n_atoms, mu.dim, cap))
    cands.extend(planted)
    best, arg, log = 0.0, None, []
    for k, nu in enumerate(cands):
        r = _w2_to_origin(nu)
        if r > R * (1 + 1e-12):
            continue
        t = tau(mu, nu, "sq", cfg)
        log.append((k, r, t))
        if t > best:
            best, arg = t, k
    return TauRResult(best, arg, log)


# --------------------------------------------------------------------------
# Monge-rate experiment


@dataclass(frozen=True)
class SamplerSpec:
    """Reference-law sampler: occupation measures of a grid process.

    ``kind``: "brownian" (d-dim path), "sheet" (N-parameter, d-dim) or
    "qwiener" (K modes with lambda_k = k^-2).
    """

    kind: str = "brownian"
    grid: int = 50
    dim: int = 1
    parameters: int = 2
    modes: int = 16

    def draw(self, seed: int, index: int) -> DiscreteMeasure:
        if self.kind == "brownian":
            s = sample_sheet(1, self.dim, self.grid, seed, index)
        elif self.kind == "sheet":
            s = sample_sheet(self.parameters, self.dim, self.grid, seed, index)
        elif self.kind == "qwiener":
            s = sample_sheet(1, QSpec.power_law(self.modes), self.grid, seed, index)
        else:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        return occupation_measure(s)


@dataclass(frozen=True)
class PairRecord:
    sample: int
    target: int
    tau: float
    gap: float
    face_size: int
    ot_value: float

    @property
    def monge(self) -> bool:
        return self.tau < TAU_ZERO


@dataclass(frozen=True, eq=False)
class MongeRateResult:
    rate: float
    records: list = field(repr=False)

    def to_csv_rows(self) -> list[list]:
        rows = [["sample", "target", "tau", "fw_gap", "face_size", "ot_value", "monge"]]
        for r in self.records:
            rows.append([r.sample, r.target, repr(r.tau), repr(r.gap), r.face_size, repr(r.ot_value), int(r.monge)])
        return rows


# target streams sit far from the sample streams of the same seed
TARGET_STREAM_OFFSET = 1 << 32


def monge_rate_experiment(
    sampler: Union[SamplerSpec, Sequence[DiscreteMeasure]],
    n_samples: int,
    targets: Union[TargetSpec, Sequence[DiscreteMeasure]],
    n_targets: int,
    seed: int,
    cfg: VarHatConfig = DEFAULT_CONFIG,
    workers: int = 1,
    progress: Optional[Callable[[int, int], None]] = None,
) -> MongeRateResult:
    """Fraction of (sample, target) pairs whose optimal coupling is unique and Monge.

    ``sampler`` and ``targets`` may also be explicit lists (used as given,
    cycling if shorter than the requested counts). Records are ordered by
    (sample, target) regardless of ``workers``.
    """
    if n_samples < 1 or n_targets < 1:
        raise ValueError("need at least one sample and one target")

    def get_sample(i: int) -> DiscreteMeasure:
        if isinstance(sampler, SamplerSpec):
            return sampler.draw(seed, i)
        return sampler[i % len(sampler)]

    samples = [get_sample(i) for i in range(n_samples)]
    dim = samples[0].dim

    def get_target(j: int) -> DiscreteMeasure:
        if isinstance(targets, TargetSpec):
            return targets.draw(seed, TARGET_STREAM_OFFSET + j, dim)
        return targets[j % len(targets)]

    tgts = [get_target(j) for j in range(n_targets)]
    jobs = [(i, j) for i in range(n_samples) for j in range(n_targets)]

    def run(job):
        i, j = job
        r = solve_tau(samples[i], tgts[j], "sq", cfg)
        return PairRecord(i, j, r.value, r.gap, r.face_size, r.ot_value)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            records = list(ex.map(run, jobs))
    else:
        records = []
        for n, job in enumerate(jobs):
            records.append(run(job))
            if progress is not None:
                progress(n + 1, len(jobs))
    rate = sum(r.monge for r in records) / len(records)
    return MongeRateResult(rate, records)
