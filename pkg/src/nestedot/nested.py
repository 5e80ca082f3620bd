"""Iterated max-covariance and iterated W2 between nested measures.

Both quantities are computed by the dynamic-programming recursion: the value
between two nodes is an exact transport problem whose cost matrix holds the
values between their children. Node pairs are memoised by object identity
within one call.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measures import SOLVER_TOL, DiscreteMeasure, Measure, NestedMeasure, nested_equal, require_valid
from .otcore import Coupling, OTSolution, inner_cost, solve_exact_ot, sq_cost


def _check(P: Measure, Q: Measure) -> None:
    require_valid(P, Q)
    if P.depth != Q.depth:
        raise ValueError(f"depth mismatch: {P.depth} vs {Q.depth}")
    if P.dim != Q.dim:
        raise ValueError(f"dimension mismatch: {P.dim} vs {Q.dim}")


class _Solver:
    """Bottom-up recursion for one (P, Q) pair with an identity-keyed cache."""

    def __init__(self, sense: str, use_cache: bool = True):
        self.sense = sense
        self.use_cache = use_cache
        self.cache: dict[tuple[int, int], float] = {}
        self.solutions: dict[tuple[int, int], OTSolution] = {}
        self._alive: list = []  # keeps keyed objects alive so ids stay unique

    def leaf_cost(self, p: DiscreteMeasure, q: DiscreteMeasure) -> np.ndarray:
        if self.sense == "max":
            return inner_cost(p.points, q.points)
        return sq_cost(p.points, q.points)

    def solve(self, p: Measure, q: Measure) -> OTSolution:
        if isinstance(p, DiscreteMeasure):
            C = self.leaf_cost(p, q)
        else:
            C = np.array([[self.value(a, b) for b in q.children] for a in p.children])
        return solve_exact_ot(p.weights, q.weights, C, self.sense)

    def value(self, p: Measure, q: Measure) -> float:
        key = (id(p), id(q))
        if self.use_cache and key in self.cache:
            return self.cache[key]
        sol = self.solve(p, q)
        if self.use_cache:
            self.cache[key] = sol.value
            self.solutions[key] = sol
            self._alive.append((p, q))
        return sol.value


def nested_mc(P: Measure, Q: Measure, use_cache: bool = True) -> tuple[float, OTSolution, dict]:
    """Iterated max-covariance MC(P, Q).

    Returns the value, the optimal top-level solution (plan between children)
    and the cache of node-pair values keyed by ``(id(p), id(q))``.
    """
    _check(P, Q)
    s = _Solver("max", use_cache)
    top = s.solve(P, Q)
    return top.value, top, s.cache


def _nested_w2_direct(P: Measure, Q: Measure) -> OTSolution:
    return _Solver("min").solve(P, Q)


def self_mc(P: Measure) -> float:
    """MC(P, P), which equals the second moment of the iterated intensity."""
    if isinstance(P, DiscreteMeasure):
        return P.second_moment()
    return float(sum(w * self_mc(c) for w, c in zip(P.weights, P.children)))


@dataclass(frozen=True)
class NestedW2Result:
    value: float
    squared: float
    identity_squared: float
    solution: OTSolution
    mc_solution: OTSolution

    @property
    def identity_residual(self) -> float:
        """|W2^2 - (MC(P,P) + MC(Q,Q) - 2 MC(P,Q))|."""
        return abs(self.squared - self.identity_squared)


def nested_w2_report(P: Measure, Q: Measure) -> NestedW2Result:
    _check(P, Q)
    direct = _nested_w2_direct(P, Q)
    mpq, msol, _ = nested_mc(P, Q)
    mpp, _, _ = nested_mc(P, P)
    mqq, _, _ = nested_mc(Q, Q)
    sq = max(direct.value, 0.0)
    return NestedW2Result(math.sqrt(sq), sq, mpp + mqq - 2.0 * mpq, direct, msol)


def nested_w2(P: Measure, Q: Measure) -> tuple[float, OTSolution]:
    """Iterated W2 computed directly with squared child distances as costs."""
    _check(P, Q)
    sol = _nested_w2_direct(P, Q)
    return math.sqrt(max(sol.value, 0.0)), sol


# --------------------------------------------------------------------------
# N-couplings


@dataclass(frozen=True, eq=False)
class NCoupling:
    """Tree of couplings.

    At depth 1 it is a plan ``top`` between atoms ``x`` and ``y``; at depth > 1
    ``top`` couples the children and ``subplans[(i, j)]`` couples child i of
    the first tree with child j of the second for every pair carrying mass.
    """

    depth: int
    top: Coupling
    subplans: dict = field(default_factory=dict)
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None

    def flatten(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """I^{N-1} of the coupling: weights, x-atoms and y-atoms of each pair."""
        G = self.top.matrix
        if self.depth == 1:
            i, j = np.nonzero(G > 0)
            return G[i, j], self.x[i], self.y[j]
        ws, xs, ys = [], [], []
        for (i, j), sub in self.subplans.items():
            w, x, y = sub.flatten()
            ws.append(G[i, j] * w)
            xs.append(x)
            ys.append(y)
        return np.concatenate(ws), np.concatenate(xs), np.concatenate(ys)

    def score(self) -> float:
        """Integral of <x, y> against the flattened coupling."""
        w, x, y = self.flatten()
        return float(w @ np.einsum("ij,ij->i", x, y))

    def project(self, side: int) -> Measure:
        """Marginal projection onto the first (0) or second (1) component.

        Masses are read off the plans, so they match the inputs up to solver
        rounding; sibling projections are compared at ``SOLVER_TOL``.
        """
        G = self.top.matrix
        mass = G.sum(axis=1 - side)
        if self.depth == 1:
            pts = self.x if side == 0 else self.y
            return DiscreteMeasure(pts, mass)
        n = G.shape[side]
        kids: list[Optional[Measure]] = [None] * n
        for (i, j), sub in self.subplans.items():
            k = i if side == 0 else j
            proj = sub.project(side)
            if kids[k] is None:
                kids[k] = proj
            elif not nested_equal(kids[k], proj, atol=SOLVER_TOL):
                raise ValueError(f"inconsistent subplans for child {k}")
        if any(k is None for k in kids):
            raise ValueError("a child with positive mass has no subplan")
        return NestedMeasure(mass, tuple(kids))


def assemble_ncoupling(P: Measure, Q: Measure) -> NCoupling:
    """Glue the optimal plans of every level into an MC-optimal N-coupling."""
    _check(P, Q)
    s = _Solver("max")

    def build(p: Measure, q: Measure) -> NCoupling:
        sol = s.solve(p, q)
        if isinstance(p, DiscreteMeasure):
            return NCoupling(1, sol.coupling, {}, p.points, q.points)
        G = sol.matrix
        subs = {}
        for i, j in zip(*np.nonzero(G > 0)):
            subs[(int(i), int(j))] = build(p.children[i], q.children[j])
        return NCoupling(p.depth, sol.coupling, subs)

    return build(P, Q)


# --------------------------------------------------------------------------
# brute-force oracle

BRUTE_MAX_ATOMS = 4
BRUTE_MAX_DEPTH = 3


def _uniform_size(m: Measure) -> int:
    k = len(m.weights)
    if not np.allclose(m.weights, 1.0 / k, rtol=0, atol=1e-12):
        raise ValueError("brute force requires uniform weights at every node")
    if isinstance(m, NestedMeasure):
        for c in m.children:
            if _uniform_size(c) != k:
                raise ValueError("brute force requires equal fan-out at every node")
    return k


def brute_force_nested_mc(P: Measure, Q: Measure) -> float:
    """Exhaustive maximisation over permutation-structured N-couplings.

    Every node must carry k uniform atoms (k <= 4) and depth must be <= 3.
    Extreme couplings of uniform k-point marginals are permutations, so the
    maximum over per-level permutation choices equals the nested MC. The total
    score is separable across matched pairs, hence the joint enumeration
    factorises into a maximum over top permutations of summed child maxima.
    """
    if P.depth != Q.depth:
        raise ValueError("depth mismatch")
    if P.depth > BRUTE_MAX_DEPTH:
        raise ValueError(f"depth {P.depth} above brute-force cap {BRUTE_MAX_DEPTH}")
    k = _uniform_size(P)
    if _uniform_size(Q) != k:
        raise ValueError("both trees need the same fan-out")
    if k > BRUTE_MAX_ATOMS:
        raise ValueError(f"{k} atoms per node above brute-force cap {BRUTE_MAX_ATOMS}")

    def best(p: Measure, q: Measure) -> float:
        if isinstance(p, DiscreteMeasure):
            pair = [[float(np.dot(a, b)) for b in q.points] for a in p.points]
        else:
            pair = [[best(a, b) for b in q.children] for a in p.children]
        return max(sum(pair[i][s[i]] for i in range(k)) for s in itertools.permutations(range(k))) / k

    return best(P, Q)


def brute_force_joint(P: Measure, Q: Measure) -> float:
    """Unfactorised enumeration of every permutation-structured N-coupling.

    Exponential; intended for k = 2 and depth <= 2 cross-checks only.
    """
    k = _uniform_size(P)

    def plans(p: Measure, q: Measure):
        for s in itertools.permutations(range(k)):
            if isinstance(p, DiscreteMeasure):
                yield sum(float(np.dot(p.points[i], q.points[s[i]])) for i in range(k)) / k
            else:
                sub = [list(plans(p.children[i], q.children[s[i]])) for i in range(k)]
                for combo in itertools.product(*sub):
                    yield sum(combo) / k

    return max(plans(P, Q))
