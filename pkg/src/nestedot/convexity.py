"""MC-transform, MC-subdifferential and MC-order on finite families of nested measures.

A functional is tabulated on a finite family of supports with values in
(-inf, +inf]. All suprema run over that family only, so biconjugation is a
statement about the family: phi^{MC MC} <= phi always and the triple transform
equals the single one, while phi^{MC MC} = phi need not hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .measures import (
    DiscreteMeasure,
    Measure,
    dirac_tower,
    measure_from_dict,
    measure_to_dict,
    random_nested,
    require_valid,
    validate,
)
from .nested import nested_mc, nested_w2
from .rng import stream

SUBDIFF_TOL = 1e-9
ORDER_TOL = 1e-9
DISTINCT_TOL = 1e-12


def _mc(P: Measure, Q: Measure) -> float:
    return nested_mc(P, Q)[0]


def mc_gram(rows: Sequence[Measure], cols: Sequence[Measure]) -> np.ndarray:
    """Matrix of nested MC values between two families."""
    return np.array([[_mc(P, Q) for Q in cols] for P in rows]).reshape(len(rows), len(cols))


@dataclass(frozen=True, eq=False)
class FunctionalTable:
    """A functional on a finite family; ``math.inf`` marks +infinity."""

    supports: tuple
    values: np.ndarray

    def __post_init__(self):
        sup = tuple(self.supports)
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if len(sup) != len(vals):
            raise ValueError(f"{len(sup)} supports but {len(vals)} values")
        vals.setflags(write=False)
        object.__setattr__(self, "supports", sup)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.supports)

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.values)


def validate_table(phi: FunctionalTable, check_distinct: bool = True) -> list[str]:
    """Problems with a table: empty, improper, mixed depths, NaNs, duplicates."""
    problems = []
    if len(phi) == 0:
        return ["empty family"]
    if np.any(np.isnan(phi.values)) or np.any(phi.values == -math.inf):
        problems.append("values must lie in (-inf, +inf]")
    if not np.any(phi.finite):
        problems.append("functional is not proper (no finite value)")
    depths = {P.depth for P in phi.supports}
    dims = {P.dim for P in phi.supports}
    if len(depths) > 1 or len(dims) > 1:
        problems.append(f"supports mix depths {sorted(depths)} / dimensions {sorted(dims)}")
        return problems
    for i, P in enumerate(phi.supports):
        problems.extend(f"support {i}: {p}" for p in validate(P))
    if check_distinct and not problems:
        # nested W2 vanishes exactly on equal nested measures
        for i in range(len(phi)):
            for j in range(i):
                if nested_w2(phi.supports[i], phi.supports[j])[0] <= DISTINCT_TOL:
                    problems.append(f"supports {j} and {i} coincide")
    return problems


def _require(phi: FunctionalTable, check_distinct: bool = False) -> None:
    problems = validate_table(phi, check_distinct)
    if problems:
        raise ValueError("; ".join(problems))


def _rational(a: np.ndarray) -> np.ndarray:
    """Exact rational copy of a finite float array (object dtype)."""
    out = np.empty(a.shape, dtype=object)
    for idx, x in np.ndenumerate(a):
        out[idx] = Fraction(float(x))
    return out


def _transform_exact(G: np.ndarray, phi_vals: np.ndarray) -> np.ndarray:
    """max_i G[i, j] - phi_i over the finite phi_i, in exact rationals."""
    fin = np.isfinite(phi_vals)
    Gq = _rational(G[fin])
    vq = _rational(phi_vals[fin])
    return np.max(Gq - vq[:, None], axis=0)


def mc_transform(
    phi: FunctionalTable, eval_at: Sequence[Measure], gram: Optional[np.ndarray] = None
) -> FunctionalTable:
    """phi^MC(Q) = max over the family of MC(P, Q) - phi(P), for Q in ``eval_at``."""
    _require(phi)
    eval_at = tuple(eval_at)
    if not eval_at:
        raise ValueError("empty evaluation family")
    require_valid(*eval_at)
    P0 = phi.supports[0]
    for Q in eval_at:
        if Q.depth != P0.depth or Q.dim != P0.dim:
            raise ValueError(f"depth/dimension mismatch: ({Q.depth}, {Q.dim}) vs ({P0.depth}, {P0.dim})")
    G = mc_gram(phi.supports, eval_at) if gram is None else gram
    conj = _transform_exact(np.asarray(G, dtype=float), phi.values)
    return FunctionalTable(eval_at, conj.astype(float))


@dataclass(frozen=True)
class ConvexityReport:
    biconjugate: np.ndarray
    residual: float  # max |phi^{MC MC} - phi| over finite entries
    inequality_holds: bool  # phi^{MC MC} <= phi everywhere
    inequality_violation: float
    triple_residual: float  # max |phi^{MC MC MC} - phi^MC|
    fenchel_young_violation: float  # max (MC(P,Q) - phi(P) - phi^MC(Q))_+

    @property
    def mc_convex_on_family(self) -> bool:
        return self.residual <= SUBDIFF_TOL


def mc_convexity_residual(phi: FunctionalTable, gram: Optional[np.ndarray] = None) -> ConvexityReport:
    """Biconjugation report with all transforms taken on the support family.

    The transforms only subtract and maximise, so they are carried out in
    exact rational arithmetic on the float MC values; the inequalities and
    the triple identity are then checked without rounding.
    """
    _require(phi)
    G = mc_gram(phi.supports, phi.supports) if gram is None else np.asarray(gram, dtype=float)
    fin = phi.finite
    Gq = _rational(G)
    conj = _transform_exact(G, phi.values)
    bi = np.max(Gq - conj[None, :], axis=1)
    tri = np.max(Gq - bi[:, None], axis=0)
    vq = _rational(phi.values[fin])
    diff = bi[fin] - vq  # entries with phi = +inf satisfy the inequality trivially
    fy = Gq[fin] - vq[:, None] - conj[None, :]
    return ConvexityReport(
        biconjugate=bi.astype(float),
        residual=float(max(abs(x) for x in diff)),
        inequality_holds=bool(all(x <= 0 for x in diff)),
        inequality_violation=float(max(0, max(diff))),
        triple_residual=float(max(abs(x) for x in tri - conj)),
        fenchel_young_violation=float(max(0, np.max(fy))),
    )


def mc_subdifferential_pairs(
    phi: FunctionalTable, gram: Optional[np.ndarray] = None, tol: float = SUBDIFF_TOL
) -> list[tuple[int, int]]:
    """Index pairs (i, j) with supports[j] in the MC-subdifferential at supports[i].

    Checked exhaustively: phi(R) >= phi(P_i) + MC(R, Q_j) - MC(P_i, Q_j) for
    every R of the family, up to ``tol``.
    """
    _require(phi)
    G = mc_gram(phi.supports, phi.supports) if gram is None else gram
    v = phi.values
    pairs = []
    n = len(phi)
    for i in range(n):
        if not np.isfinite(v[i]):
            continue
        for j in range(n):
            lower = v[i] + G[:, j] - G[i, j]
            if np.all(v >= lower - tol):
                pairs.append((i, j))
    return pairs


# --------------------------------------------------------------------------
# orders


@dataclass(frozen=True, eq=False)
class OrderVerdict:
    """Outcome of a sampled MC-order test of P <= Q."""

    dominates: bool
    witness: Optional[Measure]
    gap: float  # MC(P, R) - MC(Q, R) at the witness, or the largest seen
    probes: int

    @property
    def label(self) -> str:
        return "dominates-sampled" if self.dominates else "violated"


def _axis_probes(depth: int, dim: int) -> list[Measure]:
    out = []
    for k in range(dim):
        for s in (1.0, -1.0):
            e = np.zeros(dim)
            e[k] = s
            out.append(dirac_tower(e, depth))
    return out


def mc_order_test(P: Measure, Q: Measure, probes: int = 64, seed: int = 0) -> OrderVerdict:
    """Search for R with MC(P, R) > MC(Q, R) + tol.

    Dirac towers at +-e_k come first (they detect unequal means), then
    ``probes`` random trees of matching depth with fan-out 2-3 and standard
    Gaussian atoms, probe k drawn from stream (seed, k). Absence of a witness
    is a necessary condition for P <= Q in MC-order, not a proof.
    """
    require_valid(P, Q)
    if P.depth != Q.depth or P.dim != Q.dim:
        raise ValueError("P and Q must have equal depth and dimension")
    candidates = _axis_probes(P.depth, P.dim)
    worst = -math.inf
    count = 0

    def check(R: Measure) -> Optional[OrderVerdict]:
        nonlocal worst, count
        count += 1
        gap = _mc(P, R) - _mc(Q, R)
        worst = max(worst, gap)
        if gap > ORDER_TOL:
            return OrderVerdict(False, R, gap, count)
        return None

    for R in candidates:
        if (v := check(R)) is not None:
            return v
    for k in range(probes):
        R = random_nested(stream(seed, k), P.depth, P.dim, fanout=(2, 3))
        if (v := check(R)) is not None:
            return v
    return OrderVerdict(True, None, worst, count)


def convex_order_1d(mu: DiscreteMeasure, nu: DiscreteMeasure, tol: float = 1e-10) -> bool:
    """Exact convex-order test mu <=_cx nu on the line.

    Equal means and u -> int |x - u| dmu <= int |x - u| dnu at every atom of
    either measure (both sides are piecewise linear with kinks only there).
    """
    require_valid(mu, nu)
    if mu.dim != 1 or nu.dim != 1:
        raise ValueError("convex_order_1d needs one-dimensional measures")
    x, a = mu.points[:, 0], mu.weights
    y, b = nu.points[:, 0], nu.weights
    if abs(a @ x - b @ y) > tol:
        return False
    u = np.union1d(x, y)
    pot_mu = np.abs(x[None, :] - u[:, None]) @ a
    pot_nu = np.abs(y[None, :] - u[:, None]) @ b
    scale = 1.0 + max(np.abs(x).max(), np.abs(y).max())
    return bool(np.all(pot_mu <= pot_nu + tol * scale))


# --------------------------------------------------------------------------
# serialization; +inf is written as the string "inf"


def table_to_dict(phi: FunctionalTable) -> dict:
    return {
        "supports": [measure_to_dict(P) for P in phi.supports],
        "values": [v if math.isfinite(v) else "inf" for v in phi.values.tolist()],
    }


def table_from_dict(d: dict) -> FunctionalTable:
    if "supports" not in d or "values" not in d:
        raise ValueError("functional table needs 'supports' and 'values'")
    vals = []
    for v in d["values"]:
        if v in ("inf", "+inf", "Infinity", None):
            vals.append(math.inf)
        else:
            vals.append(float(v))
    return FunctionalTable(tuple(measure_from_dict(s) for s in d["supports"]), vals)
