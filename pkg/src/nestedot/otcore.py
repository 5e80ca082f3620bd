"""Exact discrete optimal transport: primal plans, dual potentials, MC and W2.

Plans come from the network simplex of POT (``ot.emd``), which returns an
optimal vertex together with dual potentials. Zero-mass atoms are removed
before the solve and their potentials are restored by a c-transform, so the
returned duals are feasible on the full support.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

# POT probes every installed array backend at import time; only numpy is used here.
for _backend in ("PYTORCH", "JAX", "CUPY", "TENSORFLOW"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

import ot  # noqa: E402

from .measures import SOLVER_TOL, DiscreteMeasure, require_valid  # noqa: E402

MAX_ITER = 10_000_000


class OTSolverError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Coupling:
    """Transport plan with its two marginal weight vectors."""

    matrix: np.ndarray
    row_weights: np.ndarray
    col_weights: np.ndarray

    def marginal_error(self) -> float:
        return float(
            max(
                np.max(np.abs(self.matrix.sum(axis=1) - self.row_weights), initial=0.0),
                np.max(np.abs(self.matrix.sum(axis=0) - self.col_weights), initial=0.0),
            )
        )


@dataclass(frozen=True, eq=False)
class OTSolution:
    """Optimal plan, objective value and a dual certificate.

    For ``sense == "min"`` the duals satisfy phi_i + psi_j <= C_ij, for
    ``"max"`` the reverse inequality; equality holds on the support of the plan.
    """

    coupling: Coupling
    value: float
    dual_phi: np.ndarray
    dual_psi: np.ndarray
    cost: np.ndarray
    sense: str = "min"

    @property
    def matrix(self) -> np.ndarray:
        return self.coupling.matrix

    def duality_gap(self) -> float:
        dual = float(self.coupling.row_weights @ self.dual_phi + self.coupling.col_weights @ self.dual_psi)
        return abs(dual - self.value)

    def dual_violation(self) -> float:
        """Largest violation of dual feasibility (0 when feasible)."""
        slack = self.cost - self.dual_phi[:, None] - self.dual_psi[None, :]
        if self.sense == "max":
            slack = -slack
        return float(max(0.0, -slack.min()))

    def slackness_residual(self) -> float:
        """Largest |C_ij - phi_i - psi_j| over the support of the plan."""
        resid = np.abs(self.cost - self.dual_phi[:, None] - self.dual_psi[None, :])
        mask = self.matrix > 0
        return float(resid[mask].max()) if mask.any() else 0.0


def _weights(m) -> np.ndarray:
    if isinstance(m, DiscreteMeasure):
        return np.asarray(m.weights, dtype=float)
    return np.asarray(getattr(m, "weights", m), dtype=float).reshape(-1)


def solve_exact_ot(mu, nu, cost, sense: str = "min") -> OTSolution:
    """Solve the transport LP exactly.

    Parameters
    ----------
    mu, nu : DiscreteMeasure or array_like
        Source and target (only their weights enter).
    cost : array_like, shape (n, m)
    sense : {"min", "max"}
    """
    a, b = _weights(mu), _weights(nu)
    C = np.asarray(cost, dtype=float)
    if sense not in ("min", "max"):
        raise ValueError(f"sense must be 'min' or 'max', not {sense!r}")
    if C.shape != (len(a), len(b)):
        raise ValueError(f"cost matrix shape {C.shape} does not match marginals ({len(a)}, {len(b)})")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    if abs(a.sum() - b.sum()) > SOLVER_TOL:
        raise ValueError(f"marginal masses differ: {a.sum()} vs {b.sum()}")

    M = C if sense == "min" else -C
    ia, ib = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    a_s, b_s = a[ia], b[ib]
    # the simplex wants equal masses to machine precision
    b_s = b_s * (a_s.sum() / b_s.sum())
    M_s = np.ascontiguousarray(M[np.ix_(ia, ib)])
    if len(ia) == 1 or len(ib) == 1:
        G_s = np.outer(a_s, b_s) / a_s.sum()
        u_s = np.zeros(len(ia))
        v_s = np.zeros(len(ib))
        if len(ia) == 1:
            v_s = M_s[0]
        else:
            u_s = M_s[:, 0]
    else:
        # the simplex can report infeasibility on negative costs; solve on a
        # non-negative shift and move the shift into the row potentials
        shift = M_s.min()
        G_s, log = ot.emd(a_s, b_s, M_s - shift, numItermax=MAX_ITER, log=True)
        if log.get("result_code") != 1:
            raise OTSolverError(f"network simplex failed: {log.get('warning')}")
        u_s, v_s = log["u"] + shift, log["v"]

    G = np.zeros(C.shape)
    G[np.ix_(ia, ib)] = G_s
    v = np.empty(len(b))
    v[ib] = v_s
    # c-transforms restore feasible potentials on zero-mass atoms
    u = np.empty(len(a))
    u[ia] = u_s
    rest_b = np.setdiff1d(np.arange(len(b)), ib)
    if len(rest_b):
        v[rest_b] = np.min(M[np.ix_(ia, rest_b)] - u_s[:, None], axis=0)
    rest_a = np.setdiff1d(np.arange(len(a)), ia)
    if len(rest_a):
        u[rest_a] = np.min(M[rest_a] - v[None, :], axis=1)

    value = float(np.sum(G * C))
    if sense == "max":
        u, v = -u, -v
    return OTSolution(Coupling(G, a, b), value, u, v, C, sense)


def inner_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.asarray(x) @ np.asarray(y).T


def sq_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x, y = np.asarray(x), np.asarray(y)
    d = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _check_pair(mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    require_valid(mu, nu)
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def mc(mu: DiscreteMeasure, nu: DiscreteMeasure) -> tuple[float, OTSolution]:
    """Max-covariance MC(mu, nu) = max over couplings of E<X, Y>."""
    _check_pair(mu, nu)
    sol = solve_exact_ot(mu, nu, inner_cost(mu.points, nu.points), "max")
    return sol.value, sol


def w2(mu: DiscreteMeasure, nu: DiscreteMeasure) -> tuple[float, OTSolution]:
    """Wasserstein-2 distance; ``sol.value`` holds the squared distance."""
    _check_pair(mu, nu)
    sol = solve_exact_ot(mu, nu, sq_cost(mu.points, nu.points), "min")
    return float(np.sqrt(max(sol.value, 0.0))), sol


def w2_1d_squared(x, a, y, b) -> float:
    """Squared W2 between 1-D discrete measures via the quantile coupling."""
    x, a, y, b = (np.asarray(v, dtype=float).reshape(-1) for v in (x, a, y, b))
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ca = x[ox], np.cumsum(a[ox])
    ys, cb = y[oy], np.cumsum(b[oy])
    ca[-1] = cb[-1] = 1.0
    levels = np.union1d(ca, cb)
    mass = np.diff(np.concatenate(([0.0], levels)))
    ix = np.minimum(np.searchsorted(ca, levels, side="left"), len(xs) - 1)
    iy = np.minimum(np.searchsorted(cb, levels, side="left"), len(ys) - 1)
    return float(mass @ (xs[ix] - ys[iy]) ** 2)


@dataclass(frozen=True)
class MongeMap:
    is_monge: bool
    assignment: Optional[np.ndarray]  # target index per source atom, -1 on null rows


def extract_monge(sol: OTSolution, rel_tol: float = SOLVER_TOL) -> MongeMap:
    """Detect whether the plan is induced by a map (one target per source row)."""
    G = sol.matrix
    rows = G.sum(axis=1)
    assign = np.full(G.shape[0], -1)
    for i, r in enumerate(rows):
        if r <= 0:
            continue
        nz = np.flatnonzero(G[i] > rel_tol * r)
        if len(nz) != 1:
            return MongeMap(False, None)
        assign[i] = nz[0]
    return MongeMap(True, assign)
