"""Independent reference computations used by the tests.

None of these go through the package's solvers: transport problems are
posed directly as linear programs for scipy's HiGHS, and closed forms are
evaluated from scratch.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate
from scipy.optimize import linprog


def lp_transport(a, b, C, sense="min") -> float:
    """Optimal value of the transport LP via HiGHS."""
    a, b, C = np.asarray(a, float), np.asarray(b, float), np.asarray(C, float)
    n, m = C.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    c = C.ravel() if sense == "min" else -C.ravel()
    res = linprog(c, A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun if sense == "min" else -res.fun)


def _leaves(tree):
    """(histories (L, N, d), probabilities, node key of every stage per leaf)."""
    out_h, out_p, out_k = [], [], []

    def walk(node, w, hist, key):
        hist = hist + [np.asarray(node.value, float)]
        if not node.children:
            out_h.append(np.array(hist))
            out_p.append(w)
            out_k.append(key)
            return
        for k, (c, wc) in enumerate(zip(node.children, node.weights)):
            walk(c, w * wc, hist, key + (k,))

    for k, (c, wc) in enumerate(zip(tree.children, tree.weights)):
        walk(c, wc, [], (k,))
    return np.array(out_h), np.array(out_p), out_k


def bicausal_lp(A, B) -> float:
    """Adapted W2 squared as one LP over plans between leaf scenarios.

    Causality A->B at stage t: for every leaf x and stage-t node eta of B,
    pi(x, eta) * P(x_{1:t}) = pi(x_{1:t}, eta) * P(x), conditioning on tree
    nodes; symmetrically for B->A.
    """
    hA, pA, kA = _leaves(A)
    hB, pB, kB = _leaves(B)
    La, Lb, N = len(pA), len(pB), hA.shape[1]
    C = np.array([[float(np.sum((x - y) ** 2)) for y in hB] for x in hA])
    rows, rhs = [], []

    def var(i, j):
        return i * Lb + j

    for i in range(La):
        r = np.zeros(La * Lb)
        r[[var(i, j) for j in range(Lb)]] = 1
        rows.append(r)
        rhs.append(pA[i])
    for j in range(Lb):
        r = np.zeros(La * Lb)
        r[[var(i, j) for i in range(La)]] = 1
        rows.append(r)
        rhs.append(pB[j])

    def causal(kx, px, ky, swap):
        for t in range(1, N):
            for i in range(len(kx)):
                anc = [i2 for i2 in range(len(kx)) if kx[i2][:t] == kx[i][:t]]
                p_anc = sum(px[i2] for i2 in anc)
                for eta in {k[:t] for k in ky}:
                    cell = [j for j in range(len(ky)) if ky[j][:t] == eta]
                    r = np.zeros(La * Lb)
                    for j in cell:
                        r[var(j, i) if swap else var(i, j)] += p_anc
                        for i2 in anc:
                            r[var(j, i2) if swap else var(i2, j)] -= px[i]
                    rows.append(r)
                    rhs.append(0.0)

    causal(kA, pA, kB, False)
    causal(kB, pB, kA, True)
    res = linprog(C.ravel(), A_eq=np.array(rows), b_eq=np.array(rhs), bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


# --------------------------------------------------------------------------
# the two-stage example without a reverse Monge map


def example_aw2_squared() -> float:
    """Integral of c(x, T1(x)) against the uniform law on [-1/sqrt2, 1/sqrt2]."""
    r2 = math.sqrt(2.0)

    def a(x):
        return r2 * x - 1 if x >= 0 else r2 * x + 1

    def T1(x):
        return 2 * x - 1 / r2 if x >= 0 else 2 * x + 1 / r2

    def c(x):
        y = T1(x)
        return (x - y) ** 2 + (a(x) - y / r2) ** 2

    h = 1 / r2
    left, _ = integrate.quad(c, -h, 0.0, epsabs=1e-13)
    right, _ = integrate.quad(c, 0.0, h, epsabs=1e-13)
    return (left + right) / (2 * h)


# --------------------------------------------------------------------------
# tau on the planted symmetric instance


def planted_tau_grid(points_nu, n_grid: int = 200_001) -> float:
    """Max over the one-parameter optimal family [[p, 1/2 - p], [1/2 - p, p]].

    Row laws are (2p, 1 - 2p) on the two atoms of nu; the spread of each is
    sum_n 2^-n * 2 * Var_usual(tanh of coordinate n).
    """
    F = np.tanh(np.asarray(points_nu, float))  # (2, d)
    c = 2.0 ** -np.arange(1, F.shape[1] + 1)
    q = np.linspace(0.0, 1.0, n_grid)
    diff2 = (F[0] - F[1]) ** 2  # usual variance of a two-point law: q (1 - q) diff^2
    per_row = (2.0 * q * (1 - q))[:, None] * diff2[None, :] @ c
    # both rows have weight 1/2 and the same spread by symmetry
    return float(np.max(per_row))
