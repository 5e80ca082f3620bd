"""Two-stage example on R^2 whose adapted transport has no Monge solution in reverse.

Stage 1 is uniform on [-1/sqrt2, 1/sqrt2] for both processes; given the first
value, stage 2 is uniform on [a(x), a(x) + 1] resp. [b(y), b(y) + 1]. The
optimal stage-1 map is two-to-one, so the reverse problem admits no map.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .adapted import aw2, extract_biadapted_monge
from .measures import ProcessNode, ProcessTree

SQRT2 = math.sqrt(2.0)
HALF_WIDTH = 1.0 / SQRT2
EXACT_AW2_SQUARED = 5.0 / 12.0


def a_shift(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, SQRT2 * x - 1.0, SQRT2 * x + 1.0)


def b_shift(y):
    return np.asarray(y, dtype=float) / SQRT2


def optimal_map(x):
    """The stage-1 optimal map T_1."""
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 2 * x - HALF_WIDTH, 2 * x + HALF_WIDTH)


def phi1(x):
    return 0.5 - np.asarray(x, dtype=float) ** 2


def psi1(y):
    return 0.5 * np.asarray(y, dtype=float) ** 2


def reduced_cost(x, y):
    """Stage-1 cost after solving stage 2: (x - y)^2 + (a(x) - b(y))^2."""
    return (np.asarray(x) - np.asarray(y)) ** 2 + (a_shift(x) - b_shift(y)) ** 2


def midpoint_grid(lo: float, hi: float, n: int) -> np.ndarray:
    h = (hi - lo) / n
    return lo + (np.arange(n) + 0.5) * h


def build_trees(n: int, m: int) -> tuple[ProcessTree, ProcessTree]:
    x = midpoint_grid(-HALF_WIDTH, HALF_WIDTH, n)
    offsets = midpoint_grid(0.0, 1.0, m)
    inner = np.full(m, 1.0 / m)

    def tree(shift):
        nodes = tuple(
            ProcessNode([xi], inner, tuple(ProcessNode([s + o]) for o in offsets))
            for xi, s in zip(x, shift(x))
        )
        return ProcessTree(np.full(n, 1.0 / n), nodes)

    return tree(a_shift), tree(b_shift)


@dataclass(frozen=True)
class ExampleReport:
    n: int
    m: int
    grid_spacing: float
    aw2_squared: float
    exact_aw2_squared: float
    map_table: np.ndarray  # columns: x, extracted T(x), analytic T_1(x)
    map_max_error: float
    dual_residual: float
    dual_feasibility_violation: float
    lp_slackness_residual: float
    forward_monge: bool
    stage1_injective_on_grid: bool
    reverse_monge: bool
    seconds: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "gridSpacing": self.grid_spacing,
            "aw2Squared": self.aw2_squared,
            "exactAw2Squared": self.exact_aw2_squared,
            "aw2SquaredError": abs(self.aw2_squared - self.exact_aw2_squared),
            "mapMaxError": self.map_max_error,
            "dualResidual": self.dual_residual,
            "dualFeasibilityViolation": self.dual_feasibility_violation,
            "lpSlacknessResidual": self.lp_slackness_residual,
            "forwardMonge": self.forward_monge,
            "stage1InjectiveOnGrid": self.stage1_injective_on_grid,
            "reverseMonge": self.reverse_monge,
            "seconds": self.seconds,
            "mapTable": self.map_table.tolist(),
        }


def reproduce_example(n: int = 200, m: int | None = None) -> ExampleReport:
    """Discretise both processes with n stage-1 and m stage-2 midpoints and solve.

    The reported dual residual is max |phi_1(x) + psi_1(T_1(x)) - c(x, T_1(x))|
    over the grid atoms, evaluated with the closed-form potentials.
    """
    if n < 10 or n % 2:
        raise ValueError("n must be an even integer >= 10")
    m = n if m is None else m
    if m < 1:
        raise ValueError("m must be positive")
    t0 = time.perf_counter()
    A, B = build_trees(n, m)
    res = aw2(A, B)
    h = 2 * HALF_WIDTH / n
    bmap = extract_biadapted_monge(A, B, res, resolution=h)

    x = np.array([c.value[0] for c in A.children])
    T = optimal_map(x)
    if bmap is not None:
        src = bmap.sources[0][:, 0]
        dst = bmap.targets[0][:, 0]
        order = np.argsort(src)
        src, dst = src[order], dst[order]
    else:
        # fall back to the barycentric projection of the root plan
        G = res.couplings[((), ())].matrix
        y = np.array([c.value[0] for c in B.children])
        src, dst = x, (G @ y) / G.sum(axis=1)
    table = np.column_stack([src, dst, optimal_map(src)])

    dual_res = float(np.max(np.abs(phi1(x) + psi1(T) - reduced_cost(x, T))))
    y_grid = np.array([c.value[0] for c in B.children])
    gap = reduced_cost(x[:, None], y_grid[None, :]) - phi1(x)[:, None] - psi1(y_grid)[None, :]
    root = res.couplings[((), ())]
    return ExampleReport(
        n=n,
        m=m,
        grid_spacing=h,
        aw2_squared=res.squared,
        exact_aw2_squared=EXACT_AW2_SQUARED,
        map_table=table,
        map_max_error=float(np.max(np.abs(table[:, 1] - table[:, 2]))),
        dual_residual=dual_res,
        dual_feasibility_violation=float(max(0.0, -gap.min())),
        lp_slackness_residual=root.slackness_residual(),
        forward_monge=bmap is not None,
        stage1_injective_on_grid=bool(bmap is not None and bmap.resolved_injective[0]),
        reverse_monge=bool(bmap is not None and bmap.bi_adapted),
        seconds=time.perf_counter() - t0,
    )
