"""Adapted Wasserstein distance between scenario trees.

The distance is computed by the bicausal backward recursion: for every pair
of stage-t nodes the value is an exact transport problem between their
children, with cost |x - y|^2 plus the stage-(t+1) value of the child pair.
The table is filled for *all* node pairs of a stage before moving up.

Trees are compared up to adapted-law equivalence via :func:`adapted_law`,
and :func:`encode` maps an adapted law into a nested measure on R^{N d}
(full histories at the leaves) so that the nested W2 gives an independent
route to the same number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .measures import (
    SOLVER_TOL,
    WEIGHT_TOL,
    DiscreteMeasure,
    Measure,
    NestedMeasure,
    ProcessNode,
    ProcessTree,
    require_valid,
    tree_from_paths,
)
from .otcore import extract_monge, solve_exact_ot, sq_cost, w2_1d_squared

# --------------------------------------------------------------------------
# flattened per-stage view


@dataclass
class _Stages:
    keys: list[list[tuple]]
    nodes: list[list[ProcessNode]]
    values: list[np.ndarray]  # (n_t, d)
    start: list[np.ndarray]  # child slice of each node in the next stage
    stop: list[np.ndarray]

    @classmethod
    def of(cls, tree: ProcessTree) -> "_Stages":
        levels = tree.levels()
        keys = [[k for k, _ in lvl] for lvl in levels]
        nodes = [[n for _, n in lvl] for lvl in levels]
        values = [np.array([n.value for n in lvl]) for lvl in nodes]
        start, stop = [], []
        for lvl in nodes:
            counts = np.array([len(n.children) for n in lvl])
            stop.append(np.cumsum(counts))
            start.append(stop[-1] - counts)
        return cls(keys, nodes, values, start, stop)


def _check_pair(A: ProcessTree, B: ProcessTree) -> None:
    require_valid(A, B)
    if A.stages != B.stages:
        raise ValueError(f"stage mismatch: {A.stages} vs {B.stages}")
    if A.dim != B.dim:
        raise ValueError(f"dimension mismatch: {A.dim} vs {B.dim}")


def _uniform_children(S: _Stages, s: int) -> Optional[int]:
    """Common child count when every stage-s node has uniform children weights."""
    counts = {len(n.children) for n in S.nodes[s]}
    if len(counts) != 1:
        return None
    m = counts.pop()
    for n in S.nodes[s]:
        if not np.all(n.weights == n.weights[0]):
            return None
    return m


def _last_stage_1d(SA: _Stages, SB: _Stages, s: int, chunk: int = 64) -> np.ndarray:
    """Value table for stage-s pairs whose children are 1-D leaves (V = 0 below).

    The quantile coupling is optimal for squared cost on the line, so each pair
    costs O(n log n) instead of a full simplex solve.
    """
    nA, nB = len(SA.nodes[s]), len(SB.nodes[s])
    mA, mB = _uniform_children(SA, s), _uniform_children(SB, s)
    xa, xb = SA.values[s + 1][:, 0], SB.values[s + 1][:, 0]
    if mA is not None and mA == mB:
        XA = np.sort(np.stack([xa[a:b] for a, b in zip(SA.start[s], SA.stop[s])]), axis=1)
        XB = np.sort(np.stack([xb[a:b] for a, b in zip(SB.start[s], SB.stop[s])]), axis=1)
        V = np.empty((nA, nB))
        for i in range(0, nA, chunk):
            d = XA[i : i + chunk, None, :] - XB[None, :, :]
            V[i : i + chunk] = np.mean(d * d, axis=2)
        return V
    V = np.empty((nA, nB))
    for i, u in enumerate(SA.nodes[s]):
        xu = xa[SA.start[s][i] : SA.stop[s][i]]
        for j, v in enumerate(SB.nodes[s]):
            V[i, j] = w2_1d_squared(xu, u.weights, xb[SB.start[s][j] : SB.stop[s][j]], v.weights)
    return V


@dataclass(frozen=True, eq=False)
class AW2Result:
    """Adapted W2 value with the glued optimal plan.

    ``couplings`` maps ``(keyA, keyB)`` of every node pair reached with positive
    mass (``((), ())`` for the root) to the optimal plan between their children.
    ``tables[s]`` is the value table over all stage-(s+1) node pairs
    (``None`` for the last stage, where it vanishes).
    """

    value: float
    squared: float
    couplings: dict
    tables: list = field(repr=False)


def aw2(A: ProcessTree, B: ProcessTree) -> AW2Result:
    """Adapted Wasserstein distance via the bicausal backward recursion."""
    _check_pair(A, B)
    SA, SB = _Stages.of(A), _Stages.of(B)
    N = A.stages
    # stage-N values vanish; that table stays implicit (it can be huge)
    tables: list[Optional[np.ndarray]] = [None] * N

    def block(s: int, i: int, j: int) -> np.ndarray:
        a0, a1 = SA.start[s][i], SA.stop[s][i]
        b0, b1 = SB.start[s][j], SB.stop[s][j]
        C = sq_cost(SA.values[s + 1][a0:a1], SB.values[s + 1][b0:b1])
        if tables[s + 1] is not None:
            C = C + tables[s + 1][a0:a1, b0:b1]
        return C

    for s in range(N - 2, -1, -1):
        if s == N - 2 and A.dim == 1:
            tables[s] = _last_stage_1d(SA, SB, s)
            continue
        V = np.empty((len(SA.nodes[s]), len(SB.nodes[s])))
        for i, u in enumerate(SA.nodes[s]):
            for j, v in enumerate(SB.nodes[s]):
                V[i, j] = solve_exact_ot(u.weights, v.weights, block(s, i, j)).value
        tables[s] = V

    root_cost = sq_cost(SA.values[0], SB.values[0])
    if tables[0] is not None:
        root_cost = root_cost + tables[0]
    root = solve_exact_ot(A.weights, B.weights, root_cost)
    couplings = {((), ()): root}

    # forward pass: plans only along pairs the glued coupling reaches
    index_a = [{k: i for i, k in enumerate(lvl)} for lvl in SA.keys]
    index_b = [{k: i for i, k in enumerate(lvl)} for lvl in SB.keys]
    frontier = [((), ())]
    for s in range(N - 1):
        nxt = []
        for ka, kb in frontier:
            G = couplings[(ka, kb)].matrix
            for i, j in zip(*np.nonzero(G > 0)):
                ca, cb = ka + (int(i),), kb + (int(j),)
                ia, jb = index_a[s][ca], index_b[s][cb]
                u, v = SA.nodes[s][ia], SB.nodes[s][jb]
                couplings[(ca, cb)] = solve_exact_ot(u.weights, v.weights, block(s, ia, jb))
                nxt.append((ca, cb))
        frontier = nxt

    sq = max(root.value, 0.0)
    return AW2Result(math.sqrt(sq), sq, couplings, tables)


def path_coupling(result: AW2Result, A: ProcessTree, B: ProcessTree) -> np.ndarray:
    """The glued plan as a matrix over leaf scenarios (orders of ``paths()``)."""
    _, _, keys_a = A.paths()
    _, _, keys_b = B.paths()
    ia = {k: i for i, k in enumerate(keys_a)}
    ib = {k: i for i, k in enumerate(keys_b)}
    pi = np.zeros((len(keys_a), len(keys_b)))

    def walk(ka, kb, mass):
        sol = result.couplings.get((ka, kb))
        if sol is None:
            pi[ia[ka], ib[kb]] += mass
            return
        G = sol.matrix
        for i, j in zip(*np.nonzero(G > 0)):
            walk(ka + (int(i),), kb + (int(j),), mass * G[i, j])

    walk((), (), 1.0)
    return pi


def plain_w2(A: ProcessTree, B: ProcessTree) -> float:
    """W2 between the path laws, ignoring filtrations."""
    from .otcore import w2

    return w2(A.path_measure(), B.path_measure())[0]


# --------------------------------------------------------------------------
# causality


def _ancestor_matrix(keys: list[tuple], t: int) -> tuple[np.ndarray, np.ndarray]:
    """Incidence of leaves in their stage-t ancestor; returns (S, ancestor index)."""
    anc = {}
    idx = np.array([anc.setdefault(k[:t], len(anc)) for k in keys])
    S = np.zeros((len(keys), len(anc)))
    S[np.arange(len(keys)), idx] = 1.0
    return S, idx


def _causal_one_way(pi, keys_x, keys_y, N, tol, label) -> Optional[str]:
    mass_x = pi.sum(axis=1)
    live = mass_x > 0
    for t in range(1, N + 1):
        SY, _ = _ancestor_matrix(keys_y, t)
        SX, anc = _ancestor_matrix(keys_x, t)
        joint = pi @ SY  # leaf of X vs stage-t node of Y
        cond_leaf = joint[live] / mass_x[live, None]
        joint_anc = SX.T @ joint
        mass_anc = SX.T @ mass_x
        cond_anc = joint_anc / np.where(mass_anc > 0, mass_anc, 1.0)[:, None]
        err = np.abs(cond_leaf - cond_anc[anc[live]])
        if err.size and err.max() > tol:
            return f"{label}: stage-{t} law of the target depends on the future of the source (deviation {err.max():.3g})"
    return None


def check_bicausal(pi, A: ProcessTree, B: ProcessTree, tol: float = SOLVER_TOL) -> tuple[bool, Optional[str]]:
    """Check both causality constraints for a plan over leaf scenarios.

    Conditioning is on tree nodes, i.e. on each tree's own filtration; for
    naturally filtered trees this is conditioning on the value history.
    Returns ``(True, None)`` or ``(False, first violated condition)``.
    """
    pi = np.asarray(pi, dtype=float)
    _, pa, keys_a = A.paths()
    _, pb, keys_b = B.paths()
    if pi.shape != (len(keys_a), len(keys_b)):
        raise ValueError(f"plan shape {pi.shape} does not match leaf counts ({len(keys_a)}, {len(keys_b)})")
    if np.abs(pi.sum(axis=1) - pa).max() > tol or np.abs(pi.sum(axis=0) - pb).max() > tol:
        raise ValueError("plan marginals do not match the path laws")
    N = A.stages
    msg = _causal_one_way(pi, keys_a, keys_b, N, tol, "causal A->B")
    if msg is None:
        msg = _causal_one_way(pi.T, keys_b, keys_a, N, tol, "causal B->A")
    return msg is None, msg


# --------------------------------------------------------------------------
# adapted law


def _same_law(u: ProcessNode, v: ProcessNode, wtol: float) -> bool:
    """Exact adapted-law equality of two canonical subtrees."""
    if not np.array_equal(u.value, v.value) or len(u.children) != len(v.children):
        return False
    unused = list(range(len(v.children)))
    for cu, wu in zip(u.children, u.weights):
        for pos, k in enumerate(unused):
            if abs(wu - v.weights[k]) <= wtol and _same_law(cu, v.children[k], wtol):
                del unused[pos]
                break
        else:
            return False
    return True


class _ZMetric:
    """Squared distance on the nested state spaces Z_t, memoised per call."""

    def __init__(self):
        self.memo: dict = {}

    def sq(self, u: ProcessNode, v: ProcessNode) -> float:
        key = (id(u), id(v))
        if key not in self.memo:
            d = float(np.sum((u.value - v.value) ** 2))
            if not u.is_leaf:
                C = np.array([[self.sq(a, b) for b in v.children] for a in u.children])
                d += solve_exact_ot(u.weights, v.weights, C).value
            self.memo[key] = (d, u, v)
        return self.memo[key][0]


def _merge_siblings(nodes, weights, tol, metric):
    reps: list[ProcessNode] = []
    mass: list[float] = []
    by_value: dict[bytes, list[int]] = {}
    for node, w in zip(nodes, weights):
        hit = None
        if tol == 0:
            for r in by_value.get(node.value.tobytes(), []):
                if _same_law(reps[r], node, WEIGHT_TOL):
                    hit = r
                    break
        else:
            for r, rep in enumerate(reps):
                if math.sqrt(max(metric.sq(rep, node), 0.0)) <= tol:
                    hit = r
                    break
        if hit is None:
            by_value.setdefault(node.value.tobytes(), []).append(len(reps))
            reps.append(node)
            mass.append(float(w))
        else:
            mass[hit] += float(w)
    return tuple(reps), np.array(mass)


def adapted_law(tree: ProcessTree, merge_tol: float = 0.0) -> ProcessTree:
    """Canonical representative of the adapted law.

    Bottom-up, sibling subtrees that are adapted-law equivalent are merged and
    their weights added. With ``merge_tol == 0`` equivalence is exact (values
    bitwise equal, weights within 1e-12); with a positive tolerance siblings
    within ``merge_tol`` in the nested distance are merged greedily in sibling
    order, which is order dependent.
    """
    require_valid(tree)
    if merge_tol < 0:
        raise ValueError("merge_tol must be nonnegative")
    metric = _ZMetric()

    def canon(node: ProcessNode) -> ProcessNode:
        if node.is_leaf:
            return node
        kids = [canon(c) for c in node.children]
        kids, w = _merge_siblings(kids, node.weights, merge_tol, metric)
        return ProcessNode(node.value, w, kids)

    kids, w = _merge_siblings([canon(c) for c in tree.children], tree.weights, merge_tol, metric)
    return ProcessTree(w, kids)


CanonicalAdaptedLaw = ProcessTree


@dataclass(frozen=True)
class IPLabel:
    """Value of the information process at a node.

    ``law`` is the conditional law of the next label, stored as sorted
    ``(weight, label)`` pairs with equal labels merged; empty at stage N.
    """

    value: tuple
    law: tuple = ()


def _sort_key(lab: IPLabel):
    return (lab.value, tuple((_sort_key(l), w) for w, l in lab.law))


def _canonical_law(pairs) -> tuple:
    acc: dict[IPLabel, float] = {}
    for w, lab in pairs:
        acc[lab] = acc.get(lab, 0.0) + float(w)
    return tuple(sorted(((w, l) for l, w in acc.items()), key=lambda p: _sort_key(p[1])))


def information_process(tree: ProcessTree) -> dict[tuple, IPLabel]:
    """Labels ip_t at every node, keyed by the node's child-index path."""
    require_valid(tree)
    out: dict[tuple, IPLabel] = {}

    def label(node: ProcessNode, key: tuple) -> IPLabel:
        value = tuple(float(x) for x in node.value)
        if node.is_leaf:
            lab = IPLabel(value)
        else:
            kids = [label(c, key + (j,)) for j, c in enumerate(node.children)]
            lab = IPLabel(value, _canonical_law(zip(node.weights, kids)))
        out[key] = lab
        return lab

    for i, c in enumerate(tree.children):
        label(c, (i,))
    return out


def label_law(tree: ProcessTree) -> tuple:
    """Law of ip_1, i.e. the adapted law written in label form."""
    ip = information_process(tree)
    return _canonical_law((w, ip[(i,)]) for i, w in enumerate(tree.weights))


# --------------------------------------------------------------------------
# natural filtration and the J embedding


def _future_law(node: ProcessNode) -> dict[bytes, float]:
    out: dict[bytes, float] = {}

    def walk(n, w, hist):
        if n.is_leaf:
            key = np.array(hist).tobytes()
            out[key] = out.get(key, 0.0) + w
            return
        for c, cw in zip(n.children, n.weights):
            walk(c, w * cw, hist + [c.value])

    walk(node, 1.0, [])
    return out


def _same_future(f: dict, g: dict, wtol: float) -> bool:
    if f.keys() != g.keys():
        return False
    return all(abs(f[k] - g[k]) <= wtol for k in f)


def is_naturally_filtered(tree: ProcessTree, tol: float = 1e-12) -> bool:
    """True iff nodes sharing a value history also share the conditional law of
    the future path, so the filtration carries no information beyond the past."""
    require_valid(tree)
    levels = tree.levels()
    hist: list[np.ndarray] = [np.array([n.value for _, n in levels[0]])[:, None, :]]
    for s in range(1, len(levels)):
        parent = {k: i for i, (k, _) in enumerate(levels[s - 1])}
        rows = []
        for k, n in levels[s]:
            rows.append(np.concatenate([hist[s - 1][parent[k[:-1]]], n.value[None, :]]))
        hist.append(np.array(rows))
    for s in range(len(levels) - 1):
        H = hist[s].reshape(len(hist[s]), -1)
        D = np.max(np.abs(H[:, None, :] - H[None, :, :]), axis=2)
        futures: dict[int, dict] = {}
        for i, j in zip(*np.nonzero(np.triu(D <= tol, k=1))):
            for x in (i, j):
                if x not in futures:
                    futures[x] = _future_law(levels[s][x][1])
            if not _same_future(futures[i], futures[j], WEIGHT_TOL):
                return False
    return True


def embed_J(mu: DiscreteMeasure, stages: int) -> ProcessTree:
    """Adapted law of the naturally filtered process with path law ``mu``.

    ``mu`` lives on R^{N d}; each point is read as (x_1, ..., x_N) with x_t in R^d.
    """
    require_valid(mu)
    n, D = mu.points.shape
    if D % stages:
        raise ValueError(f"dimension {D} is not a multiple of {stages} stages")
    paths = mu.points.reshape(n, stages, D // stages)
    return adapted_law(tree_from_paths(paths, mu.weights, 0.0), 0.0)


def encode(tree: ProcessTree) -> Measure:
    """Nested measure on R^{N d} whose leaves are full value histories.

    A stage-t node (x, p) becomes the (N - t)-level measure obtained by
    prefixing x to every leaf of the encoded child law, which is the Dirac
    tensoring of the stage value used by the isometric embedding.
    """

    def enc(node: ProcessNode, hist: list) -> Measure:
        hist = hist + [node.value]
        if node.children[0].is_leaf:
            pts = np.array([np.concatenate(hist + [c.value]) for c in node.children])
            return DiscreteMeasure(pts, node.weights)
        return NestedMeasure(node.weights, tuple(enc(c, hist) for c in node.children))

    if tree.stages == 1:
        return DiscreteMeasure(np.array([c.value for c in tree.children]), tree.weights)
    return NestedMeasure(tree.weights, tuple(enc(c, []) for c in tree.children))


def verify_isometry(A: ProcessTree, B: ProcessTree) -> float:
    """|AW2(A, B) - W2(encode(law^ad A), encode(law^ad B))|."""
    from .nested import nested_w2

    _check_pair(A, B)
    lhs = aw2(A, B).value
    rhs, _ = nested_w2(encode(adapted_law(A)), encode(adapted_law(B)))
    return abs(lhs - rhs)


# --------------------------------------------------------------------------
# bi-adapted maps


@dataclass(frozen=True)
class BiadaptedMap:
    """Stagewise transport map read off a Monge-type bicausal plan.

    ``stage_maps[t]`` sends each reached stage-(t+1) node key of A to a node key
    of B; ``sources[t]`` / ``targets[t]`` hold the corresponding value histories.
    """

    stage_maps: list
    sources: list
    targets: list
    adapted: bool
    injective: list
    resolved_injective: list

    @property
    def bi_adapted(self) -> bool:
        return self.adapted and all(self.injective) and all(self.resolved_injective)


def _collapses(src: np.ndarray, dst: np.ndarray, resolution: float, factor: float) -> bool:
    """Whether two far-apart sources land within one grid cell of each other."""
    from scipy.spatial import cKDTree

    S = src.reshape(len(src), -1)
    T = dst.reshape(len(dst), -1)
    pairs = cKDTree(T).query_pairs(resolution * (1 + 1e-6), p=np.inf, output_type="ndarray")
    if len(pairs) == 0:
        return False
    dS = np.max(np.abs(S[pairs[:, 0]] - S[pairs[:, 1]]), axis=1)
    return bool(np.any(dS > factor * resolution))


def extract_biadapted_monge(
    A: ProcessTree,
    B: ProcessTree,
    result: AW2Result,
    resolution: Optional[float] = None,
    lipschitz_factor: float = 8.0,
) -> Optional[BiadaptedMap]:
    """Read a stagewise map T = (T_1, ..., T_N) off the plans of :func:`aw2`.

    Returns None unless every reached plan is of Monge type. Each stage map is
    checked for injectivity on nodes. With ``resolution`` (grid spacing of a
    discretised continuum) a stage is also flagged non-injective when sources
    more than ``lipschitz_factor * resolution`` apart are sent within one
    resolution cell of each other, i.e. the inverse cannot be Lipschitz at
    that scale.
    """
    N = A.stages
    maps: list[dict] = [dict() for _ in range(N)]
    for (ka, kb), sol in result.couplings.items():
        mm = extract_monge(sol)
        if not mm.is_monge:
            return None
        for i, j in enumerate(mm.assignment):
            if j >= 0:
                maps[len(ka)][ka + (i,)] = kb + (int(j),)

    adapted = all(maps[t - 1][ka[:-1]] == kb[:-1] for t in range(1, N) for ka, kb in maps[t].items())

    def histories(tree: ProcessTree, keys):
        out = []
        for k in keys:
            node, vals = None, []
            for idx in k:
                node = tree.children[idx] if node is None else node.children[idx]
                vals.append(node.value)
            out.append(np.concatenate(vals))
        return np.array(out)

    sources, targets, injective, resolved = [], [], [], []
    for t in range(N):
        ka = sorted(maps[t])
        kb = [maps[t][k] for k in ka]
        src, dst = histories(A, ka), histories(B, kb)
        sources.append(src)
        targets.append(dst)
        injective.append(len(set(kb)) == len(kb))
        resolved.append(True if resolution is None else not _collapses(src, dst, resolution, lipschitz_factor))
    return BiadaptedMap(maps, sources, targets, adapted, injective, resolved)
