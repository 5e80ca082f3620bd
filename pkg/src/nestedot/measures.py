"""Discrete, nested and process-valued probability objects.

A depth-1 nested measure *is* a :class:`DiscreteMeasure`; deeper levels are
:class:`NestedMeasure` trees whose children share a common depth. Scenario
trees of adapted processes are :class:`ProcessTree` objects.

All containers are frozen and hold read-only arrays. Construction performs
shape coercion only; invariant checks are reported by :func:`validate` and
enforced by the operations through :func:`require_valid`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np

WEIGHT_TOL = 1e-12
SOLVER_TOL = 1e-9


class InvalidMeasureError(ValueError):
    """Raised when an operation receives an object violating its invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _frozen(a, dtype=float, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finitely supported probability measure on R^d.

    ``points`` has shape (n, d); one-dimensional input is read as n points in R.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen(self.points, ndim=2))
        object.__setattr__(self, "weights", _frozen(self.weights).reshape(-1))

    @property
    def depth(self) -> int:
        return 1

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def __len__(self) -> int:
        return len(self.weights)

    def second_moment(self) -> float:
        return float(self.weights @ np.einsum("ij,ij->i", self.points, self.points))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    @classmethod
    def dirac(cls, x) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])

    @classmethod
    def uniform(cls, points) -> "DiscreteMeasure":
        pts = np.asarray(points, dtype=float)
        n = len(pts)
        return cls(pts, np.full(n, 1.0 / n))


@dataclass(frozen=True, eq=False)
class NestedMeasure:
    """Element of the iterated Wasserstein space of depth >= 2.

    ``children`` are either all :class:`DiscreteMeasure` (depth 2) or all
    :class:`NestedMeasure` of depth ``self.depth - 1``.
    """

    weights: np.ndarray
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights).reshape(-1))
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def depth(self) -> int:
        return 1 + self.children[0].depth

    @property
    def dim(self) -> int:
        return self.children[0].dim

    def __len__(self) -> int:
        return len(self.weights)


Measure = Union[DiscreteMeasure, NestedMeasure]


@dataclass(frozen=True, eq=False)
class ProcessNode:
    """A node of a scenario tree: the process value at this node plus transition
    weights to its children (empty at stage N)."""

    value: np.ndarray
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    children: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "value", _frozen(self.value).reshape(-1))
        object.__setattr__(self, "weights", _frozen(self.weights).reshape(-1))
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def is_leaf(self) -> bool:
        return len(self.children) == 0

    @property
    def height(self) -> int:
        """Number of stages from this node down to the leaves, inclusive."""
        return 1 if self.is_leaf else 1 + self.children[0].height


@dataclass(frozen=True, eq=False)
class ProcessTree:
    """Scenario tree of an adapted R^d-valued process with N stages.

    The root carries no value; ``weights`` is the law of the stage-1 node.
    """

    weights: np.ndarray
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights).reshape(-1))
        object.__setattr__(self, "children", tuple(self.children))

    @property
    def stages(self) -> int:
        return self.children[0].height

    @property
    def dim(self) -> int:
        return int(self.children[0].value.shape[0])

    def levels(self) -> list[list[tuple[tuple[int, ...], ProcessNode]]]:
        """Nodes grouped by stage (index 0 is stage 1), in breadth-first order.

        Each entry is ``(key, node)`` with ``key`` the child-index path from the
        root. Children of a node occupy a contiguous slice of the next level.
        """
        out = [[((i,), c) for i, c in enumerate(self.children)]]
        while out[-1] and not out[-1][0][1].is_leaf:
            nxt = []
            for key, node in out[-1]:
                nxt.extend((key + (j,), c) for j, c in enumerate(node.children))
            out.append(nxt)
        return out

    def paths(self) -> tuple[np.ndarray, np.ndarray, list[tuple[int, ...]]]:
        """Leaf scenarios: values (L, N, d), probabilities (L,), leaf keys."""
        vals, probs, keys = [], [], []

        def walk(node, w, hist, key):
            hist = hist + [node.value]
            if node.is_leaf:
                vals.append(np.stack(hist))
                probs.append(w)
                keys.append(key)
                return
            for j, (c, cw) in enumerate(zip(node.children, node.weights)):
                walk(c, w * cw, hist, key + (j,))

        for i, (c, w) in enumerate(zip(self.children, self.weights)):
            walk(c, float(w), [], (i,))
        return np.array(vals), np.array(probs), keys

    def path_measure(self) -> DiscreteMeasure:
        """Law of the whole path as a measure on R^{N d} (no deduplication)."""
        vals, probs, _ = self.paths()
        return DiscreteMeasure(vals.reshape(len(vals), -1), probs)


# --------------------------------------------------------------------------
# validation


def _check_weights(w: np.ndarray, where: str, tol: float) -> list[str]:
    out = []
    if not np.all(np.isfinite(w)):
        out.append(f"{where}: non-finite weights")
        return out
    if np.any(w < 0):
        out.append(f"{where}: negative weights")
    s = float(np.sum(w))
    if abs(s - 1.0) > tol:
        out.append(f"{where}: weights sum to {s:.12g}")
    return out


def _validate_discrete(m: DiscreteMeasure, where: str, tol: float) -> list[str]:
    out = []
    if m.points.ndim != 2 or m.points.shape[1] < 1:
        out.append(f"{where}: points must be an (n, d) array with d >= 1")
    elif m.points.shape[0] != m.weights.shape[0]:
        out.append(f"{where}: {m.points.shape[0]} points but {m.weights.shape[0]} weights")
    if len(m.weights) == 0:
        out.append(f"{where}: empty measure")
    if not np.all(np.isfinite(m.points)):
        out.append(f"{where}: non-finite points")
    out.extend(_check_weights(m.weights, where, tol))
    return out


def _validate_nested(m, where: str, tol: float) -> list[str]:
    if isinstance(m, DiscreteMeasure):
        return _validate_discrete(m, where, tol)
    if not isinstance(m, NestedMeasure):
        return [f"{where}: unexpected node type {type(m).__name__}"]
    out = []
    if len(m.children) == 0:
        return [f"{where}: nested node without children"]
    if len(m.children) != len(m.weights):
        out.append(f"{where}: {len(m.children)} children but {len(m.weights)} weights")
    out.extend(_check_weights(m.weights, where, tol))
    kinds = {type(c) for c in m.children}
    if len(kinds) > 1:
        out.append(f"{where}: ragged depth")
        return out
    for i, c in enumerate(m.children):
        out.extend(_validate_nested(c, f"{where}/{i}", tol))
    if not out:
        depths = {c.depth for c in m.children}
        dims = {c.dim for c in m.children}
        if len(depths) > 1:
            out.append(f"{where}: ragged depth")
        if len(dims) > 1:
            out.append(f"{where}: children of mixed dimension {sorted(dims)}")
    return out


def _validate_process(t: ProcessTree, tol: float) -> list[str]:
    out = []
    if len(t.children) == 0:
        return ["root: no stage-1 nodes"]
    if len(t.children) != len(t.weights):
        out.append("root: children/weights length mismatch")
    out.extend(_check_weights(t.weights, "root", tol))
    heights, dims = set(), set()

    def walk(node: ProcessNode, where: str):
        dims.add(node.value.shape[0])
        if not np.all(np.isfinite(node.value)):
            out.append(f"{where}: non-finite value")
        if node.is_leaf:
            heights.add(len(where.split("/")) - 1)
            if len(node.weights):
                out.append(f"{where}: leaf carries transition weights")
            return
        if len(node.children) != len(node.weights):
            out.append(f"{where}: children/weights length mismatch")
        out.extend(_check_weights(node.weights, where, tol))
        for j, c in enumerate(node.children):
            walk(c, f"{where}/{j}")

    for i, c in enumerate(t.children):
        walk(c, f"root/{i}")
    if len(heights) > 1:
        out.append(f"leaves at different stages {sorted(heights)}")
    if len(dims) > 1:
        out.append(f"values of mixed dimension {sorted(dims)}")
    return out


def validate(m, tol: float = WEIGHT_TOL) -> list[str]:
    """List the invariant violations of ``m`` (empty when valid). Never raises."""
    try:
        if isinstance(m, ProcessTree):
            return _validate_process(m, tol)
        return _validate_nested(m, "root", tol)
    except Exception as exc:  # malformed beyond inspection
        return [f"root: malformed object ({exc})"]


def require_valid(*objs, tol: float = WEIGHT_TOL) -> None:
    problems = []
    for o in objs:
        problems.extend(validate(o, tol))
    if problems:
        raise InvalidMeasureError(problems)


# --------------------------------------------------------------------------
# constructors and structural helpers


def as_nested(m, depth: int) -> Measure:
    """Wrap ``m`` in Dirac layers until it has the requested depth."""
    while m.depth < depth:
        m = NestedMeasure([1.0], (m,))
    return m


def dirac_tower(x, depth: int) -> Measure:
    """The nested Dirac measure delta_{delta_{...delta_x}} of the given depth."""
    return as_nested(DiscreteMeasure.dirac(x), depth)


def pushforward(m: Measure, f: Callable[[np.ndarray], np.ndarray]) -> Measure:
    """Apply the point map ``f`` (acting row-wise on an (n, d) array) at the leaves."""
    if isinstance(m, DiscreteMeasure):
        return DiscreteMeasure(f(np.array(m.points)), m.weights)
    return NestedMeasure(m.weights, tuple(pushforward(c, f) for c in m.children))


def nested_equal(a: Measure, b: Measure, atol: float = 0.0) -> bool:
    """Node-for-node equality of two trees (same order, values within atol)."""
    if type(a) is not type(b) or len(a.weights) != len(b.weights):
        return False
    if not np.allclose(a.weights, b.weights, rtol=0, atol=atol):
        return False
    if isinstance(a, DiscreteMeasure):
        return a.points.shape == b.points.shape and np.allclose(a.points, b.points, rtol=0, atol=atol)
    return all(nested_equal(x, y, atol) for x, y in zip(a.children, b.children))


def _intensity(m: NestedMeasure) -> Measure:
    kids = m.children
    if isinstance(kids[0], DiscreteMeasure):
        pts = np.concatenate([c.points for c in kids])
        w = np.concatenate([wi * c.weights for wi, c in zip(m.weights, kids)])
        return DiscreteMeasure(pts, w)
    grand = [g for c in kids for g in c.children]
    w = np.concatenate([wi * c.weights for wi, c in zip(m.weights, kids)])
    return NestedMeasure(w, tuple(grand))


def intensity(m: Measure) -> Measure:
    """Flatten one level: I P = integral of p dP(p). Identity on depth 1."""
    require_valid(m)
    if isinstance(m, DiscreteMeasure):
        return m
    return _intensity(m)


def iterated_intensity(m: Measure) -> DiscreteMeasure:
    """I^{N-1} P: the plain measure on R^d obtained by flattening every level."""
    require_valid(m)
    while isinstance(m, NestedMeasure):
        m = _intensity(m)
    return m


def random_nested(
    rng: np.random.Generator,
    depth: int,
    dim: int,
    fanout: tuple[int, int] = (2, 3),
    uniform: bool = False,
    scale: float = 1.0,
) -> Measure:
    """Random tree with fan-out drawn in ``fanout`` (inclusive) and Gaussian atoms."""
    k = int(rng.integers(fanout[0], fanout[1] + 1))
    if uniform:
        w = np.full(k, 1.0 / k)
    else:
        w = rng.random(k) + 0.1
        w = w / w.sum()
    if depth == 1:
        return DiscreteMeasure(scale * rng.standard_normal((k, dim)), w)
    return NestedMeasure(w, tuple(random_nested(rng, depth - 1, dim, fanout, uniform, scale) for _ in range(k)))


def random_process_tree(
    rng: np.random.Generator,
    stages: int,
    dim: int,
    fanout: tuple[int, int] = (1, 3),
    integer_values: bool = False,
) -> ProcessTree:
    """Random scenario tree; ``integer_values`` draws small integers (forces ties)."""

    def draw_value():
        if integer_values:
            return rng.integers(-2, 3, size=dim).astype(float)
        return rng.standard_normal(dim)

    def draw_weights(k):
        w = rng.random(k) + 0.1
        return w / w.sum()

    def node(stage):
        v = draw_value()
        if stage == stages:
            return ProcessNode(v)
        k = int(rng.integers(fanout[0], fanout[1] + 1))
        return ProcessNode(v, draw_weights(k), tuple(node(stage + 1) for _ in range(k)))

    k = int(rng.integers(max(fanout[0], 1), fanout[1] + 1))
    return ProcessTree(draw_weights(k), tuple(node(1) for _ in range(k)))


def chain_tree(path) -> ProcessTree:
    """Deterministic process following ``path`` (shape (N, d) or (N,))."""
    path = np.asarray(path, dtype=float)
    if path.ndim == 1:
        path = path[:, None]
    node = ProcessNode(path[-1])
    for v in path[-2::-1]:
        node = ProcessNode(v, [1.0], (node,))
    return ProcessTree([1.0], (node,))


def tree_from_paths(paths, weights=None, merge_tol: float = 0.0) -> ProcessTree:
    """Build a scenario tree from sampled paths by successive history merging.

    Paths whose stage-t histories agree within ``merge_tol`` in sup-norm (against
    the first path that opened the node) share the stage-t node. A node's value
    is the weighted mean of the merged stage values, which is exact when
    ``merge_tol`` is 0.

    Parameters
    ----------
    paths : array_like, shape (S, N) or (S, N, d)
    weights : array_like, shape (S,), optional
        Scenario probabilities; normalised to sum to one. Uniform by default.
    merge_tol : float
    """
    paths = np.asarray(paths, dtype=float)
    if paths.size == 0 or len(paths) == 0:
        raise ValueError("empty path set")
    if paths.ndim == 2:
        paths = paths[:, :, None]
    if paths.ndim != 3:
        raise ValueError("paths must have shape (S, N) or (S, N, d)")
    if merge_tol < 0:
        raise ValueError("merge_tol must be nonnegative")
    if not np.all(np.isfinite(paths)):
        raise ValueError("non-finite path values")
    S, N, _ = paths.shape
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if len(w) != S or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative, one per path, with positive total")
    w = w / w.sum()

    def build(idx: np.ndarray, t: int) -> tuple[list[ProcessNode], np.ndarray]:
        groups: list[list[int]] = []
        reps: list[np.ndarray] = []
        for i in idx:
            hist = paths[i, : t + 1]
            for g, rep in zip(groups, reps):
                if np.max(np.abs(hist - rep)) <= merge_tol:
                    g.append(i)
                    break
            else:
                groups.append([i])
                reps.append(hist)
        nodes, masses = [], []
        for g in groups:
            gw = w[g]
            mass = gw.sum()
            value = paths[g[0], t] if mass == 0 else (gw @ paths[g, t]) / mass
            if np.all(paths[g, t] == paths[g[0], t]):
                value = paths[g[0], t]
            if t == N - 1:
                nodes.append(ProcessNode(value))
            else:
                kids, kid_mass = build(np.array(g), t + 1)
                kw = kid_mass / kid_mass.sum() if kid_mass.sum() > 0 else np.full(len(kids), 1.0 / len(kids))
                nodes.append(ProcessNode(value, kw, tuple(kids)))
            masses.append(mass)
        return nodes, np.array(masses)

    nodes, masses = build(np.arange(S), 0)
    return ProcessTree(masses / masses.sum(), tuple(nodes))


# --------------------------------------------------------------------------
# serialization


def measure_to_dict(m: Measure) -> dict:
    if isinstance(m, DiscreteMeasure):
        return {"depth": 1, "weights": m.weights.tolist(), "points": m.points.tolist()}
    return {
        "depth": m.depth,
        "weights": m.weights.tolist(),
        "children": [measure_to_dict(c) for c in m.children],
    }


def measure_from_dict(d: dict) -> Measure:
    if "points" in d:
        return DiscreteMeasure(np.array(d["points"], dtype=float), d["weights"])
    if "children" not in d:
        raise ValueError("nested-measure node needs 'points' or 'children'")
    return NestedMeasure(d["weights"], tuple(measure_from_dict(c) for c in d["children"]))


def process_to_dict(t: ProcessTree) -> dict:
    def node(n: ProcessNode) -> dict:
        out = {"value": n.value.tolist()}
        if not n.is_leaf:
            out["weights"] = n.weights.tolist()
            out["children"] = [node(c) for c in n.children]
        return out

    return {"stages": t.stages, "weights": t.weights.tolist(), "children": [node(c) for c in t.children]}


def process_from_dict(d: dict) -> ProcessTree:
    def node(x: dict) -> ProcessNode:
        kids = tuple(node(c) for c in x.get("children", []))
        return ProcessNode(x["value"], x.get("weights", []), kids)

    return ProcessTree(d["weights"], tuple(node(c) for c in d["children"]))


def to_dict(obj) -> dict:
    if isinstance(obj, ProcessTree):
        return process_to_dict(obj)
    return measure_to_dict(obj)


def from_dict(d: dict):
    """Decode either JSON schema; process trees are recognised by ``stages``."""
    if "stages" in d:
        return process_from_dict(d)
    return measure_from_dict(d)


def dumps(obj) -> str:
    return json.dumps(to_dict(obj))


def loads(s: str):
    return from_dict(json.loads(s))


def save(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def load(path):
    return loads(Path(path).read_text(encoding="utf-8"))


def write_paths_csv(path, paths, weights=None) -> None:
    """Write scenarios with header ``w,x1_1..x1_d,...,xN_1..xN_d``."""
    paths = np.asarray(paths, dtype=float)
    if paths.ndim == 2:
        paths = paths[:, :, None]
    S, N, d = paths.shape
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, dtype=float)
    header = ["w"] + [f"x{t + 1}_{k + 1}" for t in range(N) for k in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for wi, p in zip(w, paths):
            writer.writerow([repr(float(wi))] + [repr(float(v)) for v in p.reshape(-1)])


def read_paths_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_paths_csv`: returns paths (S, N, d) and weights (S,)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    if header[0] != "w":
        raise ValueError(f"{path}: first column must be 'w'")
    cols = header[1:]
    stages = sorted({int(c[1:].split("_")[0]) for c in cols})
    N, d = len(stages), len(cols) // len(stages)
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), -1)
    return data[:, 1:].reshape(len(body), N, d), data[:, 0]


def iter_nodes(m: Measure) -> Iterable[Measure]:
    yield m
    if isinstance(m, NestedMeasure):
        for c in m.children:
            yield from iter_nodes(c)
