import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nestedot.measures import (
    DiscreteMeasure,
    NestedMeasure,
    dirac_tower,
    iterated_intensity,
    nested_equal,
    random_nested,
)
from nestedot.nested import (
    assemble_ncoupling,
    brute_force_joint,
    brute_force_nested_mc,
    nested_mc,
    nested_w2,
    nested_w2_report,
    self_mc,
)
from nestedot.otcore import mc


def depth2_example():
    d = DiscreteMeasure.dirac
    P = NestedMeasure([0.5, 0.5], (d([0.0]), d([1.0])))
    Q = NestedMeasure([0.5, 0.5], (d([0.0]), d([2.0])))
    return P, Q


def test_depth2_example():
    P, Q = depth2_example()
    assert nested_mc(P, Q)[0] == pytest.approx(1.0)
    assert nested_mc(P, P)[0] == pytest.approx(0.5)
    assert nested_mc(Q, Q)[0] == pytest.approx(2.0)
    r = nested_w2_report(P, Q)
    assert r.squared == pytest.approx(0.5) and r.identity_residual <= 1e-12
    nc = assemble_ncoupling(P, Q)
    assert nc.score() == pytest.approx(1.0)


def test_single_child_top_level():
    rng = np.random.default_rng(0)
    p, q = random_nested(rng, 2, 2), random_nested(rng, 2, 2)
    assert nested_mc(NestedMeasure([1.0], (p,)), NestedMeasure([1.0], (q,)))[0] == pytest.approx(nested_mc(p, q)[0])


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_dirac_towers(depth):
    x, y = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    P, Q = dirac_tower(x, depth), dirac_tower(y, depth)
    assert nested_mc(P, Q)[0] == pytest.approx(x @ y)
    assert nested_w2(P, Q)[0] == pytest.approx(np.linalg.norm(x - y))
    assert assemble_ncoupling(P, Q).score() == pytest.approx(x @ y)
    if depth <= 3:
        assert brute_force_nested_mc(P, Q) == pytest.approx(x @ y)


def test_w2_self_zero():
    P = random_nested(np.random.default_rng(1), 3, 2)
    assert nested_w2(P, P)[0] == pytest.approx(0.0, abs=1e-7)


def test_depth_mismatch():
    with pytest.raises(ValueError):
        nested_mc(dirac_tower([0.0], 2), dirac_tower([0.0], 3))


def test_brute_force_examples():
    x = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])
    y = DiscreteMeasure([[3.0], [-1.0]], [0.5, 0.5])
    assert brute_force_nested_mc(x, y) == pytest.approx(max(0 * 3 + 1 * -1, 0 * -1 + 1 * 3) / 2)
    rng = np.random.default_rng(2)
    for _ in range(10):
        P = random_nested(rng, 2, 1, (2, 2), uniform=True)
        Q = random_nested(rng, 2, 1, (2, 2), uniform=True)
        assert brute_force_joint(P, Q) == pytest.approx(brute_force_nested_mc(P, Q), abs=1e-12)
    with pytest.raises(ValueError):
        brute_force_nested_mc(random_nested(rng, 1, 1, (5, 5), uniform=True), random_nested(rng, 1, 1, (5, 5), uniform=True))
    with pytest.raises(ValueError):
        brute_force_nested_mc(random_nested(rng, 2, 1, (2, 2)), random_nested(rng, 2, 1, (2, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 3), st.integers(1, 3))
def test_identity_and_coupling(seed, depth, dim):
    rng = np.random.default_rng(seed)
    P, Q = random_nested(rng, depth, dim, (1, 4)), random_nested(rng, depth, dim, (1, 4))
    r = nested_w2_report(P, Q)
    assert r.identity_residual <= 1e-8
    nc = assemble_ncoupling(P, Q)
    assert nc.score() == pytest.approx(nested_mc(P, Q)[0], abs=1e-8)
    assert nested_equal(nc.project(0), P, atol=1e-12)
    assert nested_equal(nc.project(1), Q, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 3))
def test_dirac_embedding_and_intensity_bound(seed, depth):
    rng = np.random.default_rng(seed)
    P, Q = random_nested(rng, depth, 2), random_nested(rng, depth, 2)
    v = nested_mc(P, Q)[0]
    assert nested_mc(NestedMeasure([1.0], (P,)), NestedMeasure([1.0], (Q,)))[0] == pytest.approx(v, abs=1e-12)
    assert v <= mc(iterated_intensity(P), iterated_intensity(Q))[0] + 1e-9
    assert self_mc(P) == pytest.approx(nested_mc(P, P)[0], abs=1e-9)


def test_cache_transparency():
    rng = np.random.default_rng(3)
    P, Q = random_nested(rng, 3, 2), random_nested(rng, 3, 2)
    a = nested_mc(P, Q, use_cache=True)[0]
    b = nested_mc(P, Q, use_cache=False)[0]
    assert a == b
