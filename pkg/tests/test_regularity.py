import math

import numpy as np
import pytest
from scipy.optimize import minimize

from oracles import lp_transport, planted_tau_grid

from nestedot.measures import DiscreteMeasure
from nestedot.regularity import (
    TAU_ZERO,
    SamplerSpec,
    TargetSpec,
    _ball_target,
    conditional_var_hat,
    monge_rate_experiment,
    solve_tau,
    tau,
    tau_R,
    var_hat,
)
from nestedot.rng import stream

T1 = math.tanh(1.0) ** 2


def planted():
    mu = DiscreteMeasure([[0.0, 1.0], [0.0, -1.0]], [0.5, 0.5])
    nu = DiscreteMeasure([[1.0, 0.0], [-1.0, 0.0]], [0.5, 0.5])
    return mu, nu


def test_var_hat_examples():
    assert var_hat(DiscreteMeasure.dirac([3.0, -1.0])) == 0.0
    assert var_hat(DiscreteMeasure([[-1.0], [1.0]], [0.5, 0.5])) == pytest.approx(T1, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        w = rng.random(n) + 0.1
        nu = DiscreteMeasure(rng.standard_normal((n, 3)), w / w.sum())
        assert var_hat(nu) > 0


def test_var_hat_brute_force():
    # Var(rho) = sum_jk w_j w_k |f(x_j) - f(x_k)|^2 computed pairwise
    rng = np.random.default_rng(1)
    nu = DiscreteMeasure(rng.standard_normal((4, 2)), [0.1, 0.2, 0.3, 0.4])
    F = np.tanh(nu.points)
    w = nu.weights
    want = sum(2.0 ** -(n + 1) * sum(w[j] * w[k] * (F[j, n] - F[k, n]) ** 2 for j in range(4) for k in range(4)) for n in range(2))
    assert var_hat(nu) == pytest.approx(want, abs=1e-15)


def test_tau_dirac_and_unique():
    d = DiscreteMeasure.dirac([0.0])
    assert tau(d, d) == 0.0
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = 4
        mu = DiscreteMeasure(rng.standard_normal((n, 1)), np.full(n, 0.25))
        nu = DiscreteMeasure(rng.standard_normal((n, 1)), np.full(n, 0.25))
        r = solve_tau(mu, nu)
        assert r.value < 1e-7
        # optimal plan is a permutation: every row a Dirac
        assert np.all((r.coupling > 1e-12).sum(axis=1) == 1)


def test_planted_instance():
    mu, nu = planted()
    r = solve_tau(mu, nu)
    assert r.face_size == 4
    assert r.value == pytest.approx(planted_tau_grid(nu.points), abs=1e-4)
    assert r.value == pytest.approx(T1, abs=1e-9)
    assert r.value > 0.1 * var_hat(nu)
    assert np.allclose(r.coupling, 0.25, atol=1e-6)
    assert solve_tau(mu, nu, cost="inner").value == pytest.approx(r.value, abs=1e-9)


def test_monge_tau_zero_and_row_dirac():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mu = DiscreteMeasure(rng.standard_normal((3, 2)), [0.2, 0.3, 0.5])
        nu = DiscreteMeasure(rng.standard_normal((4, 2)), [0.25] * 4)
        r = solve_tau(mu, nu)
        if r.value < TAU_ZERO:
            assert conditional_var_hat(r.coupling, nu) < TAU_ZERO


def test_permutation_invariance():
    mu, nu = planted()
    rng = np.random.default_rng(4)
    for _ in range(5):
        p, q = rng.permutation(2), rng.permutation(2)
        a = DiscreteMeasure(mu.points[p], mu.weights[p])
        b = DiscreteMeasure(nu.points[q], nu.weights[q])
        assert tau(a, b) == pytest.approx(tau(mu, nu), abs=1e-12)
    for _ in range(5):
        x = DiscreteMeasure(rng.integers(-2, 3, (5, 1)).astype(float), [0.2] * 5)
        y = DiscreteMeasure(rng.integers(-2, 3, (5, 1)).astype(float), [0.2] * 5)
        p = rng.permutation(5)
        assert tau(DiscreteMeasure(x.points[p], x.weights), y) == pytest.approx(tau(x, y), abs=1e-7)


def test_usc_along_perturbations():
    mu, nu = planted()
    limit = tau(mu, nu)
    seq = []
    for k in range(1, 8):
        eps = 10.0 ** -k
        mu_k = DiscreteMeasure([[eps, 1.0], [0.0, -1.0]], [0.5, 0.5])
        seq.append(tau(mu_k, nu))
    assert max(seq) <= limit + 1e-7
    # a perturbation breaks the tie, so the optimiser becomes Monge
    assert all(t < TAU_ZERO for t in seq)


def brute_face_max(mu, nu, C):
    """SLSQP over all plans with cost within 1e-10 of the LP optimum, from many starts."""
    n, m = C.shape
    a, b = mu.weights, nu.weights
    opt = lp_transport(a, b, C)
    F = np.tanh(nu.points).T
    c = 2.0 ** -np.arange(1, nu.dim + 1)

    def neg(x):
        pi = x.reshape(n, m)
        M = pi @ F.T
        return -float(pi.sum(0) @ (2 * c @ (F * F)) - 2 * np.sum((M * M) / a[:, None] @ c))

    cons = [
        {"type": "eq", "fun": lambda x: x.reshape(n, m).sum(1) - a},
        {"type": "eq", "fun": lambda x: x.reshape(n, m).sum(0) - b},
        {"type": "ineq", "fun": lambda x: opt + 1e-10 - float(np.sum(x * C.ravel()))},
    ]
    best = 0.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        x0 = rng.random(n * m)
        res = minimize(neg, x0 / x0.sum(), constraints=cons, bounds=[(0, None)] * (n * m), method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
        if res.success:
            best = max(best, -res.fun)
    return best


def test_fw_matches_independent_optimizer_on_large_face():
    # symmetric source and target: squared-cost optimal face has several dimensions
    mu = DiscreteMeasure([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], [0.25] * 4)
    nu = DiscreteMeasure([[0.0, 0.0], [0.5, 0.0], [-0.5, 0.0]], [0.5, 0.25, 0.25])
    r = solve_tau(mu, nu)
    C = ((mu.points[:, None, :] - nu.points[None, :, :]) ** 2).sum(-1)
    assert r.face_size > 4
    assert r.value == pytest.approx(brute_face_max(mu, nu, C), abs=1e-6)
    assert r.gap < 1e-7


def _probe(seed, k, dim, cap):
    rng = stream(seed, k)
    return _ball_target(rng, int(rng.integers(2, 6)), dim, cap)


def test_tau_R():
    # a Dirac source splits mass onto every atom: tau is the target's spread
    d = DiscreteMeasure.dirac([0.0, 0.0])
    r = tau_R(d, 2.0, targets=8, seed=0)
    assert r.value == pytest.approx(max(var_hat(_probe(0, k, 2, 2.0)) for k in range(8)), abs=1e-12)
    # the reverse direction is always Monge
    assert all(tau(_probe(0, k, 2, 2.0), d) == 0.0 for k in range(8))
    mu, nu = planted()
    base = tau_R(mu, 1.5, targets=8, seed=0)
    with_plant = tau_R(mu, 1.5, targets=8, seed=0, planted=[nu])
    assert with_plant.value == pytest.approx(T1, abs=1e-9)
    assert with_plant.argmax == 8
    assert with_plant.value >= base.value
    vals = [tau_R(mu, R, targets=12, seed=3, radius_cap=4.0).value for R in (0.5, 1.0, 2.0, 4.0)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        tau_R(mu, 0.0)


def test_rate_controls():
    mu, nu = planted()
    planted_rate = monge_rate_experiment([mu, mu], 2, [nu], 3, seed=0)
    assert planted_rate.rate == 0.0
    dirac_rate = monge_rate_experiment(SamplerSpec("brownian", grid=20), 4, TargetSpec("dirac"), 3, seed=1)
    assert dirac_rate.rate == 1.0
    assert len(dirac_rate.records) == 12


def test_rate_deterministic_across_workers():
    spec, tgt = SamplerSpec("brownian", grid=20), TargetSpec("random", atoms=5)
    a = monge_rate_experiment(spec, 3, tgt, 2, seed=7)
    b = monge_rate_experiment(spec, 3, tgt, 2, seed=7, workers=3)
    assert a.to_csv_rows() == b.to_csv_rows()
    assert a.to_csv_rows()[0][:3] == ["sample", "target", "tau"]


@pytest.mark.parametrize("kind", ["sheet", "qwiener"])
def test_other_samplers_run(kind):
    r = monge_rate_experiment(SamplerSpec(kind, grid=10), 1, TargetSpec("random", atoms=5), 2, seed=0)
    assert 0.0 <= r.rate <= 1.0
