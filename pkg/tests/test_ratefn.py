import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.differentiate import derivative
from scipy.optimize import minimize_scalar

from helpers import random_config
from switchdiff.averaging import Path, averaged_drift, solve_averaged_ode
from switchdiff.fastchain import JumpGeometry, jump_geometry, nu
from switchdiff.model import build_model
from switchdiff.ratefn import (RateOptions, _Slice, cap_rate_control, ell, fd_gradient, inner_quadratic, jump_cost,
                               local_rate, local_rate_bruteforce, min_jump_cost, path_rate, theta_objective)

ORACLE = 1 - math.sqrt(3) / 2  # min over t of (3/4) ell(t) + (1/4) ell(3t)


def _geom(rho):
    rho = np.asarray(rho, dtype=float)
    L = rho.shape[0]
    pairs = tuple((i, j) for i in range(L) for j in range(L) if i != j and rho[i, j] > 0)
    return JumpGeometry(rho=rho, zeta=float(rho.sum(axis=1).max()) + 1.0, T_set=pairs)


def test_ell_values():
    assert ell(1.0) == 0.0
    assert ell(0.0) == 1.0
    assert ell(math.e) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        ell(-0.1)


def test_inner_quadratic_examples(degenerate):
    single = build_model({"d": 1, "m": 1, "L": 1, "params": {"A": [[[2.0]]], "c0": [1]}})
    val, u, ok = inner_quadratic(single, [0.0], [1.0], [2.0])
    assert ok and val == pytest.approx(0.5, abs=1e-15) and u[0] == pytest.approx([1.0])
    val, u, ok = inner_quadratic(degenerate, [0.0], [0.5, 0.5], [0.3])
    assert not ok and val == math.inf
    val, u, ok = inner_quadratic(degenerate, [0.0], [0.65, 0.35], [0.3])
    assert ok and val == 0.0 and np.all(u == 0)


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6), L=st.integers(1, 4))
def test_inner_quadratic_constraint_and_value(seed, L):
    rng = np.random.default_rng(seed)
    model = build_model(random_config(rng, L, d=2, m=2))
    x = rng.standard_normal(2)
    pi = rng.dirichlet(np.ones(L))
    beta = rng.standard_normal(2)
    val, u, ok = inner_quadratic(model, x, pi, beta)
    assert ok
    a, b = model.diffusions(x), model.drifts(x)
    lhs = np.einsum("i,idm,im->d", pi, a, u)
    r = beta - pi @ b
    assert np.max(np.abs(lhs - r)) < 1e-10
    G = np.einsum("i,idm,iem->de", pi, a, a)
    assert val == pytest.approx(0.5 * r @ np.linalg.pinv(G) @ r, rel=1e-12)


def test_jump_cost_examples():
    g = _geom([[0, 1.0], [1.0, 0]])
    assert jump_cost(g, [0.3, 0.7], g.rho) == 0.0
    t = 1 / math.sqrt(3)
    assert jump_cost(g, [0.75, 0.25], np.array([[0, t], [3 * t, 0]])) == pytest.approx(ORACLE, abs=1e-15)
    assert jump_cost(g, [0.75, 0.25], np.array([[0, 0.0], [1.0, 0]])) == pytest.approx(0.75, abs=1e-15)


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6))
def test_jump_cost_label_permutation(seed):
    rng = np.random.default_rng(seed)
    rho = rng.random((3, 3)) + 0.1
    np.fill_diagonal(rho, 0)
    q = rng.random((3, 3)) + 0.1
    np.fill_diagonal(q, 0)
    pi = rng.dirichlet(np.ones(3))
    P = rng.permutation(3)
    a = jump_cost(_geom(rho), pi, q)
    b = jump_cost(_geom(rho[np.ix_(P, P)]), pi[P], q[np.ix_(P, P)])
    assert a == pytest.approx(b, rel=1e-13)


def test_min_jump_cost_matches_oracle():
    g = _geom([[0, 1.0], [1.0, 0]])
    val, q = min_jump_cost(g, [0.75, 0.25])
    assert val == pytest.approx(ORACLE, abs=1e-13)
    assert q[0, 1] == pytest.approx(1 / math.sqrt(3), abs=1e-10)
    assert q[1, 0] == pytest.approx(math.sqrt(3), abs=1e-10)


def test_local_rate_at_averaged_velocity(nondegenerate):
    x = np.array([0.4])
    res = local_rate(nondegenerate, x, averaged_drift(nondegenerate, x))
    assert res.feasible and res.value <= 1e-6
    assert np.allclose(res.argmin.pi, nu(nondegenerate, x), atol=1e-4)
    assert np.allclose(res.argmin.u, 0, atol=1e-3)


@pytest.mark.parametrize("beta", [-2.0, -1.0, 0.0, 1.0, 2.0])
def test_local_rate_gaussian(gaussian, beta):
    assert local_rate(gaussian, [0.3], [beta]).value == pytest.approx(beta ** 2 / 2, abs=1e-6)


def test_local_rate_degenerate(degenerate):
    res = local_rate(degenerate, [0.0], [0.5])
    assert res.feasible and res.degenerate
    assert res.value == pytest.approx(ORACLE, rel=1e-6)
    assert np.allclose(res.argmin.pi, [0.75, 0.25], atol=1e-8)
    assert res.argmin.q[0, 1] == pytest.approx(1 / math.sqrt(3), rel=1e-5)
    assert res.argmin.q[1, 0] == pytest.approx(math.sqrt(3), rel=1e-5)
    assert res.argmin.stationarity_residual() < 1e-10
    # unreachable velocities are infinitely costly
    assert local_rate(degenerate, [0.0], [1.5]).value == math.inf
    assert not local_rate(degenerate, [0.0], [1.0]).feasible


def test_bruteforce_oracles(degenerate, nondegenerate):
    x = np.array([0.2])
    best, res = local_rate_bruteforce(nondegenerate, x, averaged_drift(nondegenerate, x), n=21)
    assert best == pytest.approx(0.0, abs=1e-12)
    best, res = local_rate_bruteforce(degenerate, [0.0], [0.5], n=1000)
    assert best == pytest.approx(ORACLE, abs=1e-8)
    for beta in (-0.5, 0.3, 1.2):
        best, _ = local_rate_bruteforce(nondegenerate, x, [beta], n=41)
        assert best >= local_rate(nondegenerate, x, [beta]).value - 1e-6


def test_adjoint_gradient_matches_independent_differences(nondegenerate):
    rng = np.random.default_rng(0)
    model = build_model(random_config(rng, 3, d=2, m=2))
    for _ in range(10):
        x = rng.standard_normal(2)
        beta = rng.standard_normal(2)
        sl = _Slice(model, x, beta, RateOptions())
        theta = rng.uniform(-1, 1, sl.n)
        g = sl.adjoint_grad(theta)
        for k in range(sl.n):
            def f(t, k=k):
                out = []
                for tk in np.atleast_1d(t).ravel():
                    th = theta.copy()
                    th[k] = tk
                    out.append(sl.objective(th))
                return np.reshape(out, np.shape(t))
            ref = derivative(f, theta[k]).df
            assert g[k] == pytest.approx(ref, rel=1e-5, abs=1e-9)
        # the plain central-difference option agrees too
        assert np.allclose(fd_gradient(theta_objective(model, x, beta), theta), g, rtol=1e-5, atol=1e-8)


def test_fd_option_reaches_same_value(nondegenerate):
    a = local_rate(nondegenerate, [0.1], [0.8])
    b = local_rate(nondegenerate, [0.1], [0.8], RateOptions(gradient="fd"))
    assert a.value == pytest.approx(b.value, abs=1e-7)


def test_path_rate_examples(nondegenerate, degenerate):
    xi = solve_averaged_ode(nondegenerate, [0.0], 1.0, 0.05)
    assert path_rate(nondegenerate, xi, RateOptions(n_starts=1)).value <= 1e-5
    straight = Path.straight([0.0], [0.5], 1.0, 4)
    assert path_rate(degenerate, straight).value == pytest.approx(ORACLE, rel=1e-6)
    bad = Path.straight([0.0], [1.5], 1.0, 4)
    res = path_rate(degenerate, bad)
    assert res.value == math.inf and not res.feasible and res.bad_interval == 0


def test_path_rate_refinement_and_additivity(nondegenerate):
    f = lambda t: 0.3 * np.sin(2 * t) + 0.6 * t
    opts = RateOptions(n_starts=2)
    coarse = Path(np.linspace(0, 1, 21), f(np.linspace(0, 1, 21)))
    fine = Path(np.linspace(0, 1, 41), f(np.linspace(0, 1, 41)))
    Ic, If = path_rate(nondegenerate, coarse, opts).value, path_rate(nondegenerate, fine, opts).value
    assert abs(Ic - If) < 5e-3 * If
    g = np.linspace(0, 1, 21)
    left = Path(g[:11], f(g[:11]))
    right = Path(g[10:], f(g[10:]))
    whole = path_rate(nondegenerate, coarse, opts, warm=False).value
    parts = path_rate(nondegenerate, left, opts, warm=False).value + path_rate(nondegenerate, right, opts,
                                                                                warm=False).value
    assert whole == pytest.approx(parts, rel=1e-9)


def test_cap_rate_control_examples():
    g = _geom([[0, 1.0], [1.0, 0]])
    alpha, capped, cost = cap_rate_control(g, [0.5, 0.5], g.rho)
    assert cost == pytest.approx(0.0, abs=1e-14) and np.allclose(capped, g.rho)
    q = np.array([[0, 2.0], [2.0, 0]])
    alpha, capped, cost = cap_rate_control(g, [0.5, 0.5], q)
    v = 1 + 2.0
    comp = g.zeta - 1.0

    def c(a):
        return ell(a * 2.0 / v) + comp * ell(a / v)

    ref = minimize_scalar(c, bracket=(0.5, 2, 8), method="golden", tol=1e-12)
    assert alpha == pytest.approx(ref.x, abs=1e-8)
    assert cost == pytest.approx(c(alpha), rel=1e-14)


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6), L=st.integers(2, 4))
def test_cap_rate_control_never_costs_more(seed, L):
    rng = np.random.default_rng(seed)
    model = build_model(random_config(rng, L))
    g = jump_geometry(model, rng.standard_normal(1))
    q = np.where(g.rho > 0, g.rho * np.exp(rng.uniform(-2, 2, g.rho.shape)), 0.0)
    pi = rng.dirichlet(np.ones(L))
    _, _, cost = cap_rate_control(g, pi, q)
    assert cost <= jump_cost(g, pi, q) + 1e-12
