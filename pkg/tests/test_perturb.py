import numpy as np
import pytest

from switchdiff.averaging import Path
from switchdiff.fastchain import rate_matrix, stationary
from switchdiff.perturb import (PerturbError, TripleTables, _construct, integrate_closed_loop, perturb_triple,
                                stationary_map_rho, triple_along_path, uniqueness_check, verify_membership,
                                zero_cost_triple)
from switchdiff.ratefn import RateOptions


@pytest.fixture(scope="module")
def zero_cost(nondegenerate):
    return zero_cost_triple(nondegenerate, [0.0], 1.0, 0.01)


@pytest.fixture(scope="module")
def perturbed(nondegenerate, zero_cost):
    path, tables = zero_cost
    return perturb_triple(nondegenerate, path, tables, gamma=0.1)


def test_zero_cost_triple_membership(nondegenerate, zero_cost):
    rep = verify_membership(nondegenerate, *zero_cost)
    assert rep.dynamics_residual <= 1e-8 and rep.stationarity_residual <= 1e-10


def test_membership_detects_corrupted_pi(nondegenerate, zero_cost):
    path, t = zero_cost
    pi = t.pi.copy()
    pi[:, 0] += 0.1
    pi /= pi.sum(axis=1, keepdims=True)
    assert verify_membership(nondegenerate, path, TripleTables(pi, t.q, t.u)).stationarity_residual > 1e-3


def test_delta_zero_is_identity(nondegenerate, zero_cost):
    path, t = zero_cost
    res = perturb_triple(nondegenerate, path, t, gamma=0.1, delta=0.0)
    assert np.array_equal(res.xi_star.values, path.values)
    assert np.array_equal(res.pi_star, t.pi)
    assert np.array_equal(res.u_star, t.u)
    assert np.allclose(res.q_star, t.q, rtol=0, atol=0)


def test_pi_mixing_arithmetic(nondegenerate):
    path = Path.straight([0.0], [0.0], 1.0, 1)
    pi = np.array([[1.0, 0.0]])
    nus = np.array([[0.5, 0.5]])
    q = np.zeros((1, 2, 2))
    rhos = np.ones((1, 2, 2))
    _, pi_d, *_ = _construct(nondegenerate, path, pi, q, np.zeros((1, 2, 1)), nus, rhos, 0.2)
    assert np.allclose(pi_d, [[0.9, 0.1]], atol=1e-15)


def test_perturbed_zero_cost_triple(nondegenerate, zero_cost, perturbed):
    path, t = zero_cost
    r = perturbed
    assert all(r.checks.values())
    assert r.cost_star <= r.gamma
    assert r.sup_distance <= r.K * r.delta_star
    assert r.stationarity_residual < 1e-10 and r.dynamics_residual < 1e-8
    assert 0 < r.m2
    vals = np.array([r.phi_star[:, i, j] for i, j in nondegenerate.T_set])
    assert vals.min() >= r.m2 and vals.max() <= r.m3
    # u* pi* = u pi exactly
    assert np.allclose(r.u_star * r.pi_star[:, :, None], t.u * t.pi[:, :, None], atol=1e-15)


def test_rate_preserved_by_reexpression(nondegenerate, perturbed):
    r = perturbed
    for i, j in nondegenerate.T_set:
        assert np.allclose(r.phi_star[:, i, j] * r.rho_ref[:, i, j], r.q_star[:, i, j], rtol=1e-14)


def test_stationary_map_along_xi_star(nondegenerate, perturbed):
    r = perturbed
    for k in range(0, len(r.pi_star), 17):
        xm = r.xi_star.midpoints[k]
        pi = stationary_map_rho(nondegenerate, xm, r.phi_star[k], r.rho_ref[k])
        assert np.allclose(pi, r.pi_star[k], atol=1e-12)
        q = rate_matrix(r.q_star[k])
        closed = np.array([q[1, 0], q[0, 1]]) / (q[1, 0] + q[0, 1])
        assert np.allclose(stationary(q), closed, atol=1e-12)
        assert pi.min() >= 1 / r.c1


def test_stationary_map_lipschitz_sample(nondegenerate, perturbed):
    r = perturbed
    rng = np.random.default_rng(0)
    k = 50
    xs = r.xi_star.midpoints[k] + rng.uniform(-0.2, 0.2, (40, 1))
    pis = np.array([stationary_map_rho(nondegenerate, x, r.phi_star[k], r.rho_ref[k]) for x in xs])
    dx = np.abs(xs[:, None, 0] - xs[None, :, 0])
    dp = np.abs(pis[:, None, 0] - pis[None, :, 0])
    mask = dx > 0
    assert np.max(dp[mask] / dx[mask]) <= r.c1


def test_uniqueness(nondegenerate, perturbed):
    rep = uniqueness_check(nondegenerate, perturbed)
    assert rep.passed, rep
    assert rep.gronwall_ok
    # a coarser integrator still agrees to its step order
    coarse = integrate_closed_loop(nondegenerate, perturbed, perturbed.xi_star.x0, "rk4", substeps=1)
    assert np.max(np.abs(coarse.values - perturbed.xi_star.values)) < 1e-5


def test_straight_path_perturbation(nondegenerate):
    path = Path.straight([0.0], [0.8], 1.0, 100)
    tables = triple_along_path(nondegenerate, path, RateOptions(n_starts=1))
    res = perturb_triple(nondegenerate, path, tables, gamma=0.1)
    assert all(res.checks.values())
    assert res.cost_star <= res.cost_input + 0.1
    assert res.sup_distance < 0.1


def test_rejects_inadmissible_input(nondegenerate, zero_cost):
    path, t = zero_cost
    shifted = Path(path.grid, path.values + 0.5 * path.grid[:, None])
    with pytest.raises(PerturbError, match="not admissible"):
        perturb_triple(nondegenerate, shifted, t, gamma=0.1)
    with pytest.raises(ValueError):
        perturb_triple(nondegenerate, path, t, gamma=1.5)
