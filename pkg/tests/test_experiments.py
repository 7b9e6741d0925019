import math

import numpy as np
import pytest
from scipy.stats import norm

from switchdiff.averaging import solve_averaged_ode
from switchdiff.experiments import (EventSpec, eps_sweep, ldp_compare, mc_rare_event, minimize_path_rate,
                                    tilted_convergence)
from switchdiff.model import build_model
from switchdiff.perturb import perturb_triple, zero_cost_triple
from switchdiff.simulator import batch_simulate

DETERMINISTIC = {"d": 1, "m": 1, "L": 1, "params": {"beta": [[1.0]], "c0": [1]}}


def test_event_spec_invariants():
    with pytest.raises(ValueError):
        EventSpec.ball([0.0], 0.0)
    with pytest.raises(ValueError):
        EventSpec.halfspace([0.0, 0.0], 1.0)
    ev = EventSpec.halfspace([1.0, 1.0], 1.0)
    assert list(ev.contains([[1, 0], [0.4, 0.4]])) == [True, False]
    p = ev.boundary_point([0.3], 2)
    assert p @ np.array([1, 1]) == pytest.approx(1.0)
    assert ev.boundary_point(ev.boundary_coords(p, 2), 2) == pytest.approx(p)


def test_whole_space_event(gaussian):
    r = mc_rare_event(gaussian, 0.1, EventSpec.ball([0.0], math.inf), 200, seed=0, x0=[0.0])
    assert r.p_hat == 1.0 and r.neg_eps_log_p == 0.0 and r.stderr == 0.0


def test_gaussian_tail_probability(gaussian):
    N = 20000
    r = mc_rare_event(gaussian, 0.25, EventSpec.halfspace([1.0], 1.0), N, seed=3, x0=[0.0])
    p = norm.sf(2.0)
    assert abs(r.p_hat - p) < 3 * math.sqrt(p * (1 - p) / N)
    assert r.stderr == pytest.approx(math.sqrt(r.p_hat * (1 - r.p_hat) / N))


def test_censoring_is_honest(gaussian):
    sw = eps_sweep(gaussian, EventSpec.halfspace([1.0], 5.0), [0.05, 0.02], 100, seed=0, x0=[0.0])
    assert all(r.censored and math.isnan(r.neg_eps_log_p) and r.p_hat == 0 for r in sw.rows)
    assert math.isnan(sw.slope) and sw.n_fit == 0


def test_deterministic_model_hits_always():
    m = build_model(DETERMINISTIC)
    sw = eps_sweep(m, EventSpec.ball([1.0], 0.05), [0.1, 0.05, 0.02], 100, seed=0, x0=[0.0])
    assert all(r.p_hat == 1.0 for r in sw.rows)


def test_sweep_trend_is_monotone(gaussian):
    sw = eps_sweep(gaussian, EventSpec.halfspace([1.0], 1.0), [0.5, 0.25, 0.125], 20000, seed=1, x0=[0.0],
                   h=0.05)
    vals = [r.neg_eps_log_p for r in sw.rows]
    assert vals[0] > vals[1] > vals[2] > 0.5
    assert sw.n_fit == 3 and np.isfinite(sw.slope)


def test_sweep_requires_decreasing_eps(gaussian):
    with pytest.raises(ValueError):
        eps_sweep(gaussian, EventSpec.halfspace([1.0], 1.0), [0.05, 0.1], 100, seed=0, x0=[0.0])


def test_transcription_gaussian(gaussian):
    value, path, diag = minimize_path_rate(gaussian, EventSpec.halfspace([1.0], 1.0), [0.0], 1.0, K_nodes=3,
                                           n_starts=1, maxfev=200)
    assert value == pytest.approx(0.5, abs=1e-6)
    assert np.allclose(path.values[:, 0], path.grid, atol=1e-3)


def test_averaged_endpoint_in_event(nondegenerate):
    xi = solve_averaged_ode(nondegenerate, [0.0], 1.0, 0.01)
    ev = EventSpec.ball(xi.values[-1], 0.05)
    res = ldp_compare(nondegenerate, ev, [0.0], 1.0)
    assert res.I_star <= 1e-5
    assert "endpoint" in res.diagnostics


def test_tilt_with_identity_perturbation_is_lln(nondegenerate):
    path, tables = zero_cost_triple(nondegenerate, [0.0], 1.0, 0.01)
    res = perturb_triple(nondegenerate, path, tables, gamma=0.1, delta=0.0)
    rows = tilted_convergence(nondegenerate, res, [0.1, 0.05], N=50, seed=2, h=0.01)
    for k, row in enumerate(rows):
        st = batch_simulate(nondegenerate, row.epsilon, [0.0], tables.pi[0], 1.0, 0.01, 50, seed=2 + k,
                            reference=path)
        assert row.mean_sup_dev == st.sup_dev.mean()
        assert row.mean_cost == 0.0 and row.deterministic_cost == 0.0
