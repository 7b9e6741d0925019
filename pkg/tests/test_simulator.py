import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import frozen_two_state, random_config
from switchdiff.averaging import solve_averaged_ode
from switchdiff.model import build_model
from switchdiff.simulator import (FeedbackControls, SimulationError, batch_simulate, occupation_measure, simulate,
                                  simulate_controlled)


def _same(a, b):
    return (np.array_equal(a.path.values, b.path.values) and np.array_equal(a.y_grid, b.y_grid)
            and a.jumps == b.jumps and a.y0 == b.y0)


def test_deterministic_decay_no_jumps():
    m = build_model({"d": 1, "m": 1, "L": 1, "params": {"B": [[[-1.0]]], "c0": [1]}})
    tr = simulate(m, 0.1, [1.0], 0, 1.0, 0.01, seed=3)
    assert tr.jumps == []
    assert tr.path.values[-1, 0] == pytest.approx(0.99 ** 100, rel=1e-12)


def test_trajectory_reproducible(nondegenerate):
    a = simulate(nondegenerate, 0.05, [0.2], 0, 1.0, 0.01, seed=9, stream=4)
    b = simulate(nondegenerate, 0.05, [0.2], 0, 1.0, 0.01, seed=9, stream=4)
    c = simulate(nondegenerate, 0.05, [0.2], 0, 1.0, 0.01, seed=9, stream=5)
    assert _same(a, b) and not _same(a, c)


def test_jump_record_is_consistent(nondegenerate):
    tr = simulate(nondegenerate, 0.02, [0.0], 1, 1.0, 0.01, seed=2)
    times = [t for t, _, _ in tr.jumps]
    assert all(np.diff(times) > 0) and 0 <= times[0] and times[-1] <= 1.0
    prev = tr.y0
    for _, i, j in tr.jumps:
        assert i == prev and (i, j) in nondegenerate.T_set
        prev = j


@settings(max_examples=15)
@given(seed=st.integers(0, 10**6), L=st.integers(1, 4))
def test_identity_controls_are_a_no_op(seed, L):
    m = build_model(random_config(np.random.default_rng(seed), L, d=2, m=2))
    ident = FeedbackControls.identity(m, 1.0, grid=np.linspace(0, 1, 7))
    a = simulate(m, 0.1, [0.1, -0.2], 0, 1.0, 0.02, seed=seed, stream=3)
    b = simulate_controlled(m, 0.1, ident, [0.1, -0.2], 0, 1.0, 0.02, seed=seed, stream=3)
    assert _same(a, b)
    assert b.cost_phi == 0.0 and b.cost_psi == 0.0


def test_doubled_rates_double_jump_count():
    m = build_model(frozen_two_state())
    base = batch_simulate(m, 0.01, [0.0], 0, 1.0, 0.01, 400, seed=1)
    ctl = FeedbackControls(grid=[0, 1], u=np.zeros((1, 2, 1)), phi=np.full((1, 2, 2), 2.0))
    dbl = batch_simulate(m, 0.01, [0.0], 0, 1.0, 0.01, 400, seed=1, controls=ctl)
    mean_b, mean_d = base.n_jumps.mean(), dbl.n_jumps.mean()
    se = np.sqrt(dbl.n_jumps.var(ddof=1) / 400 + 4 * base.n_jumps.var(ddof=1) / 400)
    assert abs(mean_d - 2 * mean_b) < 3 * se
    assert abs(mean_d - 200) < 3 * np.sqrt(dbl.n_jumps.var(ddof=1) / 400)
    # only the active row is paid: one channel with rho = 1 at phi = 2, so ell(2) per unit time
    assert np.allclose(dbl.cost_phi, 2 * np.log(2) - 1, rtol=1e-12)


def test_acceptance_probability_per_candidate():
    m = build_model(frozen_two_state(c=(0.5, 1.5)))
    st_ = batch_simulate(m, 0.01, [0.0], 0, 1.0, 0.01, 300, seed=5)
    zeta = 2.5
    for i, j in m.T_set:
        acc = st_.jump_counts[:, i, j].sum()
        cand = st_.candidate_counts[:, i, j].sum()
        p = m.channel_rates([0.0])[i, j] / zeta
        assert abs(acc / cand - p) < 3 * np.sqrt(p * (1 - p) / cand)


def test_occupation_measure_properties(two_state):
    m = build_model({"d": 1, "m": 1, "L": 2, "params": {"c0": [1e-9, 1], "r0": [[0, 1], [1, 0]]}})
    tr = simulate(m, 1.0, [0.0], 0, 1.0, 0.1, seed=0)
    assert tr.jumps == []
    assert np.array_equal(occupation_measure(tr), [1.0, 0.0])
    tr = simulate(two_state, 0.01, [0.0], 0, 1.0, 0.01, seed=0)
    occ = occupation_measure(tr, 0.5)
    assert occ.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        occupation_measure(tr, 1.5)


def test_occupation_tracks_nu(two_state):
    st_ = batch_simulate(two_state, 1e-3, [0.0], 0, 1.0, 0.01, 100, seed=8)
    f = st_.occupation[:, 0]
    assert abs(f.mean() - 1 / 3) < 3 * f.std(ddof=1) / 10


def test_batch_contracts(nondegenerate):
    ref = solve_averaged_ode(nondegenerate, [0.0], 1.0, 0.01)
    one = batch_simulate(nondegenerate, 0.05, [0.0], 0, 1.0, 0.01, 1, seed=4)
    tr = simulate(nondegenerate, 0.05, [0.0], 0, 1.0, 0.01, seed=4, stream=1)
    assert np.array_equal(one.terminal[0], tr.path.values[-1])
    a = batch_simulate(nondegenerate, 0.05, [0.0], None, 1.0, 0.01, 30, seed=4, reference=ref, threads=1)
    b = batch_simulate(nondegenerate, 0.05, [0.0], None, 1.0, 0.01, 30, seed=4, reference=ref, threads=3)
    c = batch_simulate(nondegenerate, 0.05, [0.0], None, 1.0, 0.01, 60, seed=4, reference=ref, threads=2)
    assert list(a.rows()) == list(b.rows())
    assert list(c.rows())[:30] == list(a.rows())


def test_phi_max_exceeded_and_bad_inputs(two_state):
    with pytest.raises(ValueError):
        FeedbackControls(grid=[0, 1], u=np.zeros((1, 2, 1)), phi=np.full((1, 2, 2), 3.0), phi_max=2.0)
    with pytest.raises(ValueError):
        simulate(two_state, 0.0, [0.0], 0, 1.0, 0.01)
    with pytest.raises(ValueError):
        simulate(two_state, 0.1, [0.0], 0, 1.0, -0.01)
    with pytest.raises(ValueError):
        simulate(two_state, 0.1, [0.0], 5, 1.0, 0.01)


def test_nonfinite_state_aborts():
    m = build_model({"d": 1, "m": 1, "L": 1, "params": {"B": [[[1e5]]], "c0": [1]}})
    with pytest.raises(SimulationError, match="non-finite"):
        simulate(m, 0.1, [1.0], 0, 2.0, 0.01)
