import numpy as np
import pytest

from switchdiff.averaging import BlowUpError, Path, averaged_drift, lln_diagnostic, solve_averaged_ode
from switchdiff.fastchain import nu
from switchdiff.model import build_model

LINEAR = {"d": 1, "m": 1, "L": 1, "params": {"B": [[[-1.0]]], "c0": [1]}}
CONST2 = {"d": 1, "m": 1, "L": 2, "params": {"beta": [[1], [-1]], "c0": [2, 1], "r0": [[0, 1], [1, 0]]}}


def test_averaged_drift_examples(nondegenerate):
    m = build_model(CONST2)
    assert averaged_drift(m, [0.0]) == pytest.approx([-1 / 3], abs=1e-15)
    single = build_model(LINEAR)
    assert averaged_drift(single, [2.0]) == pytest.approx([-2.0])
    x = np.array([0.7])
    b = nondegenerate.drifts(x)
    assert np.allclose(averaged_drift(nondegenerate, x), nu(nondegenerate, x) @ b, atol=0, rtol=1e-15)


def test_linear_decay_and_rk4_order():
    m = build_model(LINEAR)
    errs = []
    for h in (0.1, 0.05):
        xi = solve_averaged_ode(m, [1.0], 1.0, h)
        errs.append(abs(xi.values[-1, 0] - np.exp(-1)))
    assert errs[0] < 1e-5
    assert 12 < errs[0] / errs[1] < 20


def test_constant_and_zero_drift():
    xi = solve_averaged_ode(build_model(CONST2), [0.5], 1.0, 0.1)
    assert np.allclose(xi.values[:, 0], 0.5 - xi.grid / 3, atol=1e-14)
    still = build_model({"d": 2, "m": 1, "L": 1, "params": {"c0": [1]}})
    xi = solve_averaged_ode(still, [1.0, -2.0], 2.0, 0.3)
    assert np.all(xi.values == [1.0, -2.0])
    assert xi.grid[-1] == 2.0


def test_midpoint_method_close_to_rk4(nondegenerate):
    a = solve_averaged_ode(nondegenerate, [0.0], 1.0, 0.01)
    b = solve_averaged_ode(nondegenerate, [0.0], 1.0, 0.01, method="midpoint")
    assert a.sup_distance(b) < 1e-5


def test_blow_up_guard():
    m = build_model({"d": 1, "m": 1, "L": 1, "params": {"B": [[[5.0]]], "c0": [1]}})
    with pytest.raises(BlowUpError):
        solve_averaged_ode(m, [1.0], 10.0, 0.01, bound=1e6)


def test_path_checks():
    with pytest.raises(ValueError):
        Path([0, 1, 1], [0, 1, 2])
    p = Path.straight([0.0], [1.0], 2.0, 4)
    assert np.allclose(p.slopes, 0.5)
    assert np.allclose(p.at(1.0), [[0.5]])


def test_lln_deterministic_case_is_discretisation_error():
    m = build_model(LINEAR)
    rows = lln_diagnostic(m, [1.0], 0, [0.1, 0.01], N=4, seed=0, h=0.01)
    for r in rows:
        # Euler vs RK4 on x' = -x: O(h) global error, no randomness
        assert r.mean_sup_dev == pytest.approx(rows[0].mean_sup_dev, rel=0, abs=1e-15)
        assert 1e-4 < r.mean_sup_dev < 5e-3
        assert r.stderr == 0.0
