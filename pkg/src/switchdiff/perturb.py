"""Perturbation of a near-optimal control triple into one with a unique characterization.

Controls are piecewise constant on the path grid (slice ``k`` is
``[t_k, t_{k+1})``) and every pointwise quantity is taken at the slice midpoint
``xi_mid``.  Given ``(xi, u, q, pi)`` and ``delta``:

1. ``pi_d = (1 - delta) pi + delta nu(xi_mid)``
2. ``u_d = u pi / pi_d``
3. ``xi_d`` solves the state equation with ``(pi_d, u_d)``
4. ``beta_d_ij = (1 - delta) (pi_i / pi_d_i) q_ij + delta nu_i rho_ij(xi_mid) / pi_d_i``
5. ``phi_ij = beta_d_ij / rho_ij(xi_d_mid)`` on ``[0, rho_ij(xi_d_mid)]`` and 1 above.

Step 3 is a defect-corrected implicit midpoint rule::

    xi_d[k+1] = xi_d[k] + (xi[k+1] - xi[k]) + dt (F(xi_d_mid; pi_d, u_d) - F(xi_mid; pi, u))

so ``delta = 0`` returns the input path exactly, and ``xi_d`` meets the
midpoint state equation to the same residual as the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.integrate import solve_ivp

from .averaging import Path, midpoint_step, solve_averaged_ode
from .fastchain import JumpGeometry, nu, rate_matrix, stationary
from .model import Model, Probe, validate_model, zeta_of
from .ratefn import RateOptions, cap_rate_control, ell, path_rate


class PerturbError(RuntimeError):
    pass


@dataclass
class TripleTables:
    """Piecewise-constant controls on a path grid: pi (n, L), q (n, L, L), u (n, L, m)."""

    pi: np.ndarray
    q: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.q = np.asarray(self.q, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n = self.pi.shape[0]
        if self.q.shape[0] != n or self.u.shape[0] != n:
            raise ValueError("control tables must have the same number of slices")

    @property
    def n(self) -> int:
        return self.pi.shape[0]


def _check_grid(path: Path, tables: TripleTables):
    if tables.n != len(path.grid) - 1:
        raise ValueError(f"tables have {tables.n} slices but the path has {len(path.grid) - 1}")


def drift_field(model: Model, x, pi, u) -> np.ndarray:
    """F(x; pi, u) = sum_j pi_j (b_j(x) + a_j(x) u_j)."""
    b = model.drifts(x)
    a = model.diffusions(x)
    return pi @ b + np.einsum("j,jdm,jm->d", pi, a, u)


def zero_cost_triple(model: Model, x0, T: float, h: float) -> tuple[Path, TripleTables]:
    """Averaged path (implicit midpoint) with pi = nu(xi_mid), q = rho(xi_mid), u = 0."""
    path = solve_averaged_ode(model, x0, T, h, method="midpoint")
    mids = path.midpoints
    pi = np.array([nu(model, x) for x in mids])
    q = np.array([model.channel_rates(x) for x in mids])
    u = np.zeros((len(mids), model.L, model.m))
    return path, TripleTables(pi, q, u)


def triple_along_path(model: Model, path: Path, opts: RateOptions | None = None) -> TripleTables:
    """Per-slice minimisers of the local rate along ``path``."""
    res = path_rate(model, path, opts)
    if not res.feasible:
        raise PerturbError(f"path is not reachable on interval {res.bad_interval}")
    trip = [r.result.argmin for r in res.records]
    return TripleTables(np.array([t.pi for t in trip]), np.array([t.q for t in trip]), np.array([t.u for t in trip]))


def triple_cost(model: Model, path: Path, tables: TripleTables, rho_ref: np.ndarray | None = None) -> float:
    """sum_k dt_k sum_i pi_i (|u_i|^2 / 2 + sum_j rho_ij ell(q_ij / rho_ij)).

    ``rho_ref`` (n, L, L) replaces rho(xi_mid) as the channel lengths when given.
    """
    _check_grid(path, tables)
    total = 0.0
    for k, (xm, dt) in enumerate(zip(path.midpoints, path.dt)):
        rho = model.channel_rates(xm) if rho_ref is None else rho_ref[k]
        pi = tables.pi[k]
        quad = 0.5 * float(pi @ (tables.u[k] ** 2).sum(axis=1))
        jump = 0.0
        for i, j in model.T_set:
            jump += pi[i] * rho[i, j] * ell(tables.q[k, i, j] / rho[i, j])
        total += dt * (quad + jump)
    return total


@dataclass
class MembershipReport:
    dynamics_residual: float
    stationarity_residual: float
    dynamics_by_node: np.ndarray = field(repr=False)
    stationarity_by_slice: np.ndarray = field(repr=False)

    def ok(self, dyn_tol: float = 1e-8, stat_tol: float = 1e-10) -> bool:
        return self.dynamics_residual <= dyn_tol and self.stationarity_residual <= stat_tol


def verify_membership(model: Model, path: Path, tables: TripleTables) -> MembershipReport:
    """Residuals of the state equation (midpoint quadrature) and of stationarity."""
    _check_grid(path, tables)
    n = tables.n
    recon = np.zeros_like(path.values)
    recon[0] = path.values[0]
    stat = np.zeros(n)
    for k in range(n):
        xm = path.midpoints[k]
        recon[k + 1] = recon[k] + path.dt[k] * drift_field(model, xm, tables.pi[k], tables.u[k])
        stat[k] = np.max(np.abs(tables.pi[k] @ rate_matrix(tables.q[k])))
    dyn = np.linalg.norm(path.values - recon, axis=1)
    return MembershipReport(float(dyn.max()), float(stat.max()), dyn, stat)


# ------------------------------------------------------------- the map rho


def controlled_rates(model: Model, x, phi: np.ndarray, rho_ref: np.ndarray) -> np.ndarray:
    """Channel rates at x under phi constant on [0, rho_ref] and 1 above it."""
    rho = model.channel_rates(x)
    out = np.zeros_like(rho)
    for i, j in model.T_set:
        out[i, j] = phi[i, j] * min(rho[i, j], rho_ref[i, j]) + max(rho[i, j] - rho_ref[i, j], 0.0)
    return out


def stationary_map_rho(model: Model, x, phi: np.ndarray, rho_ref: np.ndarray) -> np.ndarray:
    """Unique stationary law of the controlled generator at slow state x."""
    if np.any(np.array([phi[i, j] for i, j in model.T_set]) <= 0):
        raise PerturbError("thinning level must be positive on T_set")
    return stationary(rate_matrix(controlled_rates(model, x, phi, rho_ref)))


def floor_constant(L: int, m2: float, m3: float, r_low: float, zeta: float) -> float:
    """c1 with min_i pi_i >= 1/c1 for any irreducible chain with rates in [m2 r_low, m3 zeta].

    By the Markov chain tree theorem each weight is a sum of at most L^(L-2)
    products of L-1 rates, and at least one such product.
    """
    if L == 1:
        return 1.0
    return float((L * m3 * zeta / (m2 * r_low)) ** (L - 1))


# ------------------------------------------------------------- perturbation


@dataclass
class PerturbResult:
    xi: Path
    xi_star: Path
    pi_star: np.ndarray
    u_star: np.ndarray
    q_star: np.ndarray
    phi_star: np.ndarray
    rho_ref: np.ndarray
    m0: float
    m1: float
    m2: float
    m3: float
    delta_star: float
    delta_formula: float
    halvings: int
    K: float
    K1: float
    M: float
    M0: float
    a_M: float
    nu_low: float
    r_low: float
    kappa2: float
    d_lip: float
    zeta: float
    gamma: float
    cost_input: float
    cost_star: float
    sup_distance: float
    stationarity_residual: float
    dynamics_residual: float
    checks: dict[str, bool] = field(default_factory=dict)
    capped: bool = False

    @property
    def tables(self) -> TripleTables:
        return TripleTables(self.pi_star, self.q_star, self.u_star)

    @property
    def c1(self) -> float:
        return floor_constant(self.pi_star.shape[1], self.m2, self.m3, self.r_low, self.zeta)

    def controls(self):
        from .simulator import FeedbackControls

        return FeedbackControls(grid=self.xi_star.grid, u=self.u_star, phi=self.phi_star, rho_ref=self.rho_ref)

    def to_json(self) -> dict[str, Any]:
        keys = ["m0", "m1", "m2", "m3", "delta_star", "delta_formula", "halvings", "K", "K1", "M", "M0",
                "a_M", "nu_low", "r_low", "kappa2", "d_lip", "zeta", "gamma", "cost_input", "cost_star",
                "sup_distance", "stationarity_residual", "dynamics_residual", "capped"]
        out = {k: getattr(self, k) for k in keys}
        out["c1"] = self.c1
        out["checks"] = dict(self.checks)
        out["n_slices"] = int(self.pi_star.shape[0])
        return out

    def table_header(self, model: Model) -> list[str]:
        L, m = model.L, model.m
        cols = ["t_start", "t_end", *[f"xi_star_{k + 1}" for k in range(model.d)]]
        cols += [f"pi_star_{i + 1}" for i in range(L)]
        cols += [f"u_star_{i + 1}_{l + 1}" for i in range(L) for l in range(m)]
        cols += [f"q_star_({i + 1},{j + 1})" for i, j in model.T_set]
        cols += [f"phi_star_({i + 1},{j + 1})" for i, j in model.T_set]
        cols += [f"rho_ref_({i + 1},{j + 1})" for i, j in model.T_set]
        return cols

    def table_rows(self, model: Model):
        g = self.xi_star.grid
        for k in range(len(g) - 1):
            row = [g[k], g[k + 1], *self.xi_star.values[k], *self.pi_star[k], *self.u_star[k].ravel()]
            row += [self.q_star[k, i, j] for i, j in model.T_set]
            row += [self.phi_star[k, i, j] for i, j in model.T_set]
            row += [self.rho_ref[k, i, j] for i, j in model.T_set]
            yield row


def _construct(model, path, pi, q, u, nus, rhos, delta):
    """Steps 1-5 at a given delta; returns (xi_d Path, pi_d, u_d, beta_d, phi, rho_ref)."""
    n, L = pi.shape
    pi_d = (1.0 - delta) * pi + delta * nus
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pi_d > 0, pi / np.where(pi_d > 0, pi_d, 1.0), 1.0)
        nu_ratio = np.where(pi_d > 0, nus / np.where(pi_d > 0, pi_d, 1.0), 0.0)
    u_d = u * ratio[:, :, None]

    xs = np.zeros_like(path.values)
    xs[0] = path.values[0]
    for k in range(n):
        dt = path.dt[k]
        if delta == 0.0:
            xs[k + 1] = xs[k] + (path.values[k + 1] - path.values[k])
            continue
        base = drift_field(model, path.midpoints[k], pi[k], u[k])
        incr = path.values[k + 1] - path.values[k]
        # implicit midpoint for xi_d with the input's own defect carried along
        f = lambda x, k=k: drift_field(model, x, pi_d[k], u_d[k])
        defect = incr - dt * base
        xs[k + 1] = midpoint_step(f, xs[k], dt) + defect
    xi_d = Path(path.grid.copy(), xs)

    beta_d = (1.0 - delta) * ratio[:, :, None] * q + delta * nu_ratio[:, :, None] * rhos
    rho_ref = np.array([model.channel_rates(x) for x in xi_d.midpoints])
    phi = np.ones_like(beta_d)
    for i, j in model.T_set:
        phi[:, i, j] = beta_d[:, i, j] / rho_ref[:, i, j]
    for k in range(n):
        np.fill_diagonal(beta_d[k], 0.0)
    return xi_d, pi_d, u_d, beta_d, phi, rho_ref


def perturb_triple(model: Model, path: Path, tables: TripleTables, gamma: float, delta: float | None = None,
                   cap: bool = False, membership_tol: float = 1e-4, probe: Probe | None = None,
                   max_halvings: int = 60) -> PerturbResult:
    """Build (xi*, u*, phi*, pi*) from a near-optimal triple on ``path``.

    ``delta`` overrides the computed delta* (``delta=0`` returns the input).
    With ``cap`` the jump rates are first rescaled per slice by
    :func:`cap_rate_control`.  delta* is halved until every check passes.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    _check_grid(path, tables)
    mem = verify_membership(model, path, tables)
    if mem.dynamics_residual > membership_tol or mem.stationarity_residual > membership_tol:
        raise PerturbError(
            f"input triple is not admissible: dynamics residual {mem.dynamics_residual:.3e}, "
            f"stationarity residual {mem.stationarity_residual:.3e} (tolerance {membership_tol:g})")

    n, L = tables.pi.shape
    T = path.T
    pi, u = tables.pi, tables.u
    q = tables.q.copy()
    mids = path.midpoints
    nus = np.array([nu(model, x) for x in mids])
    rhos = np.array([model.channel_rates(x) for x in mids])
    zeta = zeta_of(model)

    # sup over (s, z) of phi * pi, with phi = q / rho on E_ij and its complement value elsewhere
    outside = np.ones(n)
    if cap and model.T_set:
        for k in range(n):
            geom = JumpGeometry(rho=rhos[k], zeta=zeta, T_set=model.T_set)
            alpha, q[k], _ = cap_rate_control(geom, pi[k], q[k])
            outside[k] = alpha / (1.0 + sum(pi[k, i] * tables.q[k, i, j] for i, j in model.T_set))
    m0 = 0.0
    for i, j in model.T_set:
        m0 = max(m0, float(np.max(pi[:, i] * np.maximum(q[:, i, j] / rhos[:, i, j], outside))))
    m1 = m0 + 1.0

    lo = path.values.min(axis=0) - 1.0
    hi = path.values.max(axis=0) + 1.0
    report = validate_model(model, probe or Probe(lo=lo, hi=hi, n=200, seed=0))
    bounds = report.bounds
    r_low = bounds.r_low
    kappa2 = bounds.kappa2
    d_lip = bounds.d_lip
    nu_low = float(nus.min())

    cost_input = triple_cost(model, path, TripleTables(pi, tables.q, u))
    M = cost_input + 1.0
    a_M = T + math.sqrt(2.0 * T * M)
    M0 = 0.0
    for x in path.values:
        b = model.drifts(x)
        a = model.diffusions(x)
        M0 = max(M0, float(np.max(np.linalg.norm(b, axis=1) + np.linalg.norm(a.reshape(L, -1), axis=1))))
    K = 2.0 * M0 * a_M * math.exp(d_lip * a_M)
    K1 = K * kappa2 * (T * L + (1.0 / r_low) * (L * zeta * T * (1.0 + math.e) + math.e * M))
    cands = [gamma * nu_low / (8.0 * M)]
    if K > 0:
        cands.append(gamma / K)
    if K1 > 0:
        cands.append(gamma / (4.0 * K1))
    delta_formula = min(cands)
    if not np.isfinite(delta_formula) or not np.isfinite(K) or not np.isfinite(K1):
        raise PerturbError(f"non-finite constants: K={K}, K1={K1}")

    d = delta_formula if delta is None else float(delta)
    halvings = 0
    while True:
        xi_d, pi_d, u_d, beta_d, phi, rho_ref = _construct(model, path, pi, q, u, nus, rhos, d)
        if d > 0:
            m3 = max(m1 * zeta / (d * r_low * nu_low), 1.0)
            m2 = min(d * nu_low * r_low / zeta, 1.0)
        else:
            m3, m2 = math.inf, 0.0
        vals = np.array([phi[:, i, j] for i, j in model.T_set]) if model.T_set else np.ones(1)
        star = TripleTables(pi_d, beta_d, u_d)
        cost_star = triple_cost(model, xi_d, star, rho_ref=rho_ref)
        mem_star = verify_membership(model, xi_d, star)
        sup = path.sup_distance(xi_d)
        checks = {
            "finite": bool(np.all(np.isfinite(xi_d.values)) and np.isfinite(cost_star)),
            "phi_bounds": bool(np.all(vals >= m2 * (1 - 1e-12)) and np.all(vals <= m3 * (1 + 1e-12))),
            "m2_positive": m2 > 0,
            "sup_distance": sup < gamma,
            "cost": cost_star <= cost_input + gamma,
            "stationarity": mem_star.stationarity_residual <= 1e-10,
        }
        if delta is not None or all(checks.values()) or halvings >= max_halvings:
            break
        d *= 0.5
        halvings += 1
    if delta is None and not all(checks.values()):
        failed = [k for k, v in checks.items() if not v]
        raise PerturbError(f"no delta passed the checks after {halvings} halvings: {failed}")
    return PerturbResult(
        xi=path, xi_star=xi_d, pi_star=pi_d, u_star=u_d, q_star=beta_d, phi_star=phi, rho_ref=rho_ref,
        m0=m0, m1=m1, m2=m2, m3=m3, delta_star=d, delta_formula=delta_formula, halvings=halvings,
        K=K, K1=K1, M=M, M0=M0, a_M=a_M, nu_low=nu_low, r_low=r_low, kappa2=kappa2, d_lip=d_lip,
        zeta=zeta, gamma=gamma, cost_input=cost_input, cost_star=cost_star, sup_distance=sup,
        stationarity_residual=mem_star.stationarity_residual, dynamics_residual=mem_star.dynamics_residual,
        checks=checks, capped=cap,
    )


# ---------------------------------------------------------------- uniqueness


@dataclass
class UniquenessReport:
    rk4_vs_star: float
    dop853_vs_star: float
    rk4_vs_dop853: float
    tol: float
    shift: float
    shifted_max_ratio: float
    lipschitz: float
    gronwall_ok: bool

    @property
    def passed(self) -> bool:
        return (self.rk4_vs_star <= self.tol and self.dop853_vs_star <= self.tol
                and self.rk4_vs_dop853 <= self.tol and self.gronwall_ok)

    def to_json(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in ("rk4_vs_star", "dop853_vs_star", "rk4_vs_dop853", "tol", "shift",
                                               "shifted_max_ratio", "lipschitz", "gronwall_ok")} | {"passed": self.passed}


def closed_loop_rhs(model: Model, result: PerturbResult, k: int, x) -> np.ndarray:
    """sum_i rho_i(s, x) (b_i(x) + a_i(x) u*_i(s)) on slice k."""
    pi = stationary_map_rho(model, x, result.phi_star[k], result.rho_ref[k])
    return drift_field(model, x, pi, result.u_star[k])


def _rk4(f, x, dt, sub):
    h = dt / sub
    for _ in range(sub):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return x


def integrate_closed_loop(model: Model, result: PerturbResult, x0, method: str = "rk4", substeps: int = 4,
                          rtol: float = 1e-12, atol: float = 1e-12) -> Path:
    grid = result.xi_star.grid
    xs = np.zeros((len(grid), model.d))
    xs[0] = np.asarray(x0, dtype=float).reshape(model.d)
    for k in range(len(grid) - 1):
        f = lambda x, k=k: closed_loop_rhs(model, result, k, x)
        dt = grid[k + 1] - grid[k]
        if method == "rk4":
            xs[k + 1] = _rk4(f, xs[k], dt, substeps)
        elif method == "dop853":
            sol = solve_ivp(lambda t, x: f(x), (grid[k], grid[k + 1]), xs[k], method="DOP853", rtol=rtol, atol=atol)
            if not sol.success:
                raise PerturbError(f"DOP853 failed on slice {k}: {sol.message}")
            xs[k + 1] = sol.y[:, -1]
        else:
            raise ValueError(f"unknown integrator '{method}'")
    return Path(grid.copy(), xs)


def uniqueness_check(model: Model, result: PerturbResult, x0=None, tol: float = 1e-6, substeps: int = 4,
                     shift: float = 1e-3, n_lip: int = 200, seed: int = 0) -> UniquenessReport:
    """Re-solve the closed loop with two integrators and from a shifted start.

    The shifted solution must stay within ``exp(Lambda t) * shift`` of the
    unshifted one, with Lambda the largest sampled difference quotient of the
    closed-loop field near xi*.
    """
    star = result.xi_star
    x0 = star.x0 if x0 is None else np.asarray(x0, dtype=float)
    rk = integrate_closed_loop(model, result, x0, "rk4", substeps)
    dp = integrate_closed_loop(model, result, x0, "dop853")
    rng = np.random.default_rng(seed)
    n = len(star.grid) - 1
    lam = 0.0
    for k in rng.integers(0, n, n_lip):
        x = star.values[k]
        dx = rng.standard_normal(model.d)
        dx *= 2 * shift / np.linalg.norm(dx)
        lam = max(lam, float(np.linalg.norm(closed_loop_rhs(model, result, k, x + dx)
                                            - closed_loop_rhs(model, result, k, x)) / np.linalg.norm(dx)))
    e = np.zeros(model.d)
    e[0] = shift
    shifted = integrate_closed_loop(model, result, x0 + e, "rk4", substeps)
    gap = np.linalg.norm(shifted.values - rk.values, axis=1)
    bound = shift * np.exp(lam * star.grid)
    ratio = float(np.max(gap / bound))
    return UniquenessReport(
        rk4_vs_star=float(np.max(np.linalg.norm(rk.values - star.values, axis=1))),
        dop853_vs_star=float(np.max(np.linalg.norm(dp.values - star.values, axis=1))),
        rk4_vs_dop853=float(np.max(np.linalg.norm(rk.values - dp.values, axis=1))),
        tol=tol,
        shift=shift,
        shifted_max_ratio=ratio,
        lipschitz=lam,
        gronwall_ok=ratio <= 1.0 + 1e-9,
    )
