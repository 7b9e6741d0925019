"""Averaged drift, the averaged ODE, and law-of-large-numbers diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fastchain import nu
from .model import Model


@dataclass
class Path:
    """Slow path sampled on a strictly increasing grid, linear between nodes."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if len(self.grid) < 2 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("path grid must be strictly increasing with at least two nodes")
        if self.values.shape[0] != len(self.grid):
            raise ValueError("one value per grid node required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("path values must be finite")

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.values[0]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.grid)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.values[1:] + self.values[:-1])

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values, axis=0) / self.dt[:, None]

    def at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.column_stack([np.interp(t, self.grid, self.values[:, i]) for i in range(self.d)])

    def sup_distance(self, other: "Path") -> float:
        """Sup-norm distance on the union of both grids (exact for piecewise-linear paths)."""
        grid = np.union1d(self.grid, other.grid)
        return float(np.max(np.linalg.norm(self.at(grid) - other.at(grid), axis=1)))

    @classmethod
    def straight(cls, x0, x1, T: float, K: int) -> "Path":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        s = np.linspace(0.0, 1.0, K + 1)[:, None]
        return cls(np.linspace(0.0, T, K + 1), x0 + s * (x1 - x0))


class BlowUpError(RuntimeError):
    pass


def averaged_drift(model: Model, x) -> np.ndarray:
    return nu(model, x) @ model.drifts(x)


def midpoint_step(f, x, dt, tol: float = 1e-14, maxit: int = 200):
    """One implicit-midpoint step x + dt f((x + x_new)/2), solved by fixed-point iteration."""
    from scipy.optimize import root

    m = x + 0.5 * dt * f(x)
    for _ in range(maxit):
        m_new = x + 0.5 * dt * f(m)
        if np.linalg.norm(m_new - m) <= tol * (1.0 + np.linalg.norm(m)):
            return 2.0 * m_new - x
        m = m_new
    sol = root(lambda z: z - x - 0.5 * dt * f(z), m, tol=tol)
    if not sol.success:
        raise BlowUpError(f"implicit midpoint step did not converge: {sol.message}")
    return 2.0 * sol.x - x


def solve_averaged_ode(model: Model, x0, T: float, h: float, bound: float = 1e8, method: str = "rk4") -> Path:
    """Fixed-step solve of d(xi)/dt = averaged drift, with a final partial step.

    ``method`` is ``"rk4"`` (classical Runge-Kutta) or ``"midpoint"`` (implicit
    midpoint; its increments satisfy the midpoint quadrature of the state
    equation exactly, which is the convention of the membership check).
    """
    if h <= 0 or T <= 0:
        raise ValueError("need h > 0 and T > 0")
    if method not in ("rk4", "midpoint"):
        raise ValueError(f"unknown method '{method}'")
    from .simulator import time_grid

    grid = time_grid(T, h)
    xs = np.zeros((len(grid), model.d))
    xs[0] = np.asarray(x0, dtype=float).reshape(model.d)
    f = lambda x: averaged_drift(model, x)
    for k in range(len(grid) - 1):
        x, dt = xs[k], grid[k + 1] - grid[k]
        if method == "midpoint":
            xs[k + 1] = midpoint_step(f, x, dt)
        else:
            k1 = f(x)
            k2 = f(x + 0.5 * dt * k1)
            k3 = f(x + 0.5 * dt * k2)
            k4 = f(x + dt * k3)
            xs[k + 1] = x + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if not np.all(np.isfinite(xs[k + 1])) or np.linalg.norm(xs[k + 1]) > bound:
            raise BlowUpError(f"averaged ODE left the ball of radius {bound} at t={grid[k + 1]:.6g}")
    return Path(grid, xs)


@dataclass
class LLNRow:
    epsilon: float
    n: int
    mean_sup_dev: float
    q50: float
    q90: float
    stderr: float

    HEADER = ("epsilon", "n", "mean_sup_dev", "q50", "q90", "stderr")

    def row(self):
        return [self.epsilon, self.n, self.mean_sup_dev, self.q50, self.q90, self.stderr]


def lln_diagnostic(model: Model, x0, y0, eps_list, N: int, seed: int, h: float, T: float = 1.0,
                   threads: int | None = None) -> list[LLNRow]:
    """Sup-norm deviation of X^eps from the averaged path on the simulation grid."""
    from .simulator import batch_simulate

    if N < 2:
        raise ValueError("need N >= 2 trajectories")
    ref = solve_averaged_ode(model, x0, T, h)
    rows = []
    for eps in eps_list:
        stats = batch_simulate(model, eps, x0, y0, T, h, N, seed=seed, reference=ref, threads=threads)
        dev = stats.sup_dev
        rows.append(LLNRow(
            epsilon=float(eps),
            n=N,
            mean_sup_dev=float(dev.mean()),
            q50=float(np.quantile(dev, 0.5)),
            q90=float(np.quantile(dev, 0.9)),
            stderr=float(dev.std(ddof=1) / np.sqrt(N)),
        ))
    return rows
