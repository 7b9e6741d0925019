"""Rare-event Monte Carlo, eps-sweeps, the I* transcription and tilted runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from .averaging import Path, solve_averaged_ode
from .model import Model
from .ratefn import RateOptions, path_rate
from .simulator import batch_simulate


@dataclass(frozen=True)
class EventSpec:
    """Terminal event {X(T) in set}: a closed ball or a halfspace {normal . x >= threshold}."""

    kind: str
    center: tuple[float, ...] = ()
    radius: float = math.inf
    normal: tuple[float, ...] = ()
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind == "ball":
            if not self.radius > 0:
                raise ValueError("ball radius must be positive")
        elif self.kind == "halfspace":
            if not np.any(np.asarray(self.normal, dtype=float) != 0):
                raise ValueError("halfspace normal must be nonzero")
        else:
            raise ValueError(f"unknown event kind '{self.kind}'")

    @classmethod
    def ball(cls, center, radius: float) -> "EventSpec":
        return cls("ball", center=tuple(np.atleast_1d(np.asarray(center, dtype=float))), radius=float(radius))

    @classmethod
    def halfspace(cls, normal, threshold: float) -> "EventSpec":
        return cls("halfspace", normal=tuple(np.atleast_1d(np.asarray(normal, dtype=float))), threshold=float(threshold))

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "ball":
            if math.isinf(self.radius):
                return np.ones(len(x), dtype=bool)
            return np.linalg.norm(x - np.asarray(self.center), axis=1) <= self.radius
        return x @ np.asarray(self.normal) >= self.threshold

    def boundary_dim(self, d: int) -> int:
        """Number of free coordinates used to place a point on the boundary."""
        return d if self.kind == "ball" else d - 1

    def boundary_point(self, z, d: int) -> np.ndarray:
        """Point on the boundary parametrised by ``z`` (length :meth:`boundary_dim`)."""
        z = np.asarray(z, dtype=float)
        if self.kind == "ball":
            if math.isinf(self.radius):
                raise ValueError("the whole space has no boundary")
            nz = np.linalg.norm(z)
            direction = z / nz if nz > 0 else np.eye(d)[0]
            return np.asarray(self.center) + self.radius * direction
        n = np.asarray(self.normal)
        # orthonormal basis of the hyperplane through the foot point
        foot = self.threshold * n / (n @ n)
        if d == 1:
            return foot
        Q, _ = np.linalg.qr(np.column_stack([n, np.eye(d)]))
        return foot + Q[:, 1:d] @ z

    def boundary_coords(self, x, d: int) -> np.ndarray:
        """Inverse of :meth:`boundary_point` for the nearest boundary point."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return x - np.asarray(self.center)
        if d == 1:
            return np.zeros(0)
        n = np.asarray(self.normal)
        Q, _ = np.linalg.qr(np.column_stack([n, np.eye(d)]))
        return Q[:, 1:d].T @ x

    def to_json(self) -> dict[str, Any]:
        if self.kind == "ball":
            return {"kind": "ball", "center": list(self.center), "radius": self.radius}
        return {"kind": "halfspace", "normal": list(self.normal), "threshold": self.threshold}


# ----------------------------------------------------------- Monte Carlo


@dataclass
class MCResult:
    epsilon: float
    N: int
    hits: int
    p_hat: float
    stderr: float
    neg_eps_log_p: float
    censored: bool

    HEADER = ("epsilon", "N", "p_hat", "stderr", "neg_eps_log_p", "censored")

    def row(self):
        return [self.epsilon, self.N, self.p_hat, self.stderr, self.neg_eps_log_p, int(self.censored)]


def mc_rare_event(model: Model, eps: float, event: EventSpec, N: int, seed: int, x0, T: float = 1.0,
                  h: float = 0.01, y0=None, threads: int | None = None) -> MCResult:
    """Plain Monte Carlo estimate of P(X^eps(T) in event)."""
    if N < 100:
        raise ValueError("need N >= 100 trajectories")
    stats = batch_simulate(model, eps, x0, y0, T, h, N, seed=seed, threads=threads)
    hits = int(event.contains(stats.terminal).sum())
    p = hits / N
    censored = hits == 0
    return MCResult(
        epsilon=float(eps),
        N=int(N),
        hits=hits,
        p_hat=p,
        stderr=math.sqrt(p * (1.0 - p) / N),
        neg_eps_log_p=math.nan if censored else -eps * math.log(p),
        censored=censored,
    )


@dataclass
class SweepResult:
    rows: list[MCResult]
    slope: float
    intercept: float
    n_fit: int

    def csv_rows(self):
        return [r.row() for r in self.rows]


def eps_sweep(model: Model, event: EventSpec, eps_list: Sequence[float],
              N: int | Sequence[int] | Callable[[float], int], seed: int, x0, T: float = 1.0,
              h: float = 0.01, y0=None, threads: int | None = None) -> SweepResult:
    """One MC row per eps (seed + index), then a least-squares line of -log p_hat against 1/eps.

    Censored rows are kept in the table and left out of the fit; with fewer
    than two usable rows the slope is NaN.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if callable(N):
        Ns = [int(N(e)) for e in eps_list]
    elif np.ndim(N) == 0:
        Ns = [int(N)] * len(eps_list)
    else:
        Ns = [int(n) for n in N]
        if len(Ns) != len(eps_list):
            raise ValueError("one sample size per eps required")
    rows = [mc_rare_event(model, e, event, n, seed + k, x0, T, h, y0, threads)
            for k, (e, n) in enumerate(zip(eps_list, Ns))]
    use = [r for r in rows if not r.censored and r.p_hat < 1.0]
    if len(use) >= 2:
        inv = np.array([1.0 / r.epsilon for r in use])
        nl = np.array([-math.log(r.p_hat) for r in use])
        slope, intercept = np.polyfit(inv, nl, 1)
    else:
        slope = intercept = math.nan
    return SweepResult(rows, float(slope), float(intercept), len(use))


# --------------------------------------------------------- transcription


@dataclass
class CompareResult:
    I_star: float
    path: Path
    slope_fit: float
    relative_gap: float
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {"I_star": self.I_star, "slope_fit": self.slope_fit, "relative_gap": self.relative_gap,
                "diagnostics": self.diagnostics}


class _Transcription:
    """Piecewise-linear paths with K interior nodes and the endpoint on the event boundary."""

    def __init__(self, model: Model, event: EventSpec, x0, T: float, K: int, opts: RateOptions):
        self.model = model
        self.event = event
        self.x0 = np.asarray(x0, dtype=float).reshape(model.d)
        self.T = T
        self.K = K
        self.grid = np.linspace(0.0, T, K + 2)
        self.opts = opts
        self.nb = event.boundary_dim(model.d)
        self.evals = 0

    def path(self, z) -> Path:
        d = self.model.d
        nodes = np.asarray(z[: self.K * d]).reshape(self.K, d)
        end = self.event.boundary_point(z[self.K * d:], d)
        return Path(self.grid, np.vstack([self.x0, nodes, end]))

    def encode(self, path: Path) -> np.ndarray:
        vals = path.at(self.grid)
        return np.concatenate([vals[1:-1].ravel(), self.event.boundary_coords(vals[-1], self.model.d)])

    def value(self, z) -> float:
        self.evals += 1
        if not np.all(np.isfinite(z)):
            return 1e30
        res = path_rate(self.model, self.path(z), self.opts)
        return res.value if res.feasible else 1e30


def _straight_guess(tr: _Transcription, end) -> np.ndarray:
    return tr.encode(Path.straight(tr.x0, end, tr.T, tr.K + 1))


def minimize_path_rate(model: Model, event: EventSpec, x0, T: float, K_nodes: int = 8, n_starts: int = 3,
                       seed: int = 0, opts: RateOptions | None = None, maxfev: int = 600,
                       z0=None) -> tuple[float, Path, dict[str, Any]]:
    """min of the path rate over K-node piecewise-linear paths ending on the event boundary.

    Starts: the straight line to the boundary point nearest the averaged
    endpoint, plus jittered copies; each runs Nelder-Mead, the best is polished
    by BFGS with finite-difference gradients.
    """
    opts = opts or RateOptions(n_starts=1)
    tr = _Transcription(model, event, x0, T, K_nodes, opts)
    d = model.d
    avg = solve_averaged_ode(model, tr.x0, T, T / (K_nodes + 1), method="midpoint")
    if event.contains(avg.values[-1])[0]:
        res = path_rate(model, avg, opts)
        return res.value, avg, {"endpoint": "averaged path already in the event", "evaluations": 1,
                                "converged": True}

    end_guess = event.boundary_point(event.boundary_coords(avg.values[-1], d), d)
    base = _straight_guess(tr, end_guess) if z0 is None else np.asarray(z0, dtype=float)
    rng = np.random.default_rng(seed)
    scale = max(1e-3, float(np.linalg.norm(end_guess - tr.x0)))
    starts = [base] + [base + 0.1 * scale * rng.standard_normal(base.shape) for _ in range(n_starts - 1)]
    best = None
    for z in starts:
        r = minimize(tr.value, z, method="Nelder-Mead",
                     options={"maxfev": maxfev, "xatol": 1e-7, "fatol": 1e-10, "adaptive": True})
        if best is None or r.fun < best.fun:
            best = r
    polish = minimize(tr.value, best.x, method="BFGS", options={"gtol": 1e-7, "maxiter": 100, "eps": 1e-7})
    z_best = polish.x if polish.fun <= best.fun else best.x
    value = min(polish.fun, best.fun)
    diag = {
        "K_nodes": K_nodes,
        "starts": len(starts),
        "evaluations": tr.evals,
        "nelder_mead_value": float(best.fun),
        "polish_value": float(polish.fun),
        "converged": bool(polish.success or np.linalg.norm(polish.jac) < 1e-5),
        "grad_norm": float(np.linalg.norm(polish.jac)),
    }
    return float(value), tr.path(z_best), diag


def ldp_compare(model: Model, event: EventSpec, x0, T: float = 1.0, sweep: SweepResult | None = None,
                K_nodes: int = 8, refine: bool = True, n_starts: int = 3, seed: int = 0,
                opts: RateOptions | None = None) -> CompareResult:
    """I* by direct transcription, compared with the eps-sweep slope when one is given.

    With ``refine`` the optimum is re-solved on 2 K_nodes nodes, warm-started from
    the coarse path; a drop of more than 1% is flagged in the diagnostics.
    """
    value, path, diag = minimize_path_rate(model, event, x0, T, K_nodes, n_starts, seed, opts)
    if refine and diag.get("endpoint") is None:
        tr = _Transcription(model, event, x0, T, 2 * K_nodes, opts or RateOptions(n_starts=1))
        v2, p2, d2 = minimize_path_rate(model, event, x0, T, 2 * K_nodes, 1, seed, opts, maxfev=200,
                                        z0=tr.encode(path))
        diag["refined_K_nodes"] = 2 * K_nodes
        diag["refined_value"] = v2
        diag["refinement_drop"] = (value - v2) / value if value > 0 else 0.0
        diag["under_resolved"] = bool(v2 < 0.99 * value)
        if v2 < value:
            value, path = v2, p2
    slope = sweep.slope if sweep is not None else math.nan
    gap = abs(slope - value) / value if (sweep is not None and value > 0 and np.isfinite(slope)) else math.nan
    if sweep is not None:
        diag["sweep_rows_used"] = sweep.n_fit
    return CompareResult(I_star=float(value), path=path, slope_fit=float(slope), relative_gap=float(gap),
                         diagnostics=diag)


# ------------------------------------------------------- tilted dynamics


@dataclass
class TiltRow:
    epsilon: float
    N: int
    mean_sup_dev: float
    stderr_sup_dev: float
    mean_cost: float
    stderr_cost: float
    deterministic_cost: float

    HEADER = ("epsilon", "N", "mean_sup_dev", "stderr_sup_dev", "mean_cost", "stderr_cost", "deterministic_cost")

    @property
    def cost_gap_stderr(self) -> float:
        return abs(self.mean_cost - self.deterministic_cost) / self.stderr_cost if self.stderr_cost > 0 else math.inf

    def row(self):
        return [self.epsilon, self.N, self.mean_sup_dev, self.stderr_sup_dev, self.mean_cost, self.stderr_cost,
                self.deterministic_cost]


def tilted_convergence(model: Model, result, eps_list: Sequence[float], N: int, seed: int,
                       h: float | None = None, threads: int | None = None) -> list[TiltRow]:
    """Runs under the feedback controls of a perturbation result, against its target path.

    Y(0) is drawn from the target's fast law on the first slice.
    """
    controls = result.controls()
    star = result.xi_star
    h = float(np.min(star.dt)) if h is None else h
    rows = []
    for k, eps in enumerate(eps_list):
        stats = batch_simulate(model, eps, star.x0, result.pi_star[0], star.T, h, N, seed=seed + k,
                               controls=controls, reference=star, threads=threads)
        cost = stats.cost
        rows.append(TiltRow(
            epsilon=float(eps),
            N=int(N),
            mean_sup_dev=float(stats.sup_dev.mean()),
            stderr_sup_dev=float(stats.sup_dev.std(ddof=1) / math.sqrt(N)),
            mean_cost=float(cost.mean()),
            stderr_cost=float(cost.std(ddof=1) / math.sqrt(N)),
            deterministic_cost=float(result.cost_star),
        ))
    return rows
