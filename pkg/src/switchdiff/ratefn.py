"""Local rate L(x, beta), path rate I(xi) and the jump-rate scaling step.

The jump controls are represented by channel rates ``q_ij`` (thinning levels
constant on each acceptance interval), and the fast law is eliminated as
``pi = pi(q)``, the stationary vector of the controlled generator.  The search
variable is ``theta`` with ``q_ij = rho_ij * exp(theta_ij)`` over ``T_set``.

When the diffusion span ``range(sum_i a_i a_i^T)`` is a proper subspace, only
velocities with ``U_perp^T (beta - b_bar(pi)) = 0`` are reachable; that
constraint is imposed explicitly (SLSQP followed by a Gauss-Newton projection).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize

from .fastchain import JumpGeometry, jump_geometry, rate_matrix, stationary
from .model import Model

_SENTINEL = 1e30  # objective value standing in for +inf inside the optimizers
_THETA_BOX = 30.0


def ell(v):
    """Relative-entropy density v log v - v + 1, with ell(0) = 1."""
    arr = np.asarray(v, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ValueError("ell is defined for v >= 0 only")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(arr > 0, arr * np.log(np.where(arr > 0, arr, 1.0)) - arr + 1.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ControlTriple:
    """Per-slice controls: fast law ``pi``, channel rates ``q`` (L x L), drift controls ``u`` (L x m)."""

    pi: np.ndarray
    q: np.ndarray
    u: np.ndarray

    def stationarity_residual(self) -> float:
        return float(np.max(np.abs(self.pi @ rate_matrix(self.q))))


@dataclass
class LocalRateResult:
    value: float
    argmin: ControlTriple | None
    feasible: bool
    iterations: int = 0
    restarts: int = 0
    grad_norm: float = float("nan")
    converged: bool = True
    degenerate: bool = False
    theta: np.ndarray | None = field(default=None, repr=False)
    message: str = ""


@dataclass
class RateOptions:
    n_starts: int = 8
    theta_range: float = 3.0
    seed: int = 0
    gtol: float = 1e-9
    maxiter: int = 400
    fd_step: float = 1e-6
    rank_tol: float = 1e-10
    feas_tol: float = 1e-9
    # "adjoint" (exact) or "fd" (central differences) for the theta-gradient
    gradient: str = "adjoint"
    # warm start, tried before the regular starts
    theta0: np.ndarray | None = None


# --------------------------------------------------------------- pieces


def _pinv_solve(G, r, rank_tol):
    """(G^+ r, projection of r off range(G)) via the SVD of the symmetric PSD G."""
    U, s, _ = np.linalg.svd(G)
    smax = s[0] if len(s) else 0.0
    keep = s > rank_tol * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    Uk = U[:, keep]
    coef = Uk.T @ r
    w = Uk @ (coef / s[keep])
    perp = r - Uk @ coef
    return w, perp


def inner_quadratic(model: Model, x, pi, beta, rank_tol: float = 1e-10, feas_tol: float = 1e-9):
    """min sum_i pi_i |u_i|^2 / 2 subject to sum_i pi_i a_i u_i = beta - b_bar(pi).

    Returns ``(value, u, feasible)``; ``value`` is ``inf`` and ``u`` is ``None``
    when the residual is not in the range of the weighted Gram matrix.
    """
    pi = np.asarray(pi, dtype=float)
    b = model.drifts(x)
    a = model.diffusions(x)
    return _inner(b, a, pi, np.asarray(beta, dtype=float).reshape(model.d), rank_tol, feas_tol)


def _inner(b, a, pi, beta, rank_tol, feas_tol):
    G = np.einsum("i,idm,iem->de", pi, a, a)
    r = beta - pi @ b
    w, perp = _pinv_solve(G, r, rank_tol)
    scale = max(1.0, float(np.linalg.norm(beta)), float(pi @ np.linalg.norm(b, axis=1)))
    if np.linalg.norm(perp) > feas_tol * scale:
        return math.inf, None, False
    u = np.einsum("idm,d->im", a, w)
    return 0.5 * float(r @ w), u, True


def jump_cost(geometry: JumpGeometry, pi, q) -> float:
    """sum over T_set of pi_i rho_ij ell(q_ij / rho_ij)."""
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    total = 0.0
    for k, (i, j) in enumerate(geometry.T_set):
        qij = q[k] if q.ndim == 1 else q[i, j]
        rho = geometry.rho[i, j]
        total += pi[i] * rho * ell(qij / rho)
    return float(total)


def min_jump_cost(geometry: JumpGeometry, pi) -> tuple[float, np.ndarray]:
    """Cheapest jump cost among rates that keep ``pi`` stationary.

    Solved through the concave dual ``max_h sum pi_i rho_ij (1 - exp(h_j - h_i))``,
    whose maximiser gives ``q_ij = rho_ij exp(h_j - h_i)``.  Needs ``pi > 0``.
    """
    pi = np.asarray(pi, dtype=float)
    L = geometry.L
    if L == 1:
        return 0.0, np.zeros((1, 1))
    if np.any(pi <= 0):
        raise ValueError("min_jump_cost needs a strictly positive pi")
    I = np.array([i for i, _ in geometry.T_set])
    J = np.array([j for _, j in geometry.T_set])
    w = pi[I] * geometry.rho[I, J]

    def neg(hfree):
        h = np.concatenate([[0.0], hfree])
        e = w * np.exp(h[J] - h[I])
        g = np.bincount(J, e, L) - np.bincount(I, e, L)
        return e.sum() - w.sum(), g[1:]

    def hess(hfree):
        h = np.concatenate([[0.0], hfree])
        e = w * np.exp(h[J] - h[I])
        H = np.zeros((L, L))
        np.add.at(H, (J, J), e)
        np.add.at(H, (I, I), e)
        np.add.at(H, (I, J), -e)
        np.add.at(H, (J, I), -e)
        return H[1:, 1:]

    # damped Newton on the smooth concave dual (h_0 = 0 fixes the shift);
    # stops on the Newton decrement, which is what round-off allows
    scale = max(1.0, w.sum())
    hf = np.zeros(L - 1)
    val, g = neg(hf)
    for _ in range(100):
        step = np.linalg.solve(hess(hf) + 1e-300 * np.eye(L - 1), g)
        dec = g @ step
        if not dec > 1e-24 * scale:
            break
        t = 1.0
        while t > 1e-12:
            v2, g2 = neg(hf - t * step)
            if v2 <= val - 1e-4 * t * dec:
                break
            t *= 0.5
        if t <= 1e-12:
            break
        hf = hf - t * step
        val, g = v2, g2
    h = np.concatenate([[0.0], hf])
    q = np.zeros((L, L))
    q[I, J] = geometry.rho[I, J] * np.exp(h[J] - h[I])
    return float(-val), q


# ------------------------------------------------------------ the slice


class _Slice:
    """theta-objective at a fixed (x, beta)."""

    def __init__(self, model: Model, x, beta, opts: RateOptions):
        self.model = model
        self.opts = opts
        self.x = np.asarray(x, dtype=float).reshape(model.d)
        self.beta = np.asarray(beta, dtype=float).reshape(model.d)
        self.b = model.drifts(self.x)
        self.a = model.diffusions(self.x)
        self.geom = jump_geometry(model, self.x)
        self.I = np.array([i for i, _ in model.T_set], dtype=int)
        self.J = np.array([j for _, j in model.T_set], dtype=int)
        self.rho_T = self.geom.rho[self.I, self.J]
        S = np.einsum("idm,iem->de", self.a, self.a)
        U, s, _ = np.linalg.svd(S)
        smax = s[0]
        keep = s > opts.rank_tol * smax if smax > 0 else np.zeros(model.d, dtype=bool)
        self.Uperp = U[:, ~keep]
        self.degenerate = self.Uperp.shape[1] > 0

    @property
    def n(self) -> int:
        return len(self.I)

    def rates(self, theta):
        q = np.zeros((self.model.L, self.model.L))
        q[self.I, self.J] = self.rho_T * np.exp(theta)
        return q

    def _system(self, theta):
        """Transposed generator with its last row replaced by ones."""
        L = self.model.L
        A = np.zeros((L, L))
        qT = self.rho_T * np.exp(theta)
        np.add.at(A, (self.J, self.I), qT)
        np.add.at(A, (self.I, self.I), -qT)
        A[-1, :] = 1.0
        return A

    def pi(self, theta):
        return stationary(rate_matrix(self.rates(theta)), check=False)

    def _fast_pi(self, theta):
        A = self._system(theta)
        rhs = np.zeros(self.model.L)
        rhs[-1] = 1.0
        return np.linalg.solve(A, rhs), A

    def _quad(self, pi):
        """(value, w) of the inner problem, using only the component of r in range(G)."""
        G = np.einsum("i,idm,iem->de", pi, self.a, self.a)
        r = self.beta - pi @ self.b
        if self.degenerate:
            w, _ = _pinv_solve(G, r, self.opts.rank_tol)
        else:
            w = np.linalg.solve(G, r)
        return 0.5 * float(r @ w), w

    def parts(self, theta):
        """(quadratic part, jump part, pi)."""
        if np.any(np.abs(theta) > 60):
            return _SENTINEL, 0.0, None
        try:
            pi, _ = self._fast_pi(theta)
        except np.linalg.LinAlgError:
            return _SENTINEL, 0.0, None
        if not np.all(np.isfinite(pi)) or np.any(pi <= 0):
            return _SENTINEL, 0.0, None
        try:
            qv, _ = self._quad(pi)
        except np.linalg.LinAlgError:
            return _SENTINEL, 0.0, None
        e = np.exp(theta)
        jump = float((pi[self.I] * self.rho_T * (theta * e - e + 1.0)).sum())
        return qv, jump, pi

    def objective(self, theta) -> float:
        qv, jv, _ = self.parts(theta)
        val = qv + jv
        return val if np.isfinite(val) and val < _SENTINEL else _SENTINEL

    def _adjoint(self, A, pi, dpi):
        """d/dtheta of g(pi(theta)) given dg/dpi, through the stationarity system."""
        lam = np.linalg.solve(A.T, dpi)
        lam[-1] = 0.0
        qT = self.rho_T * np.exp(self._theta)
        return -qT * pi[self.I] * (lam[self.J] - lam[self.I])

    def adjoint_grad(self, theta) -> np.ndarray:
        """Exact gradient of the objective by the adjoint of the stationarity solve."""
        theta = np.asarray(theta, dtype=float)
        if np.any(np.abs(theta) > 60):
            return np.zeros_like(theta)
        self._theta = theta
        pi, A = self._fast_pi(theta)
        _, w = self._quad(pi)
        e = np.exp(theta)
        ellv = theta * e - e + 1.0
        dpi = -(self.b @ w) - 0.5 * np.sum(np.einsum("idm,d->im", self.a, w) ** 2, axis=1)
        np.add.at(dpi, self.I, self.rho_T * ellv)
        return pi[self.I] * self.rho_T * theta * e + self._adjoint(A, pi, dpi)

    def grad(self, theta) -> np.ndarray:
        if self.opts.gradient == "fd":
            return fd_gradient(self.objective, theta, self.opts.fd_step)
        return self.adjoint_grad(theta)

    def constraint(self, theta) -> np.ndarray:
        pi, _ = self._fast_pi(theta)
        return self.Uperp.T @ (self.beta - pi @ self.b)

    def constraint_jac(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        self._theta = theta
        pi, A = self._fast_pi(theta)
        C = -(self.Uperp.T @ self.b.T)
        return np.array([self._adjoint(A, pi, C[r]) for r in range(C.shape[0])]).reshape(C.shape[0], self.n)

    def triple(self, theta):
        pi = self.pi(theta)
        val, u, ok = _inner(self.b, self.a, pi, self.beta, self.opts.rank_tol, self.opts.feas_tol)
        if not ok:
            return math.inf, None
        q = self.rates(theta)
        total = val + jump_cost(self.geom, pi, q)
        return total, ControlTriple(pi=pi, q=q, u=u)


def fd_gradient(f, theta, step: float = 1e-6) -> np.ndarray:
    """Central differences with relative step ``step * max(1, |theta_k|)``."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        h = step * max(1.0, abs(theta[k]))
        tp = theta.copy()
        tm = theta.copy()
        tp[k] += h
        tm[k] -= h
        g[k] = (f(tp) - f(tm)) / (2 * h)
    return g


def theta_objective(model: Model, x, beta, opts: RateOptions | None = None):
    """The theta-objective at (x, beta) as a plain callable (for diagnostics)."""
    return _Slice(model, x, beta, opts or RateOptions()).objective


def _starts(sl: _Slice, opts: RateOptions, extra=()):
    rng = np.random.default_rng(opts.seed)
    starts = []
    if opts.theta0 is not None and len(opts.theta0) == sl.n:
        starts.append(np.asarray(opts.theta0, dtype=float))
    starts.append(np.zeros(sl.n))
    starts.extend(extra)
    while len(starts) < max(opts.n_starts, 1) + (opts.theta0 is not None):
        starts.append(rng.uniform(-opts.theta_range, opts.theta_range, sl.n))
    return starts


def _feasible_pi(sl: _Slice):
    """Strictly positive pi meeting the reachability constraint, or None.

    LP: maximise t subject to sum(pi) = 1, U_perp^T b^T pi = U_perp^T beta, pi_i >= t.
    """
    L = sl.model.L
    if _slice_dim(sl) == 0:
        pi = np.linalg.lstsq(_constraint_matrix(sl), np.concatenate([[1.0], sl.Uperp.T @ sl.beta]), rcond=None)[0]
        return pi if pi.min() > 1e-12 else None
    C = sl.Uperp.T @ sl.b.T
    A_eq = np.zeros((1 + C.shape[0], L + 1))
    A_eq[0, :L] = 1.0
    A_eq[1:, :L] = C
    b_eq = np.concatenate([[1.0], sl.Uperp.T @ sl.beta])
    A_ub = np.hstack([-np.eye(L), np.ones((L, 1))])
    c = np.zeros(L + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(L), A_eq=A_eq, b_eq=b_eq,
                  bounds=[(0, None)] * L + [(None, 1.0)], method="highs")
    if res.status != 0 or -res.fun <= 1e-12:
        return None
    pi = np.clip(res.x[:L], 0.0, None)
    return pi / pi.sum()


def _constraint_matrix(sl: _Slice) -> np.ndarray:
    return np.vstack([np.ones(sl.model.L), sl.Uperp.T @ sl.b.T])


def _slice_dim(sl: _Slice) -> int:
    """Dimension of the affine set of fast laws meeting the reachability constraint."""
    s = np.linalg.svd(_constraint_matrix(sl), compute_uv=False)
    return sl.model.L - int((s > 1e-12 * s[0]).sum())


def _project(sl: _Slice, theta, iters: int = 30):
    """Gauss-Newton steps onto U_perp^T (beta - b_bar(pi(theta))) = 0."""
    for _ in range(iters):
        with np.errstate(all="ignore"):
            try:
                c = sl.constraint(theta)
                if not np.all(np.isfinite(c)):
                    return theta
                if np.linalg.norm(c) <= 1e-14 * max(1.0, np.linalg.norm(sl.beta)):
                    break
                step = np.linalg.pinv(sl.constraint_jac(theta)) @ c
            except np.linalg.LinAlgError:
                return theta
        if not np.all(np.isfinite(step)):
            return theta
        theta = theta - step
    return theta


def local_rate(model: Model, x, beta, opts: RateOptions | None = None) -> LocalRateResult:
    """L(x, beta) by multistart quasi-Newton over theta (SLSQP when degenerate)."""
    opts = opts or RateOptions()
    sl = _Slice(model, x, beta, opts)

    if sl.n == 0:
        pi = np.ones(1)
        val, u, ok = _inner(sl.b, sl.a, pi, sl.beta, opts.rank_tol, opts.feas_tol)
        if not ok:
            return LocalRateResult(math.inf, None, False, degenerate=sl.degenerate, message="velocity not reachable")
        return LocalRateResult(val, ControlTriple(pi, np.zeros((1, 1)), u), True, grad_norm=0.0,
                               degenerate=sl.degenerate, theta=np.zeros(0))

    if sl.degenerate:
        return _local_rate_constrained(sl, opts)

    best = None
    iters = 0
    starts = _starts(sl, opts)
    for th in starts:
        res = minimize(sl.objective, th, jac=sl.grad, method="BFGS",
                       options={"gtol": opts.gtol, "maxiter": opts.maxiter})
        iters += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    g = sl.grad(best.x)
    value, triple = sl.triple(best.x)
    return LocalRateResult(
        value=value,
        argmin=triple,
        feasible=triple is not None,
        iterations=iters,
        restarts=len(starts),
        grad_norm=float(np.linalg.norm(g)),
        converged=bool(np.linalg.norm(g) < 1e-5 * max(1.0, abs(value))),
        theta=best.x,
    )


def _local_rate_constrained(sl: _Slice, opts: RateOptions) -> LocalRateResult:
    pi0 = _feasible_pi(sl)
    if pi0 is None:
        return LocalRateResult(math.inf, None, False, degenerate=True,
                               message="velocity outside the reachable set for every fast law")
    _, q0 = min_jump_cost(sl.geom, pi0)
    theta_f = np.log(q0[sl.I, sl.J] / sl.rho_T)
    if _slice_dim(sl) == 0:
        # pi is pinned by the constraint, so the dual minimiser is the theta-minimiser
        value, triple = sl.triple(theta_f)
        if triple is not None:
            return LocalRateResult(value, triple, True, iterations=0, restarts=1, grad_norm=0.0,
                                   degenerate=True, theta=theta_f, message="fast law pinned by the constraint")
    starts = _starts(sl, opts, extra=[theta_f])
    cons = {"type": "eq", "fun": sl.constraint, "jac": sl.constraint_jac}
    best_val, best_theta, iters = math.inf, None, 0
    for th in starts:
        with np.errstate(all="ignore"):
            res = minimize(sl.objective, th, jac=sl.grad, method="SLSQP", constraints=[cons],
                           bounds=[(-_THETA_BOX, _THETA_BOX)] * sl.n,
                           options={"ftol": 1e-14, "maxiter": opts.maxiter})
        iters += int(res.nit)
        theta = _project(sl, res.x)
        if np.any(np.abs(theta) > 60):
            continue
        val, triple = sl.triple(theta)
        if triple is not None and val < best_val:
            best_val, best_theta = val, theta
    if best_theta is None:
        # every start drifted off the constraint; the LP point is feasible by construction
        best_theta = _project(sl, theta_f)
        best_val, _ = sl.triple(best_theta)
    value, triple = sl.triple(best_theta)
    if triple is None:
        return LocalRateResult(math.inf, None, False, iterations=iters, restarts=len(starts), degenerate=True,
                               converged=False, message="no start reached the reachability constraint")
    # projected gradient as the stationarity measure
    g = sl.grad(best_theta)
    Jc = sl.constraint_jac(best_theta)
    g_proj = g - np.linalg.pinv(Jc) @ (Jc @ g) if Jc.size else g
    return LocalRateResult(
        value=value,
        argmin=triple,
        feasible=True,
        iterations=iters,
        restarts=len(starts),
        grad_norm=float(np.linalg.norm(g_proj)),
        converged=bool(np.linalg.norm(g_proj) < 1e-4 * max(1.0, abs(value))),
        degenerate=True,
        theta=best_theta,
    )


# --------------------------------------------------------- brute force


def _batch_stationary(q: np.ndarray) -> np.ndarray:
    """Stationary vectors of a stack of off-diagonal rate matrices (N, L, L)."""
    N, L, _ = q.shape
    Q = q.copy()
    idx = np.arange(L)
    Q[:, idx, idx] = 0.0
    Q[:, idx, idx] = -Q.sum(axis=2)
    A = np.transpose(Q, (0, 2, 1)).copy()
    A[:, -1, :] = 1.0
    rhs = np.zeros((N, L, 1))
    rhs[:, -1, 0] = 1.0
    return np.linalg.solve(A, rhs)[:, :, 0]


def local_rate_bruteforce(model: Model, x, beta, theta_range: float = 3.0, n: int = 25,
                          chunk: int = 100_000, rank_tol: float = 1e-10,
                          feas_tol: float = 1e-9) -> tuple[float, float]:
    """Exhaustive grid search; returns ``(best value, grid resolution)``.

    Full-span diffusion: grid of ``n`` points per axis on ``[-R, R]`` for each
    theta_ij.  Restricted span: the reachable fast laws form an affine slice of
    the simplex; it is gridded directly (resolution ``1/n``) and each grid law
    is priced with :func:`min_jump_cost`.  Every grid point is feasible, so the
    best grid value is an upper bound on L.
    """
    sl = _Slice(model, x, beta, RateOptions(rank_tol=rank_tol, feas_tol=feas_tol))
    if sl.n == 0:
        val, _, _ = _inner(sl.b, sl.a, np.ones(1), sl.beta, rank_tol, feas_tol)
        return val, 0.0
    if sl.degenerate:
        return _bruteforce_slice(sl, n, rank_tol, feas_tol)

    axis = np.linspace(-theta_range, theta_range, n)
    res = axis[1] - axis[0] if n > 1 else 0.0
    total = n ** sl.n
    L = model.L
    best = math.inf
    for lo in range(0, total, chunk):
        flat = np.arange(lo, min(lo + chunk, total))
        digits = np.stack(np.unravel_index(flat, (n,) * sl.n), axis=1)
        theta = axis[digits]
        e = np.exp(theta)
        q = np.zeros((len(flat), L, L))
        q[:, sl.I, sl.J] = sl.rho_T * e
        pi = _batch_stationary(q)
        G = np.einsum("ni,idm,iem->nde", pi, sl.a, sl.a)
        r = sl.beta - pi @ sl.b
        w = np.einsum("nde,ne->nd", np.linalg.pinv(G, rcond=rank_tol, hermitian=True), r)
        quad = 0.5 * np.einsum("nd,nd->n", r, w)
        jump = (pi[:, sl.I] * sl.rho_T * (theta * e - e + 1.0)).sum(axis=1)
        vals = quad + jump
        vals[~np.isfinite(vals) | np.any(pi <= 0, axis=1)] = math.inf
        best = min(best, float(vals.min()))
    return best, float(res)


def _bruteforce_slice(sl: _Slice, n: int, rank_tol: float, feas_tol: float):
    pi0 = _feasible_pi(sl)
    if pi0 is None:
        return math.inf, 0.0
    _, s, Vt = np.linalg.svd(_constraint_matrix(sl))
    rank = int((s > 1e-12 * s[0]).sum())
    N = Vt[rank:].T  # null-space directions of the affine constraints
    if N.shape[1] == 0:
        pts = pi0[None, :]
        res = 0.0
    else:
        axis = np.linspace(-1.0, 1.0, 2 * n + 1)
        res = axis[1] - axis[0]
        grids = np.meshgrid(*([axis] * N.shape[1]), indexing="ij")
        coords = np.stack([g.ravel() for g in grids], axis=1)
        pts = pi0 + coords @ N.T
        pts = pts[np.all(pts > 1e-9, axis=1)]
    best = math.inf
    for pi in pts:
        val, _, ok = _inner(sl.b, sl.a, pi, sl.beta, rank_tol, feas_tol)
        if not ok:
            continue
        jc, _ = min_jump_cost(sl.geom, pi)
        best = min(best, val + jc)
    return best, float(res)


# ------------------------------------------------------------ path level


@dataclass
class SliceRecord:
    t_mid: float
    slope: np.ndarray
    result: LocalRateResult


@dataclass
class PathRateResult:
    value: float
    feasible: bool
    records: list[SliceRecord]
    bad_interval: int | None = None

    def csv_header(self, model: Model) -> list[str]:
        d = len(self.records[0].slope) if self.records else model.d
        return (["t_mid", *[f"slope_{k + 1}" for k in range(d)], "L_value", "feasible"]
                + [f"pi_{i + 1}" for i in range(model.L)]
                + [f"q_({i + 1},{j + 1})" for i, j in model.T_set] + ["cumulative_I"])

    def csv_rows(self, path, model: Model):
        cum = 0.0
        for k, rec in enumerate(self.records):
            res = rec.result
            cum += res.value * path.dt[k]
            if res.argmin is not None:
                pi = list(res.argmin.pi)
                q = [res.argmin.q[i, j] for i, j in model.T_set]
            else:
                pi = [math.nan] * model.L
                q = [math.nan] * len(model.T_set)
            yield [rec.t_mid, *rec.slope, res.value, int(res.feasible), *pi, *q, cum]


def path_rate(model: Model, path, opts: RateOptions | None = None, warm: bool = True) -> PathRateResult:
    """I(xi) by the midpoint rule: sum_k L(xi(t_k^mid), slope_k) dt_k.

    With ``warm`` each slice also starts from the previous slice's minimiser.
    """
    opts = opts or RateOptions()
    records = []
    total = 0.0
    bad = None
    theta = None
    tmid = 0.5 * (path.grid[1:] + path.grid[:-1])
    for k, (xm, slope) in enumerate(zip(path.midpoints, path.slopes)):
        o = dataclasses.replace(opts, theta0=theta) if warm and theta is not None else opts
        res = local_rate(model, xm, slope, o)
        records.append(SliceRecord(float(tmid[k]), slope.copy(), res))
        if not res.feasible:
            if bad is None:
                bad = k
        else:
            total += res.value * path.dt[k]
            theta = res.theta
    if bad is not None:
        return PathRateResult(math.inf, False, records, bad)
    return PathRateResult(total, True, records)


def midpoint_convexity_gap(model: Model, x, beta1, beta2, opts: RateOptions | None = None) -> float:
    """L(x, mid) - (L(x, beta1) + L(x, beta2)) / 2; a positive value flags non-convexity in beta."""
    beta1 = np.asarray(beta1, dtype=float)
    beta2 = np.asarray(beta2, dtype=float)
    mid = local_rate(model, x, 0.5 * (beta1 + beta2), opts).value
    return mid - 0.5 * (local_rate(model, x, beta1, opts).value + local_rate(model, x, beta2, opts).value)


# ------------------------------------------------------- jump-rate scaling


def cap_rate_control(geometry: JumpGeometry, pi, q):
    """Uniform rescaling of the jump rates with the closed-form optimal factor.

    With ``v = 1 + sum pi_i q_ij`` and ``qbar = q / v``, the rescaled control is
    ``alpha * qbar / rho_ij`` on ``E_ij`` and ``alpha / v`` on the complement
    (length ``zeta - rho_ij``).  Returns ``(alpha, capped q, cost)``; the cost
    counts both parts and is at most the input jump cost (``alpha = v``
    reproduces the input).
    """
    pi = np.asarray(pi, dtype=float)
    q = np.asarray(q, dtype=float)
    pairs = geometry.T_set
    if not pairs:
        return 1.0, q.copy(), 0.0
    qT = np.array([q[k] if q.ndim == 1 else q[i, j] for k, (i, j) in enumerate(pairs)])
    if np.any(qT <= 0):
        raise ValueError("cap_rate_control needs q > 0 on T_set")
    rho = np.array([geometry.rho[i, j] for i, j in pairs])
    w = np.array([pi[i] for i, _ in pairs])
    v = 1.0 + float((w * qT).sum())
    qbar = qT / v
    comp = geometry.zeta - rho
    num = (w * (qbar * np.log(qbar / rho) + (comp / v) * np.log(1.0 / v))).sum()
    den = (w * (qbar + comp / v)).sum()
    alpha = float(np.exp(-num / den))
    capped_T = alpha * qbar
    cost = float((w * (rho * ell(capped_T / rho) + comp * ell(alpha / v))).sum())
    capped = np.zeros_like(q) if q.ndim == 2 else np.zeros(len(pairs))
    for k, (i, j) in enumerate(pairs):
        if q.ndim == 2:
            capped[i, j] = capped_T[k]
        else:
            capped[k] = capped_T[k]
    return alpha, capped, cost
