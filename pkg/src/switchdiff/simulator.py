"""Simulation of the slow/fast pair by Poisson-random-measure thinning.

While the fast state is ``i``, candidate points of the superposed channel
measures arrive at rate ``zeta * phi_max * n_i / eps``.  A candidate picks a
channel ``j`` uniformly among the ``n_i`` outgoing ones, a mark
``z ~ U[0, zeta]`` and a thinning level ``w ~ U[0, 1]``; it is accepted iff
``z <= rho_ij(X)`` and ``w * phi_max <= phi_ij``.  Between candidates the slow
state follows Euler-Maruyama with substeps ending at grid nodes or candidate
times.  Uncontrolled runs are controlled runs with ``u = 0``, ``phi = 1`` and
``phi_max = 1``, so both go through the same kernel and the same draws.

Draw order per trajectory (one counter-based stream each): optional initial
fast state (1 uniform), then per substep ``m`` normals, per candidate one
exponential for the next arrival plus three uniforms.
"""

from __future__ import annotations

import os
import types
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import rng as _rng
from .averaging import Path
from .model import AffineSwitching, Model, zeta_of

STATUS_OK = 0
STATUS_NONFINITE = 1
STATUS_PHI_MAX = 2


class SimulationError(RuntimeError):
    pass


# ------------------------------------------------------------ coefficients


@njit(cache=True, nogil=True)
def _aff_drift(p, x, y, out):
    B, beta = p[0], p[1]
    d = x.shape[0]
    for i in range(d):
        acc = beta[y, i]
        for j in range(d):
            acc += B[y, i, j] * x[j]
        out[i] = acc


@njit(cache=True, nogil=True)
def _aff_diff(p, x, y, out):
    A = p[2]
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = A[y, i, j]


@njit(cache=True, nogil=True)
def _aff_rho(p, x, i, j):
    c0, c1, w, r0, r1, v = p[3], p[4], p[5], p[6], p[7], p[8]
    sw = 0.0
    sv = 0.0
    for k in range(x.shape[0]):
        sw += w[i, k] * x[k]
        sv += v[k] * x[k]
    c = c0[i] + c1[i] * np.tanh(sw)
    r = r0[i, j] + r1[i, j] * np.tanh(sv)
    return c * r


def _py_drift(p, x, y, out):
    out[:] = p.drifts(x)[y]


def _py_diff(p, x, y, out):
    out[:, :] = p.diffusions(x)[y]


def _py_rho(p, x, i, j):
    return p.channel_rates(x)[i, j]


# ------------------------------------------------------------------ kernel


_coef_drift = _aff_drift
_coef_diff = _aff_diff
_coef_rho = _aff_rho


@njit(cache=True, nogil=True)
def _run_traj(p, eps, x0, y0, nu0, T, h, seed, stream, zeta, chan, nchan,
             cgrid, cu, cphi, cref, has_ref, phi_max, ref_path, record):
    d = x0.shape[0]
    m = cu.shape[2]
    L = nchan.shape[0]
    ust = np.zeros(8, dtype=np.uint64)
    fst = np.zeros(2)
    _rng.stream_init(ust, fst, seed, stream)

    K = ref_path.shape[0] - 1 if ref_path.shape[0] > 0 else int(np.ceil(T / h - 1e-9))
    has_path = ref_path.shape[0] > 0
    x = x0.copy()
    y = y0
    if y < 0:
        u0 = _rng.next_uniform(ust)
        acc = 0.0
        y = L - 1
        for s in range(L):
            acc += nu0[s]
            if u0 < acc:
                y = s
                break
    y_start = y

    bvec = np.zeros(d)
    amat = np.zeros((d, m))
    dw = np.zeros(m)
    occ = np.zeros(L)
    jcount = np.zeros((L, L), dtype=np.int64)
    ccount = np.zeros((L, L), dtype=np.int64)
    cap = 16 if record else 1
    jt = np.zeros(cap)
    jf = np.zeros(cap, dtype=np.int64)
    jto = np.zeros(cap, dtype=np.int64)
    xs = np.zeros((K + 1 if record else 1, d))
    ys = np.zeros(K + 1 if record else 1, dtype=np.int64)
    if record:
        xs[0] = x
        ys[0] = y
    n_jumps = 0
    cost_psi = 0.0
    cost_phi = 0.0
    sup_dev = 0.0
    if has_path:
        s0 = 0.0
        for i in range(d):
            s0 += (x[i] - ref_path[0, i]) ** 2
        sup_dev = np.sqrt(s0)
    status = 0
    err_t = 0.0
    err_i = -1
    err_j = -1
    sqeps = np.sqrt(eps)
    ncp = cgrid.shape[0] - 1
    piece = 0

    t = 0.0
    k = 0
    t_next = min(h, T) if K > 1 else T
    rate = zeta * phi_max * nchan[y] / eps
    t_c = t + _rng.next_exponential(ust) / rate if rate > 0 else np.inf

    while k < K:
        while piece + 1 < ncp and t >= cgrid[piece + 1]:
            piece += 1
        is_cand = t_c < t_next
        t_stop = t_c if is_cand else t_next
        dt = t_stop - t
        if dt > 0:
            _coef_drift(p, x, y, bvec)
            _coef_diff(p, x, y, amat)
            sdt = np.sqrt(dt)
            for l in range(m):
                dw[l] = sdt * _rng.next_normal(ust, fst)
            upen = 0.0
            for l in range(m):
                upen += cu[piece, y, l] * cu[piece, y, l]
            finite = True
            for i in range(d):
                inc = bvec[i]
                noise = 0.0
                for l in range(m):
                    inc += amat[i, l] * cu[piece, y, l]
                    noise += amat[i, l] * dw[l]
                x[i] = x[i] + inc * dt + sqeps * noise
                if not np.isfinite(x[i]):
                    finite = False
            cost_psi += 0.5 * upen * dt
            for ci in range(nchan[y]):
                j = chan[y, ci]
                ph = cphi[piece, y, j]
                if ph != 1.0:
                    if has_ref:
                        length = cref[piece, y, j]
                    else:
                        length = _coef_rho(p, x, y, j)
                    ell = 1.0 if ph == 0.0 else ph * np.log(ph) - ph + 1.0
                    cost_phi += length * ell * dt
            occ[y] += dt
            if not finite:
                status = 1
                err_t = t_stop
                break
        t = t_stop
        if is_cand:
            while piece + 1 < ncp and t >= cgrid[piece + 1]:
                piece += 1
            ci = int(_rng.next_uniform(ust) * nchan[y])
            if ci >= nchan[y]:
                ci = nchan[y] - 1
            j = chan[y, ci]
            z = zeta * _rng.next_uniform(ust)
            wv = _rng.next_uniform(ust)
            ccount[y, j] += 1
            ph = cphi[piece, y, j]
            if has_ref and z > cref[piece, y, j]:
                ph = 1.0
            if ph > phi_max:
                status = 2
                err_t = t
                err_i = y
                err_j = j
                break
            if z <= _coef_rho(p, x, y, j) and wv * phi_max <= ph:
                if record:
                    if n_jumps >= jt.shape[0]:
                        jt2 = np.zeros(2 * jt.shape[0])
                        jf2 = np.zeros(2 * jt.shape[0], dtype=np.int64)
                        jto2 = np.zeros(2 * jt.shape[0], dtype=np.int64)
                        jt2[: jt.shape[0]] = jt
                        jf2[: jt.shape[0]] = jf
                        jto2[: jt.shape[0]] = jto
                        jt, jf, jto = jt2, jf2, jto2
                    jt[n_jumps] = t
                    jf[n_jumps] = y
                    jto[n_jumps] = j
                n_jumps += 1
                jcount[y, j] += 1
                y = j
            rate = zeta * phi_max * nchan[y] / eps
            t_c = t + _rng.next_exponential(ust) / rate if rate > 0 else np.inf
        else:
            k += 1
            if record:
                xs[k] = x
                ys[k] = y
            if has_path:
                s2 = 0.0
                for i in range(d):
                    s2 += (x[i] - ref_path[k, i]) ** 2
                if np.sqrt(s2) > sup_dev:
                    sup_dev = np.sqrt(s2)
            t_next = T if k + 1 >= K else min((k + 1) * h, T)
    return (status, err_t, err_i, err_j, y_start, x, sup_dev, n_jumps, cost_psi, cost_phi,
            occ, jcount, ccount, xs, ys, jt[:n_jumps], jf[:n_jumps], jto[:n_jumps])

@njit(cache=True, nogil=True)
def _run_batch(p, eps, x0, y0, nu0, T, h, seed, lo, hi, zeta, chan, nchan,
              cgrid, cu, cphi, cref, has_ref, phi_max, ref_path,
              status, terminal, sup, njumps, cpsi, cphi_out, occ, jcount, ccount, ystart):
    for idx in range(lo, hi):
        res = _run_traj(p, eps, x0, y0, nu0, T, h, seed, idx + 1, zeta, chan, nchan,
                       cgrid, cu, cphi, cref, has_ref, phi_max, ref_path, False)
        status[idx] = res[0]
        ystart[idx] = res[4]
        terminal[idx] = res[5]
        sup[idx] = res[6]
        njumps[idx] = res[7]
        cpsi[idx] = res[8]
        cphi_out[idx] = res[9]
        occ[idx] = res[10]
        jcount[idx] = res[11]
        ccount[idx] = res[12]


def _interpreted_kernels():
    """Same kernel source, run by the interpreter with model-method coefficients."""
    g = dict(globals())
    g.update(_coef_drift=_py_drift, _coef_diff=_py_diff, _coef_rho=_py_rho)
    traj = types.FunctionType(_run_traj.py_func.__code__, g, "_run_traj")
    g["_run_traj"] = traj
    batch = types.FunctionType(_run_batch.py_func.__code__, g, "_run_batch")
    return traj, batch


def _kernels(model: Model):
    if isinstance(model.coeff, AffineSwitching):
        return _run_traj, _run_batch
    return _interpreted_kernels()


def _params(model: Model):
    if isinstance(model.coeff, AffineSwitching):
        c = model.coeff
        return tuple(np.ascontiguousarray(getattr(c, k), dtype=float) for k in AffineSwitching._fields)
    return model


def _channels(model: Model):
    L = model.L
    nchan = np.zeros(L, dtype=np.int64)
    chan = np.zeros((L, max(L - 1, 1)), dtype=np.int64)
    for i, j in model.T_set:
        chan[i, nchan[i]] = j
        nchan[i] += 1
    return chan, nchan


# --------------------------------------------------------------- controls


@dataclass
class FeedbackControls:
    """Piecewise-constant feedback controls on a time grid.

    ``u[k, i]`` is the drift control used while the fast state is ``i`` during
    ``[grid[k], grid[k+1])``; ``phi[k, i, j]`` the thinning level of channel
    ``(i, j)``.  With ``rho_ref`` given, ``phi`` applies to marks
    ``z <= rho_ref[k, i, j]`` and the level is 1 above it; otherwise ``phi``
    applies on the whole acceptance interval.
    """

    grid: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    rho_ref: np.ndarray | None = None
    phi_max: float | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        n = len(self.grid) - 1
        if n < 1 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("control grid must be strictly increasing with at least one piece")
        if self.u.shape[0] != n or self.phi.shape[0] != n:
            raise ValueError("control tables must have one row per grid piece")
        if np.any(self.phi < 0) or not np.all(np.isfinite(self.phi)) or not np.all(np.isfinite(self.u)):
            raise ValueError("controls must be finite with phi >= 0")
        if self.rho_ref is not None:
            self.rho_ref = np.asarray(self.rho_ref, dtype=float)
        top = float(self.phi.max())
        if self.rho_ref is not None:
            top = max(top, 1.0)
        if self.phi_max is None:
            self.phi_max = max(top, 1e-300)
        elif top > self.phi_max:
            raise ValueError(f"phi exceeds declared phi_max {self.phi_max}")

    @classmethod
    def identity(cls, model: Model, T: float, grid=None):
        grid = np.array([0.0, T]) if grid is None else np.asarray(grid, dtype=float)
        n = len(grid) - 1
        return cls(grid=grid, u=np.zeros((n, model.L, model.m)), phi=np.ones((n, model.L, model.L)))


# ------------------------------------------------------------- trajectory


@dataclass
class Trajectory:
    path: Path
    y_grid: np.ndarray
    jumps: list[tuple[float, int, int]]
    y0: int
    eps: float
    rng_id: tuple[int, int]
    cost_psi: float = 0.0
    cost_phi: float = 0.0
    occupation_time: np.ndarray = field(default=None, repr=False)
    candidates: np.ndarray = field(default=None, repr=False)

    @property
    def T(self) -> float:
        return float(self.path.grid[-1])


def time_grid(T: float, h: float) -> np.ndarray:
    if h <= 0:
        raise ValueError("step h must be positive")
    K = int(np.ceil(T / h - 1e-9))
    grid = np.minimum(np.arange(K + 1) * h, T)
    grid[-1] = T
    return grid


def _prepare(model, eps, x0, y0, T, h, controls):
    if eps <= 0:
        raise ValueError("eps must be positive")
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.asarray(x0, dtype=float).reshape(model.d)
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite initial state")
    if controls is None:
        controls = FeedbackControls.identity(model, T)
    if y0 is None:
        from .fastchain import nu

        y0, nu0 = -1, nu(model, x0)
    elif np.ndim(y0) == 1:
        nu0 = np.asarray(y0, dtype=float)
        if nu0.shape != (model.L,) or np.any(nu0 < 0) or abs(nu0.sum() - 1.0) > 1e-9:
            raise ValueError("initial fast law must be a probability vector over the fast states")
        y0 = -1
    else:
        if not 0 <= int(y0) < model.L:
            raise ValueError(f"initial fast state {y0} outside 0..{model.L - 1}")
        y0, nu0 = int(y0), np.zeros(model.L)
    has_ref = controls.rho_ref is not None
    cref = controls.rho_ref if has_ref else np.zeros((1, 1, 1))
    chan, nchan = _channels(model)
    return x0, y0, nu0, controls, has_ref, cref, chan, nchan


def simulate_controlled(model: Model, eps: float, controls: FeedbackControls | None, x0, y0, T: float,
                        h: float, seed: int = 0, stream: int = 1, zeta: float | None = None) -> Trajectory:
    """One controlled trajectory recorded on the grid ``k*h``.

    ``y0`` is a fast state, a probability vector to draw Y(0) from, or ``None``
    for a draw from nu(x0).
    """
    x0, y0, nu0, controls, has_ref, cref, chan, nchan = _prepare(model, eps, x0, y0, T, h, controls)
    zeta = zeta_of(model) if zeta is None else zeta
    run_traj, _ = _kernels(model)
    grid = time_grid(T, h)
    res = run_traj(_params(model), float(eps), x0, y0, nu0, float(T), float(h), int(seed), int(stream),
                   float(zeta), chan, nchan, controls.grid, controls.u, controls.phi, cref, has_ref,
                   float(controls.phi_max), np.zeros((len(grid), model.d)), True)
    _raise_status(res[0], res[1], res[2], res[3], stream)
    jumps = [(float(t), int(i), int(j)) for t, i, j in zip(res[15], res[16], res[17])]
    return Trajectory(
        path=Path(grid, res[13].copy()),
        y_grid=res[14].copy(),
        jumps=jumps,
        y0=int(res[4]),
        eps=float(eps),
        rng_id=(int(seed), int(stream)),
        cost_psi=float(res[8]),
        cost_phi=float(res[9]),
        occupation_time=res[10].copy(),
        candidates=res[12].copy(),
    )


def simulate(model: Model, eps: float, x0, y0, T: float, h: float, seed: int = 0, stream: int = 1,
             zeta: float | None = None) -> Trajectory:
    return simulate_controlled(model, eps, None, x0, y0, T, h, seed=seed, stream=stream, zeta=zeta)


def _raise_status(status, t, i, j, stream):
    if status == STATUS_NONFINITE:
        raise SimulationError(f"non-finite slow state at t={t:.6g} (trajectory stream {stream})")
    if status == STATUS_PHI_MAX:
        raise SimulationError(f"phi_max exceeded on channel ({i + 1},{j + 1}) at t={t:.6g} (stream {stream})")


def occupation_measure(traj: Trajectory, t: float | None = None) -> np.ndarray:
    """Fraction of [0, t] spent in each fast state, from the exact jump record."""
    T = traj.T
    t = T if t is None else float(t)
    if not 0 < t <= T:
        raise ValueError(f"t={t} outside (0, {T}]")
    L = len(traj.occupation_time)
    occ = np.zeros(L)
    y, last = traj.y0, 0.0
    for tj, _, to in traj.jumps:
        if tj > t:
            break
        occ[y] += tj - last
        y, last = to, tj
    occ[y] += t - last
    return occ / occ.sum()


# --------------------------------------------------------------- ensembles


@dataclass
class EnsembleStats:
    terminal: np.ndarray
    sup_dev: np.ndarray
    n_jumps: np.ndarray
    cost_psi: np.ndarray
    cost_phi: np.ndarray
    occupation: np.ndarray
    jump_counts: np.ndarray
    candidate_counts: np.ndarray
    y0: np.ndarray
    seed: int

    @property
    def N(self) -> int:
        return len(self.sup_dev)

    @property
    def cost(self) -> np.ndarray:
        return self.cost_psi + self.cost_phi

    def rows(self):
        for k in range(self.N):
            yield [k + 1, *self.terminal[k], self.sup_dev[k], int(self.n_jumps[k]), self.cost_psi[k], self.cost_phi[k]]

    def header(self):
        d = self.terminal.shape[1]
        return ["traj_index", *[f"terminal_x_{i + 1}" for i in range(d)], "sup_dev", "n_jumps", "cost_psi", "cost_phi"]


def thread_count(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("SWITCHDIFF_THREADS", "1") or 1)
    return max(1, int(threads))


def batch_simulate(model: Model, eps: float, x0, y0, T: float, h: float, N: int, seed: int = 0,
                   controls: FeedbackControls | None = None, reference: Path | None = None,
                   threads: int | None = None, zeta: float | None = None) -> EnsembleStats:
    """N trajectories on streams (seed, 1..N); results are ordered by index and schedule independent."""
    if N < 1:
        raise ValueError("N must be at least 1")
    x0, y0, nu0, controls, has_ref, cref, chan, nchan = _prepare(model, eps, x0, y0, T, h, controls)
    zeta = zeta_of(model) if zeta is None else zeta
    grid = time_grid(T, h)
    if reference is not None:
        ref = reference.at(grid)
    else:
        ref = np.zeros((0, model.d))
    L, d = model.L, model.d
    out = dict(
        status=np.zeros(N, dtype=np.int64),
        terminal=np.zeros((N, d)),
        sup=np.full(N, np.nan) if reference is None else np.zeros(N),
        njumps=np.zeros(N, dtype=np.int64),
        cpsi=np.zeros(N),
        cphi=np.zeros(N),
        occ=np.zeros((N, L)),
        jcount=np.zeros((N, L, L), dtype=np.int64),
        ccount=np.zeros((N, L, L), dtype=np.int64),
        ystart=np.zeros(N, dtype=np.int64),
    )
    _, run_batch = _kernels(model)
    p = _params(model)
    nthreads = min(thread_count(threads), N)
    bounds = np.linspace(0, N, nthreads + 1).astype(int)

    def work(lo, hi):
        run_batch(p, float(eps), x0, y0, nu0, float(T), float(h), int(seed), int(lo), int(hi), float(zeta),
                  chan, nchan, controls.grid, controls.u, controls.phi, cref, has_ref, float(controls.phi_max), ref,
                  out["status"], out["terminal"], out["sup"], out["njumps"], out["cpsi"], out["cphi"],
                  out["occ"], out["jcount"], out["ccount"], out["ystart"])

    if nthreads == 1:
        work(0, N)
    else:
        with ThreadPoolExecutor(nthreads) as pool:
            list(pool.map(work, bounds[:-1], bounds[1:]))
    bad = np.flatnonzero(out["status"])
    if len(bad):
        k = int(bad[0])
        raise SimulationError(f"trajectory {k + 1} failed with status {int(out['status'][k])}")
    if reference is None:
        out["sup"][:] = np.nan
    return EnsembleStats(
        terminal=out["terminal"],
        sup_dev=out["sup"],
        n_jumps=out["njumps"],
        cost_psi=out["cpsi"],
        cost_phi=out["cphi"],
        occupation=out["occ"],
        jump_counts=out["jcount"],
        candidate_counts=out["ccount"],
        y0=out["ystart"],
        seed=int(seed),
    )
