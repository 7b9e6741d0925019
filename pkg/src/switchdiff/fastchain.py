"""The fast chain at a frozen slow state: geometry, generators, stationary laws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .model import Model


class ReducibleChainError(ValueError):
    def __init__(self, components):
        self.components = components
        super().__init__(f"rate matrix is reducible; strongly connected components: {components}")


class ConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class JumpGeometry:
    """Channel interval lengths rho_ij = c_i r_ij; E_ij = [0, rho_ij] in [0, zeta]."""

    rho: np.ndarray
    zeta: float
    T_set: tuple[tuple[int, int], ...]

    @property
    def L(self) -> int:
        return self.rho.shape[0]

    def channel_values(self) -> np.ndarray:
        return np.array([self.rho[i, j] for i, j in self.T_set])


def jump_geometry(model: Model, x, zeta: float | None = None) -> JumpGeometry:
    from .model import zeta_of

    return JumpGeometry(
        rho=model.channel_rates(x),
        zeta=zeta_of(model) if zeta is None else zeta,
        T_set=model.T_set,
    )


def rate_matrix(offdiag: np.ndarray) -> np.ndarray:
    q = np.array(offdiag, dtype=float)
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


def generator(model: Model, x) -> np.ndarray:
    return rate_matrix(model.channel_rates(x))


def controlled_generator(geometry: JumpGeometry, q) -> np.ndarray:
    """Generator whose off-diagonal rates are ``q`` on T_set.

    ``q`` is either an ``(L, L)`` array (entries off T_set must be zero) or a
    vector ordered like ``geometry.T_set``.
    """
    L = geometry.L
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        full = np.zeros((L, L))
        for k, (i, j) in enumerate(geometry.T_set):
            full[i, j] = q[k]
        q = full
    if np.any(q < 0):
        raise ValueError("negative channel rate")
    mask = np.zeros((L, L), dtype=bool)
    for i, j in geometry.T_set:
        mask[i, j] = True
    if np.any(q[~mask & ~np.eye(L, dtype=bool)] != 0):
        raise ValueError("rates off T_set must be zero")
    return rate_matrix(np.where(mask, q, 0.0))


def strong_components(q: np.ndarray) -> list[list[int]]:
    adj = (q > 0) & ~np.eye(len(q), dtype=bool)
    n, labels = connected_components(adj.astype(float), directed=True, connection="strong")
    return [sorted(np.flatnonzero(labels == k).tolist()) for k in range(n)]


def stationary(q: np.ndarray, check: bool = True) -> np.ndarray:
    """pi with pi Q = 0, sum(pi) = 1, by a dense solve of Q^T with one row replaced."""
    q = np.asarray(q, dtype=float)
    n = len(q)
    if n == 1:
        return np.ones(1)
    if check:
        comps = strong_components(q)
        if len(comps) > 1:
            raise ReducibleChainError(comps)
    a = q.T.copy()
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi = np.linalg.solve(a, rhs)
    # one step of iterative refinement keeps ||pi Q|| at rounding level
    pi += np.linalg.solve(a, rhs - a @ pi)
    return pi / pi.sum()


def embedded_powers_sum(r: np.ndarray) -> np.ndarray:
    """sum_{n=1}^{L} r^n for the embedded jump kernel r."""
    acc = np.zeros_like(r)
    p = np.eye(len(r))
    for _ in range(len(r)):
        p = p @ r
        acc += p
    return acc


def nu_embedded(model: Model, x) -> np.ndarray:
    """Stationary law through the averaged embedded chain and the 1/c reweighting."""
    r = model.jump_probs(x)
    p = embedded_powers_sum(r) / model.L
    pi = stationary(p - np.eye(model.L), check=False)
    w = pi / model.intensities(x)
    return w / w.sum()


def nu(model: Model, x, tol: float = 1e-10) -> np.ndarray:
    """nu(x), computed two independent ways and cross-checked in total variation."""
    if model.L == 1:
        return np.ones(1)
    direct = stationary(generator(model, x))
    other = nu_embedded(model, x)
    tv = 0.5 * np.abs(direct - other).sum()
    if tv > tol:
        raise ConsistencyError(f"stationary routes disagree at x={x}: TV={tv:.3e}")
    return direct


def irreducibility_alpha(model: Model, x) -> float:
    if model.L == 1:
        return 1.0
    return float(embedded_powers_sum(model.jump_probs(x)).min())
