"""Problem instances: coefficient families, the model tuple, assumption checks.

States are 0-based in the Python API (``y in range(model.L)``); configs and
CSV files use 1-based labels and are converted at the I/O boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.sparse.csgraph import connected_components


class ModelConfigError(ValueError):
    """Raised when a configuration cannot describe a valid model."""


class CoefficientFamily:
    """Extension point for user-supplied coefficients.

    Subclasses return all fast states at once: ``drift(x)`` has shape
    ``(L, d)``, ``diffusion(x)`` ``(L, d, m)``, ``intensity(x)`` ``(L,)`` and
    ``jump_kernel(x)`` ``(L, L)``.  They are trusted once
    :func:`validate_model` passes.  Only :class:`AffineSwitching` gets the
    compiled simulation kernel; other families run the same kernel in
    interpreted mode.
    """

    family = "custom"

    def drift(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def intensity(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jump_kernel(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def global_bounds(self):
        """Optional exact ``(sup c, inf c, inf r on T_set)``; ``None`` to estimate."""
        return None


@dataclass(eq=False)
class AffineSwitching(CoefficientFamily):
    """b = B_y x + beta_y, a = A_y, c = c0_y + c1_y tanh(w_y.x), r = r0 + r1 tanh(v.x)."""

    B: np.ndarray
    beta: np.ndarray
    A: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    w: np.ndarray
    r0: np.ndarray
    r1: np.ndarray
    v: np.ndarray

    family = "affine-switching"
    _fields = ("B", "beta", "A", "c0", "c1", "w", "r0", "r1", "v")

    def drift(self, x):
        return np.einsum("yij,j->yi", self.B, x) + self.beta

    def diffusion(self, x):
        return self.A

    def intensity(self, x):
        return self.c0 + self.c1 * np.tanh(self.w @ x)

    def jump_kernel(self, x):
        return self.r0 + self.r1 * np.tanh(self.v @ x)

    def global_bounds(self):
        # tanh ranges over (-1, 1) only when its argument is non-constant.
        c_mod = np.where(np.any(self.w != 0, axis=1), np.abs(self.c1), 0.0)
        c_const = np.where(np.any(self.w != 0, axis=1), self.c0, self.c0 + self.c1)
        r_mod = np.abs(self.r1) if np.any(self.v != 0) else np.zeros_like(self.r1)
        r_const = self.r0 if np.any(self.v != 0) else self.r0 + self.r1
        return c_const + c_mod, c_const - c_mod, r_const - r_mod

    def params(self) -> dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in self._fields}

    def __eq__(self, other):
        if not isinstance(other, AffineSwitching):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self._fields)


@dataclass(eq=False)
class Model:
    d: int
    m: int
    L: int
    T_set: tuple[tuple[int, int], ...]
    coeff: CoefficientFamily

    adjacency: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.T_set = tuple(sorted((int(i), int(j)) for i, j in self.T_set))
        adj = np.zeros((self.L, self.L), dtype=bool)
        for i, j in self.T_set:
            adj[i, j] = True
        self.adjacency = adj

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (self.d, self.m, self.L, self.T_set) == (other.d, other.m, other.L, other.T_set) and (
            self.coeff == other.coeff
        )

    # Vectorised over fast states; x is a length-d array.
    def drifts(self, x):
        return np.asarray(self.coeff.drift(_point(x, self.d)), dtype=float)

    def diffusions(self, x):
        return np.asarray(self.coeff.diffusion(_point(x, self.d)), dtype=float)

    def intensities(self, x):
        return np.asarray(self.coeff.intensity(_point(x, self.d)), dtype=float)

    def jump_probs(self, x):
        r = np.array(self.coeff.jump_kernel(_point(x, self.d)), dtype=float)
        return np.where(self.adjacency, r, 0.0)

    def channel_rates(self, x):
        """rho_ij(x) = c_i(x) r_ij(x) on T_set, zero elsewhere."""
        x = _point(x, self.d)
        return self.intensities(x)[:, None] * self.jump_probs(x)


def _point(x, d):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (d,):
        raise ValueError(f"expected a point of dimension {d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite slow state")
    return x


def eval_b(model: Model, x, y: int) -> np.ndarray:
    return model.drifts(x)[y]


def eval_a(model: Model, x, y: int) -> np.ndarray:
    return model.diffusions(x)[y]


def eval_c(model: Model, x, y: int) -> float:
    return float(model.intensities(x)[y])


def eval_r(model: Model, x, y: int, y2: int) -> float:
    if y == y2:
        return 0.0
    return float(model.jump_probs(x)[y, y2])


# ---------------------------------------------------------------- building


def _array(params, name, shape, default=None):
    if name not in params:
        if default is None:
            raise ModelConfigError(f"missing parameter '{name}'")
        return np.full(shape, default, dtype=float)
    try:
        arr = np.array(params[name], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelConfigError(f"parameter '{name}' is not numeric: {exc}") from None
    if arr.shape != shape:
        raise ModelConfigError(f"shape mismatch for '{name}': expected {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelConfigError(f"parameter '{name}' has non-finite entries")
    return arr


def build_model(config: dict[str, Any], tol: float = 1e-12) -> Model:
    """Model from a config document (see README for the JSON layout)."""
    try:
        d, m, L = int(config["d"]), int(config["m"]), int(config["L"])
    except KeyError as exc:
        raise ModelConfigError(f"missing field {exc}") from None
    except (TypeError, ValueError):
        raise ModelConfigError("d, m and L must be integers") from None
    if d < 1 or m < 1 or L < 1:
        raise ModelConfigError("d, m and L must be positive")
    family = config.get("family", "affine-switching")
    if family != "affine-switching":
        raise ModelConfigError(f"unknown coefficient family '{family}'")
    params = config.get("params", {})
    coeff = AffineSwitching(
        B=_array(params, "B", (L, d, d), 0.0),
        beta=_array(params, "beta", (L, d), 0.0),
        A=_array(params, "A", (L, d, m), 0.0),
        c0=_array(params, "c0", (L,)),
        c1=_array(params, "c1", (L,), 0.0),
        w=_array(params, "w", (L, d), 0.0),
        r0=_array(params, "r0", (L, L), None if L > 1 else 0.0),
        r1=_array(params, "r1", (L, L), 0.0),
        v=_array(params, "v", (d,), 0.0),
    )
    if "T_set" in config:
        pairs = []
        for pair in config["T_set"]:
            if len(pair) != 2:
                raise ModelConfigError(f"T_set entry {pair} is not a pair")
            i, j = int(pair[0]) - 1, int(pair[1]) - 1
            if not (0 <= i < L and 0 <= j < L):
                raise ModelConfigError(f"T_set entry {pair} outside 1..{L}")
            if i == j:
                raise ModelConfigError(f"T_set entry {pair} is a self-loop")
            pairs.append((i, j))
    else:
        pairs = [(i, j) for i in range(L) for j in range(L) if i != j and coeff.r0[i, j] != 0]
    _check_affine(coeff, pairs, L, tol)
    return Model(d=d, m=m, L=L, T_set=tuple(pairs), coeff=coeff)


def _check_affine(coeff: AffineSwitching, pairs, L, tol):
    if np.any(coeff.c0 - np.abs(coeff.c1) <= 0):
        raise ModelConfigError("c positivity violated: need c0 - |c1| > 0 for every state")
    if L == 1:
        return
    on = np.zeros((L, L), dtype=bool)
    for i, j in pairs:
        on[i, j] = True
    if np.any(np.abs(coeff.r0.sum(axis=1) - 1.0) > tol):
        raise ModelConfigError("row-stochasticity violated: rows of r0 must sum to 1")
    if np.any(np.abs(coeff.r1.sum(axis=1)) > tol):
        raise ModelConfigError("row-stochasticity violated: rows of r1 must sum to 0")
    off = ~on
    if np.any(coeff.r0[off] != 0) or np.any(coeff.r1[off] != 0):
        raise ModelConfigError("r must vanish off T_set (including the diagonal)")
    if np.any(coeff.r0[on] - np.abs(coeff.r1[on]) <= 0):
        raise ModelConfigError("kappa3 violated: need r0 - |r1| > 0 on T_set")


def model_to_config(model: Model) -> dict[str, Any]:
    if not isinstance(model.coeff, AffineSwitching):
        raise TypeError("only the affine-switching family serialises to a config")
    return {
        "d": model.d,
        "m": model.m,
        "L": model.L,
        "family": model.coeff.family,
        "params": model.coeff.params(),
        "T_set": [[i + 1, j + 1] for i, j in model.T_set],
    }


# -------------------------------------------------------------- validation


@dataclass
class ModelBounds:
    varsigma_bar: float
    zeta: float
    varsigma_low: float
    kappa3: float
    kappa1: float
    kappa2: float
    d_lip: float
    alpha: float
    lip_b: float = 0.0
    lip_a: float = 0.0
    lip_c: float = 0.0
    lip_r: float = 0.0
    # Which fields are sampled estimates rather than exact values.
    estimated: tuple[str, ...] = ()

    @property
    def r_low(self) -> float:
        return self.varsigma_low * self.kappa3


@dataclass
class Probe:
    lo: Any = -1.0
    hi: Any = 1.0
    n: int = 200
    seed: int = 0

    def points(self, d: int) -> np.ndarray:
        lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (d,))
        hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (d,))
        rng = np.random.default_rng(self.seed)
        pts = lo + (hi - lo) * rng.random((self.n, d))
        return np.vstack([pts, 0.5 * (lo + hi)])


@dataclass
class ValidationReport:
    bounds: ModelBounds
    checks: dict[str, bool]
    messages: list[str]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict[str, Any]:
        b = self.bounds
        return {
            "passed": self.passed,
            "checks": dict(self.checks),
            "messages": list(self.messages),
            "bounds": {
                "varsigma_bar": b.varsigma_bar,
                "zeta": b.zeta,
                "varsigma_low": b.varsigma_low,
                "kappa1": b.kappa1,
                "kappa2": b.kappa2,
                "kappa3": b.kappa3,
                "d_lip": b.d_lip,
                "alpha": b.alpha,
                "r_low": b.r_low,
                "lip_b": b.lip_b,
                "lip_a": b.lip_a,
                "lip_c": b.lip_c,
                "lip_r": b.lip_r,
                "estimated": list(b.estimated),
            },
        }


def adjacency_irreducible(adjacency: np.ndarray) -> tuple[bool, np.ndarray]:
    n, labels = connected_components(adjacency.astype(float), directed=True, connection="strong")
    return n == 1, labels


def _lipschitz_estimates(model: Model, pts: np.ndarray, seed: int):
    """Max sampled difference quotients over random pairs and short hops."""
    rng = np.random.default_rng(seed + 1)
    n = len(pts)
    span = np.ptp(pts, axis=0).max() if n > 1 else 1.0
    hops = pts + 1e-3 * max(span, 1e-12) * rng.standard_normal(pts.shape)
    partners = np.vstack([pts[rng.permutation(n)], hops])
    firsts = np.vstack([pts, pts])
    lb = la = lc = lr = lrho = dl = 0.0
    cache = {}

    def ev(x):
        key = x.tobytes()
        if key not in cache:
            cache[key] = (
                model.drifts(x),
                model.diffusions(x),
                model.intensities(x),
                model.jump_probs(x),
                model.channel_rates(x),
            )
        return cache[key]

    for x, x2 in zip(firsts, partners):
        dist = np.linalg.norm(x - x2)
        if dist < 1e-14:
            continue
        b1, a1, c1, r1, p1 = ev(x)
        b2, a2, c2, r2, p2 = ev(x2)
        db = np.linalg.norm(b1 - b2, axis=1) / dist
        da = np.linalg.norm((a1 - a2).reshape(model.L, -1), axis=1) / dist
        dc = np.abs(c1 - c2) / dist
        dr = np.abs(r1 - r2) / dist
        lb, la, lc = max(lb, db.max()), max(la, da.max()), max(lc, dc.max())
        lr = max(lr, dr.max())
        lrho = max(lrho, (np.abs(p1 - p2) / dist).max())
        dl = max(dl, (dc + da + db + dr.max(axis=1)).max())
    return lb, la, lc, lr, lrho, dl


def validate_model(model: Model, probe: Probe | None = None) -> ValidationReport:
    """Check the standing assumptions and estimate the model constants."""
    from .fastchain import irreducibility_alpha

    probe = probe or Probe()
    pts = probe.points(model.d)
    checks: dict[str, bool] = {}
    messages: list[str] = []
    estimated = ["kappa1", "kappa2", "d_lip", "alpha", "lip_b", "lip_a", "lip_c", "lip_r"]

    finite = True
    row_ok = True
    cs, rmins, k1 = [], [], 0.0
    for x in pts:
        b, a, c, r = model.drifts(x), model.diffusions(x), model.intensities(x), model.jump_probs(x)
        finite &= bool(np.all(np.isfinite(b)) and np.all(np.isfinite(a)) and np.all(np.isfinite(c)))
        if model.L > 1:
            row_ok &= bool(np.all(np.abs(r.sum(axis=1) - 1.0) <= 1e-12) and np.all(np.diag(r) == 0))
        cs.append(c)
        if model.T_set:
            rmins.append(min(r[i, j] for i, j in model.T_set))
        k1 = max(k1, float(np.max((np.linalg.norm(b, axis=1) + np.linalg.norm(a.reshape(model.L, -1), axis=1)) / (1 + np.linalg.norm(x)))))
    cs = np.array(cs)

    exact = model.coeff.global_bounds()
    if exact is not None:
        c_sup, c_inf, r_inf = exact
        vs_bar, vs_low = float(np.max(c_sup)), float(np.min(c_inf))
        kappa3 = float(min((r_inf[i, j] for i, j in model.T_set), default=1.0))
    else:
        vs_bar, vs_low = float(cs.max()), float(cs.min())
        kappa3 = float(min(rmins, default=1.0))
        estimated += ["varsigma_bar", "varsigma_low", "kappa3"]

    alpha = float(min(irreducibility_alpha(model, x) for x in pts)) if model.L > 1 else 1.0
    lb, la, lc, lr, lrho, dl = _lipschitz_estimates(model, pts, probe.seed)

    checks["finite"] = finite
    checks["row_stochastic"] = row_ok
    if not row_ok:
        messages.append("row-stochasticity violated")
    checks["c_positive_bounded"] = bool(vs_low > 0 and np.isfinite(vs_bar))
    if not checks["c_positive_bounded"]:
        messages.append("c positivity violated")
    checks["kappa3_positive"] = kappa3 > 0
    if not checks["kappa3_positive"]:
        messages.append("kappa3 not positive")
    irred, _ = adjacency_irreducible(model.adjacency)
    checks["adjacency_irreducible"] = irred
    if not irred:
        messages.append("adjacency not irreducible")
    checks["alpha_positive"] = alpha > 0
    if not checks["alpha_positive"]:
        messages.append("irreducibility constant alpha is zero at some probe point")

    bounds = ModelBounds(
        varsigma_bar=vs_bar,
        zeta=vs_bar + 1.0,
        varsigma_low=vs_low,
        kappa3=kappa3,
        kappa1=k1,
        kappa2=lrho,
        d_lip=dl,
        alpha=alpha,
        lip_b=lb,
        lip_a=la,
        lip_c=lc,
        lip_r=lr,
        estimated=tuple(estimated),
    )
    return ValidationReport(bounds=bounds, checks=checks, messages=messages)


def zeta_of(model: Model, probe: Probe | None = None) -> float:
    """zeta = sup c + 1, exact for families that report global bounds."""
    exact = model.coeff.global_bounds()
    if exact is not None:
        return float(np.max(exact[0])) + 1.0
    pts = (probe or Probe()).points(model.d)
    return float(max(model.intensities(x).max() for x in pts)) + 1.0
