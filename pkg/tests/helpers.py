"""Model configs and random instance generators shared by the tests."""

import numpy as np

from switchdiff.model import build_model

DEGENERATE = {"d": 1, "m": 1, "L": 2, "params": {"beta": [[1], [-1]], "c0": [1, 1], "r0": [[0, 1], [1, 0]]}}
GAUSSIAN = {"d": 1, "m": 1, "L": 1, "params": {"A": [[[1]]], "c0": [1]}}
NONDEGENERATE = {
    "d": 1, "m": 1, "L": 2,
    "params": {
        "beta": [[1], [-1]], "B": [[[-0.5]], [[-0.5]]], "A": [[[0.5]], [[1.0]]],
        "c0": [1, 2], "c1": [0.3, 0], "w": [[1], [0]], "r0": [[0, 1], [1, 0]],
    },
}
TWO_STATE_C21 = {"d": 1, "m": 1, "L": 2, "params": {"c0": [2, 1], "r0": [[0, 1], [1, 0]]}}
COMPLETE3 = {"d": 1, "m": 1, "L": 3,
             "params": {"c0": [1, 2, 3], "r0": [[0, .5, .5], [.5, 0, .5], [.5, .5, 0]]}}


def frozen_two_state(c=(1.0, 1.0)):
    return {"d": 1, "m": 1, "L": 2, "params": {"c0": list(c), "r0": [[0, 1], [1, 0]]}}


def random_config(rng: np.random.Generator, L: int, d: int = 1, m: int = 1, degenerate: bool = False,
                  drift_scale: float = 1.0) -> dict:
    """A random valid affine-switching config on an irreducible graph (cycle plus random chords)."""
    adj = np.zeros((L, L), dtype=bool)
    for i in range(L):
        if L > 1:
            adj[i, (i + 1) % L] = True
    adj |= (rng.random((L, L)) < 0.5) & ~np.eye(L, dtype=bool)
    r0 = np.where(adj, 0.2 + rng.random((L, L)), 0.0)
    if L > 1:
        r0 /= r0.sum(axis=1, keepdims=True)
    r1 = np.where(adj, rng.standard_normal((L, L)), 0.0)
    for i in range(L):
        k = adj[i].sum()
        if k > 1:
            r1[i, adj[i]] -= r1[i, adj[i]].mean()
            r1[i] *= 0.5 * r0[i, adj[i]].min() / max(np.abs(r1[i]).max(), 1e-12)
        else:
            r1[i] = 0.0
    c0 = 0.5 + 2.5 * rng.random(L)
    params = {
        "B": (-0.5 * drift_scale * rng.random((L, d, d)) * np.eye(d)).tolist(),
        "beta": (drift_scale * rng.standard_normal((L, d))).tolist(),
        "A": (np.zeros((L, d, m)) if degenerate else 0.3 + rng.random((L, d, m))).tolist(),
        "c0": c0.tolist(),
        "c1": (0.4 * c0 * (2 * rng.random(L) - 1)).tolist(),
        "w": rng.standard_normal((L, d)).tolist(),
        "r0": r0.tolist(),
        "r1": r1.tolist(),
        "v": rng.standard_normal(d).tolist(),
    }
    return {"d": d, "m": m, "L": L, "params": params,
            "T_set": [[i + 1, j + 1] for i in range(L) for j in range(L) if adj[i, j]]}


def random_model(rng, L, **kw):
    return build_model(random_config(rng, L, **kw))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
