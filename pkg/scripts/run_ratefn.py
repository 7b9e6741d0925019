"""Local rate against the brute-force grid on random small instances."""

import argparse
import sys
from dataclasses import asdict, dataclass
from pathlib import Path as FsPath

import numpy as np

from _common import output
from switchdiff.model import build_model
from switchdiff.ratefn import local_rate, local_rate_bruteforce

sys.path.insert(0, str(FsPath(__file__).resolve().parents[1] / "tests"))
from helpers import random_config  # noqa: E402


@dataclass
class RateConfig:
    n_instances: int = 20
    max_states: int = 3
    seed: int = 0
    out: str = "out/ratefn"


def run(cfg: RateConfig):
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for k in range(cfg.n_instances):
        L = int(rng.integers(1, cfg.max_states + 1))
        model = build_model(random_config(rng, L))
        x, beta = rng.uniform(-1, 1, 1), rng.uniform(-2, 2, 1)
        opt = local_rate(model, x, beta).value
        n = max(3, min(201, int(2e6 ** (1 / max(len(model.T_set), 1)))))
        grid, res = local_rate_bruteforce(model, x, beta, n=n)
        rows.append([k + 1, L, x[0], beta[0], opt, grid, grid - opt, res])
    out = output(cfg.out)
    out.csv("ratefn_vs_grid.csv", ["instance", "L", "x", "beta", "optimizer", "grid", "grid_minus_opt",
                                   "resolution"], rows)
    out.json("config.json", asdict(cfg))
    return rows


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=RateConfig.n_instances)
    p.add_argument("--seed", type=int, default=RateConfig.seed)
    p.add_argument("--out", default=RateConfig.out)
    a = p.parse_args()
    for r in run(RateConfig(n_instances=a.n, seed=a.seed, out=a.out)):
        print(" ".join(f"{v:.6g}" for v in r))
