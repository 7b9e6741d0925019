"""Averaging diagnostic: sup deviation of X^eps from the averaged path as eps shrinks."""

import argparse
from dataclasses import asdict, dataclass, field

from _common import model_from, output, show
from switchdiff.averaging import LLNRow, lln_diagnostic, solve_averaged_ode
from switchdiff.io import path_header, path_rows


@dataclass
class LLNConfig:
    model: str = "reference"
    x0: float = 0.0
    eps: list[float] = field(default_factory=lambda: [0.1, 0.03, 0.01])
    N: int = 200
    h: float = 1e-3
    T: float = 1.0
    seed: int = 0
    out: str = "out/lln"


def run(cfg: LLNConfig):
    model = model_from(cfg.model)
    out = output(cfg.out)
    out.csv("averaged.csv", path_header(model.d), path_rows(solve_averaged_ode(model, [cfg.x0], cfg.T, cfg.h)))
    rows = lln_diagnostic(model, [cfg.x0], None, cfg.eps, cfg.N, cfg.seed, cfg.h, cfg.T)
    out.csv("lln.csv", LLNRow.HEADER, (r.row() for r in rows))
    out.json("config.json", asdict(cfg))
    return rows


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--model", default=LLNConfig.model)
    p.add_argument("--N", type=int, default=LLNConfig.N)
    p.add_argument("--seed", type=int, default=LLNConfig.seed)
    p.add_argument("--out", default=LLNConfig.out)
    a = p.parse_args()
    for r in run(LLNConfig(model=a.model, N=a.N, seed=a.seed, out=a.out)):
        show(r.__dict__)
