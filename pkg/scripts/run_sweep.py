"""Rare-event eps sweep against the transcription optimum I*."""

import argparse
from dataclasses import asdict, dataclass, field

from _common import model_from, output, show
from switchdiff.experiments import EventSpec, MCResult, eps_sweep, ldp_compare
from switchdiff.io import path_header, path_rows


@dataclass
class SweepConfig:
    model: str = "degenerate"
    threshold: float = 0.5
    eps: list[float] = field(default_factory=lambda: [0.1, 0.05, 1 / 30, 0.025, 0.02])
    N: list[int] = field(default_factory=lambda: [100_000, 100_000, 300_000, 1_000_000, 1_000_000])
    h: float = 0.01
    T: float = 1.0
    seed: int = 0
    threads: int | None = None
    out: str = "out/sweep"


def run(cfg: SweepConfig):
    model = model_from(cfg.model)
    event = EventSpec.halfspace([1.0] * model.d, cfg.threshold)
    x0 = [0.0] * model.d
    out = output(cfg.out)
    sw = eps_sweep(model, event, cfg.eps, cfg.N, cfg.seed, x0, cfg.T, cfg.h, threads=cfg.threads)
    out.csv("sweep.csv", MCResult.HEADER, sw.csv_rows())
    res = ldp_compare(model, event, x0, cfg.T, sweep=sw)
    out.json("compare.json", res.to_json())
    out.csv("compare_path.csv", path_header(model.d), path_rows(res.path))
    out.json("config.json", asdict(cfg))
    return res


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--model", default=SweepConfig.model)
    p.add_argument("--threshold", type=float, default=SweepConfig.threshold)
    p.add_argument("--seed", type=int, default=SweepConfig.seed)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", default=SweepConfig.out)
    p.add_argument("--quick", action="store_true", help="eps in {0.1, 0.05} with N=1e5 only")
    a = p.parse_args()
    cfg = SweepConfig(model=a.model, threshold=a.threshold, seed=a.seed, threads=a.threads, out=a.out)
    if a.quick:
        cfg.eps, cfg.N = [0.1, 0.05], [100_000, 100_000]
    show(run(cfg).to_json())
