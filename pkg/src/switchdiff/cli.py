"""Command line entry point: ``switchdiff <subcommand> --config model.json --out DIR``.

Exit codes: 0 ok, 1 usage, 2 config error, 3 numerical failure, 4 model
validation failure.  Fast-state indices on the command line and in output
files are 1-based.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from typing import Any

import numpy as np

from . import experiments as ex
from .averaging import BlowUpError, LLNRow, lln_diagnostic, solve_averaged_ode
from .fastchain import ConsistencyError, ReducibleChainError, nu
from .io import ConfigError, OutputDir, RunManifest, load_config, path_header, path_rows, read_path_csv
from .model import Probe, validate_model
from .perturb import PerturbError, perturb_triple, triple_along_path, uniqueness_check, zero_cost_triple
from .ratefn import RateOptions, local_rate, path_rate
from .simulator import SimulationError, batch_simulate, occupation_measure, simulate, thread_count

log = logging.getLogger("switchdiff")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVALID = 0, 1, 2, 3, 4
SUBCOMMANDS = ("validate", "simulate", "average", "occupation", "ratefn", "perturb", "sweep", "compare", "tilt")
NUMERICAL_ERRORS = (SimulationError, BlowUpError, PerturbError, ReducibleChainError, ConsistencyError,
                    FloatingPointError, np.linalg.LinAlgError, OverflowError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for config errors here.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="switchdiff", description="Two-scale switching diffusions: simulation, averaging, rate function.")
    sub = p.add_subparsers(dest="cmd", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", required=True, help="model JSON (optional 'run' section supplies defaults)")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--threads", type=int, help="worker cap; overrides SWITCHDIFF_THREADS")
        s.add_argument("--seed", type=int)
        s.add_argument("--no-validate", action="store_true", default=None, help="skip the assumption checks")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    def sim_args(s):
        s.add_argument("--eps", type=float)
        s.add_argument("--x0", type=_floats)
        s.add_argument("--y0", help="1-based fast state, or 'nu' to draw from nu(x0)")
        s.add_argument("--T", type=float)
        s.add_argument("--h", type=float)

    s = add("validate", "check the standing assumptions and report the model constants")
    s.add_argument("--probe-lo", type=float)
    s.add_argument("--probe-hi", type=float)
    s.add_argument("--probe-n", type=int)

    s = add("simulate", "one trajectory, or an ensemble with --N")
    sim_args(s)
    s.add_argument("--stream", type=int)
    s.add_argument("--N", type=int)

    s = add("average", "averaged ODE path, plus the LLN table with --eps-list")
    sim_args(s)
    s.add_argument("--eps-list", type=_floats)
    s.add_argument("--N", type=int)

    s = add("occupation", "fast-state occupation fractions against nu(x0)")
    sim_args(s)
    s.add_argument("--stream", type=int)
    s.add_argument("--N", type=int)

    s = add("ratefn", "path rate from --path, or the local rate at --x/--beta")
    s.add_argument("--path", help="CSV with columns t, x_1..x_d")
    s.add_argument("--x", type=_floats)
    s.add_argument("--beta", type=_floats)
    s.add_argument("--n-starts", type=int)
    s.add_argument("--gradient", choices=("adjoint", "fd"))

    s = add("perturb", "control perturbation of a near-optimal triple (zero-cost triple by default)")
    sim_args(s)
    s.add_argument("--path", help="target path CSV; omit for the averaged path")
    s.add_argument("--gamma", type=float)
    s.add_argument("--delta", type=float)
    s.add_argument("--cap", action="store_true", default=None)
    s.add_argument("--uniqueness", action="store_true", default=None)

    for name, help in (("sweep", "rare-event MC over an eps list"), ("compare", "I* by transcription vs sweep slope")):
        s = add(name, help)
        sim_args(s)
        s.add_argument("--eps-list", type=_floats)
        s.add_argument("--N", type=_floats, help="sample size, or one per eps")
        s.add_argument("--event", help='JSON, e.g. {"kind": "halfspace", "normal": [1], "threshold": 1}')
        if name == "compare":
            s.add_argument("--K-nodes", type=int)
            s.add_argument("--no-refine", action="store_true", default=None)
            s.add_argument("--no-sweep", action="store_true", default=None)

    s = add("tilt", "simulate under perturbed feedback controls and compare with the target")
    sim_args(s)
    s.add_argument("--path", help="target path CSV; omit for the averaged path")
    s.add_argument("--gamma", type=float)
    s.add_argument("--eps-list", type=_floats)
    s.add_argument("--N", type=int)
    return p


# ------------------------------------------------------------- parameters


class _Params:
    """Flag value, else the config's 'run' section, else a default; records what was used."""

    def __init__(self, args, run: dict[str, Any]):
        self.args, self.run, self.used = args, run, {}

    def get(self, name: str, default=None, cast=None):
        v = getattr(self.args, name, None)
        if v is None:
            v = self.run.get(name, default)
        self.used[name] = v
        if v is not None and cast is not None:
            try:
                v = cast(v)
            except (TypeError, ValueError, KeyError, json.JSONDecodeError) as exc:
                raise ConfigError(f"bad value for '{name}': {exc}") from None
        return v


def _vec(d):
    def cast(v):
        a = np.atleast_1d(np.asarray(v, dtype=float))
        if a.shape != (d,):
            raise ValueError(f"expected {d} components, got {a.size}")
        return a.tolist()
    return cast


def _y0(model):
    def cast(v):
        if isinstance(v, str) and v.strip().lower() == "nu":
            return "nu"
        k = int(v)
        if not 1 <= k <= model.L:
            raise ValueError(f"fast state {k} outside 1..{model.L}")
        return k
    return cast


def _eps_list(v):
    out = [float(e) for e in (v if isinstance(v, (list, tuple)) else [v])]
    if any(e <= 0 for e in out):
        raise ValueError("eps values must be positive")
    return out


def _event(v):
    doc = json.loads(v) if isinstance(v, str) else v
    if not isinstance(doc, dict):
        raise ValueError("event must be an object")
    kind = doc.get("kind", "halfspace").replace("terminal-", "")
    if kind == "ball":
        return ex.EventSpec.ball(doc["center"], float(doc["radius"]))
    if kind == "halfspace":
        return ex.EventSpec.halfspace(doc["normal"], float(doc["threshold"]))
    raise ValueError(f"unknown event kind '{kind}'")


def _sim(P, model):
    x0 = P.get("x0", [0.0] * model.d, _vec(model.d))
    y0 = P.get("y0", "nu", _y0(model))
    return dict(
        eps=P.get("eps", 0.05, float),
        x0=np.array(x0),
        y0=None if y0 == "nu" else y0 - 1,
        T=P.get("T", 1.0, float),
        h=P.get("h", 1e-3, float),
    )


def _target(P, model, sim):
    """Target path and its near-optimal triple: from --path, else the zero-cost triple on the averaged path."""
    src = P.get("path")
    if src is None:
        return zero_cost_triple(model, sim["x0"], sim["T"], sim["h"])
    path = read_path_csv(src, model.d)
    return path, triple_along_path(model, path, RateOptions(n_starts=P.get("n_starts", 1, int)))


# ------------------------------------------------------------ subcommands


def cmd_validate(model, P, out, threads):
    probe = Probe(lo=P.get("probe_lo", -1.0, float), hi=P.get("probe_hi", 1.0, float),
                  n=P.get("probe_n", 200, int), seed=P.get("seed", 0, int))
    rep = validate_model(model, probe)
    out.json("validation.json", rep.to_dict())
    return EXIT_OK if rep.passed else EXIT_INVALID


def cmd_simulate(model, P, out, threads):
    s = _sim(P, model)
    seed = P.get("seed", 0, int)
    N = P.get("N", None, int)
    if N is not None and N > 1:
        ref = solve_averaged_ode(model, s["x0"], s["T"], s["h"])
        st = batch_simulate(model, s["eps"], s["x0"], s["y0"], s["T"], s["h"], N, seed=seed, reference=ref,
                            threads=threads)
        out.csv("ensemble.csv", st.header(), st.rows())
        return EXIT_OK
    tr = simulate(model, s["eps"], s["x0"], s["y0"], s["T"], s["h"], seed=seed, stream=P.get("stream", 1, int))
    out.csv("trajectory.csv", [*path_header(model.d), "y"],
            ([*r, int(y) + 1] for r, y in zip(path_rows(tr.path), tr.y_grid)))
    out.csv("jumps.csv", ["time", "from", "to"], ([t, i + 1, j + 1] for t, i, j in tr.jumps))
    return EXIT_OK


def cmd_average(model, P, out, threads):
    s = _sim(P, model)
    path = solve_averaged_ode(model, s["x0"], s["T"], s["h"])
    out.csv("averaged.csv", path_header(model.d), path_rows(path))
    eps_list = P.get("eps_list", None, _eps_list)
    if eps_list:
        rows = lln_diagnostic(model, s["x0"], s["y0"], eps_list, P.get("N", 200, int), P.get("seed", 0, int),
                              s["h"], s["T"], threads)
        out.csv("lln.csv", LLNRow.HEADER, (r.row() for r in rows))
    return EXIT_OK


def cmd_occupation(model, P, out, threads):
    s = _sim(P, model)
    seed = P.get("seed", 0, int)
    nu0 = nu(model, s["x0"])
    N = P.get("N", None, int)
    cols = [f"occ_{i + 1}" for i in range(model.L)]
    if N is not None and N > 1:
        st = batch_simulate(model, s["eps"], s["x0"], s["y0"], s["T"], s["h"], N, seed=seed, threads=threads)
        occ = st.occupation / s["T"]
        out.csv("occupation.csv", ["traj_index", *cols], ([k + 1, *occ[k]] for k in range(N)))
        summary = {"mean": occ.mean(axis=0), "stderr": occ.std(axis=0, ddof=1) / math.sqrt(N)}
    else:
        tr = simulate(model, s["eps"], s["x0"], s["y0"], s["T"], s["h"], seed=seed, stream=P.get("stream", 1, int))
        g = tr.path.grid[1:]
        out.csv("occupation.csv", ["t", *cols], ([t, *occupation_measure(tr, t)] for t in g))
        summary = {"final": occupation_measure(tr)}
    out.json("occupation.json", {"nu_x0": nu0, **summary})
    return EXIT_OK


def cmd_ratefn(model, P, out, threads):
    opts = RateOptions(n_starts=P.get("n_starts", 8, int), gradient=P.get("gradient", "adjoint", str),
                       seed=P.get("seed", 0, int))
    src = P.get("path")
    if src is not None:
        path = read_path_csv(src, model.d)
        res = path_rate(model, path, opts)
        out.csv("path_rate.csv", res.csv_header(model), res.csv_rows(path, model))
        out.json("rate.json", {"I": res.value, "feasible": res.feasible,
                               "first_infeasible_slice": None if res.bad_interval is None else res.bad_interval + 1,
                               "n_slices": len(res.records)})
        return EXIT_OK
    x = P.get("x", None, _vec(model.d))
    beta = P.get("beta", None, _vec(model.d))
    if x is None or beta is None:
        raise ConfigError("ratefn needs --path, or both --x and --beta")
    r = local_rate(model, x, beta, opts)
    doc = {"L": r.value, "feasible": r.feasible, "converged": r.converged, "degenerate": r.degenerate,
           "iterations": r.iterations, "restarts": r.restarts, "grad_norm": r.grad_norm, "message": r.message}
    if r.argmin is not None:
        doc["pi"] = r.argmin.pi
        doc["q"] = {f"({i + 1},{j + 1})": r.argmin.q[i, j] for i, j in model.T_set}
        doc["u"] = r.argmin.u
    out.json("local_rate.json", doc)
    return EXIT_OK


def _perturb(model, P):
    s = _sim(P, model)
    path, tables = _target(P, model, s)
    res = perturb_triple(model, path, tables, gamma=P.get("gamma", 0.1, float), delta=P.get("delta", None, float),
                         cap=bool(P.get("cap", False)))
    return s, path, res


def _write_perturb(model, out, res):
    out.json("perturb.json", res.to_json())
    out.csv("perturb_tables.csv", res.table_header(model), res.table_rows(model))
    out.csv("xi_star.csv", path_header(model.d), path_rows(res.xi_star))


def cmd_perturb(model, P, out, threads):
    _, _, res = _perturb(model, P)
    _write_perturb(model, out, res)
    if P.get("uniqueness", False):
        out.json("uniqueness.json", uniqueness_check(model, res).to_json())
    return EXIT_OK if all(res.checks.values()) else EXIT_NUMERIC


def _sweep(model, P, s, threads):
    event = P.get("event", None, _event)
    if event is None:
        raise ConfigError("an event is required (--event or run.event)")
    eps_list = P.get("eps_list", [0.1, 0.05, 0.02], _eps_list)
    N = P.get("N", 10000)
    N = [int(n) for n in N] if isinstance(N, (list, tuple)) else int(N)
    if isinstance(N, list) and len(N) == 1:
        N = N[0]
    return event, eps_list, N


def cmd_sweep(model, P, out, threads):
    s = _sim(P, model)
    event, eps_list, N = _sweep(model, P, s, threads)
    sw = ex.eps_sweep(model, event, eps_list, N, P.get("seed", 0, int), s["x0"], s["T"], s["h"], s["y0"], threads)
    out.csv("sweep.csv", ex.MCResult.HEADER, sw.csv_rows())
    out.json("sweep.json", {"slope": sw.slope, "intercept": sw.intercept, "rows_fitted": sw.n_fit,
                            "event": event.to_json()})
    return EXIT_OK


def cmd_compare(model, P, out, threads):
    s = _sim(P, model)
    event, eps_list, N = _sweep(model, P, s, threads)
    seed = P.get("seed", 0, int)
    sw = None
    if not P.get("no_sweep", False):
        sw = ex.eps_sweep(model, event, eps_list, N, seed, s["x0"], s["T"], s["h"], s["y0"], threads)
        out.csv("sweep.csv", ex.MCResult.HEADER, sw.csv_rows())
    res = ex.ldp_compare(model, event, s["x0"], s["T"], sweep=sw, K_nodes=P.get("K_nodes", 8, int),
                         refine=not P.get("no_refine", False), seed=seed)
    out.json("compare.json", res.to_json())
    out.csv("compare_path.csv", path_header(model.d), path_rows(res.path))
    return EXIT_OK


def cmd_tilt(model, P, out, threads):
    _, _, res = _perturb(model, P)
    _write_perturb(model, out, res)
    rows = ex.tilted_convergence(model, res, P.get("eps_list", [0.1, 0.03, 0.01], _eps_list),
                                 P.get("N", 200, int), P.get("seed", 0, int), threads=threads)
    out.csv("tilt.csv", ex.TiltRow.HEADER, (r.row() for r in rows))
    return EXIT_OK


COMMANDS = {name: globals()[f"cmd_{name}"] for name in SUBCOMMANDS}


# --------------------------------------------------------------- dispatch


def cli_dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        model = cfg.model
        P = _Params(args, cfg.run)
        threads = thread_count(args.threads)
        out = OutputDir(args.out)
        if args.cmd != "validate" and not P.get("no_validate", False):
            rep = validate_model(model)
            if not rep.passed:
                out.json("validation.json", rep.to_dict())
                print("model validation failed: " + "; ".join(rep.messages), file=sys.stderr)
                return EXIT_INVALID
        code = COMMANDS[args.cmd](model, P, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining ValueErrors come from argument checks inside the library
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    P.used.pop("no_validate", None)
    params = {k: v for k, v in P.used.items() if v is not None}
    out.manifest(RunManifest(subcommand=args.cmd, config_sha256=cfg.sha256, seed=P.used.get("seed"), params=params,
                             wall_clock=time.perf_counter() - t0, threads=threads))
    return code


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
