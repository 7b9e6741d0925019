"""Reference models and output helpers shared by the experiment scripts."""

import json
import os

from switchdiff.io import OutputDir, load_config
from switchdiff.model import build_model

REFERENCE = {
    "d": 1, "m": 1, "L": 2,
    "params": {
        "beta": [[1], [-1]], "B": [[[-0.5]], [[-0.5]]], "A": [[[0.5]], [[1.0]]],
        "c0": [1, 2], "c1": [0.3, 0], "w": [[1], [0]], "r0": [[0, 1], [1, 0]],
    },
}
DEGENERATE = {"d": 1, "m": 1, "L": 2, "params": {"beta": [[1], [-1]], "c0": [1, 1], "r0": [[0, 1], [1, 0]]}}
GAUSSIAN = {"d": 1, "m": 1, "L": 1, "params": {"A": [[[1]]], "c0": [1]}}
BUILTIN = {"reference": REFERENCE, "degenerate": DEGENERATE, "gaussian": GAUSSIAN}


def model_from(name: str):
    """A built-in model name or a path to a config file."""
    if name in BUILTIN:
        return build_model(BUILTIN[name])
    return load_config(name).model


def output(root: str) -> OutputDir:
    os.makedirs(root, exist_ok=True)
    return OutputDir(root)


def show(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))
