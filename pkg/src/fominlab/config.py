"""Experiment configuration: JSON schema, defaults and validation.

A config file looks like::

    {
      "experiment": "moments",
      "model": {"name": "ou", "params": {"omega": 1.0}},
      "sim": {"dt": 0.005, "n_paths": 100000},
      "seed": 7,
      "knobs": {"m_max": 2},
      "tolerances": {"n_sigma": 4.0},
      "output_dir": "runs/moments"
    }

Every section except ``experiment`` is optional.  Unknown keys anywhere are
rejected with a message naming the key.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

TOP_KEYS = ("experiment", "model", "sim", "seed", "knobs", "tolerances", "output_dir")
MODEL_KEYS = ("name", "params")
PARAM_KEYS = ("omega", "a", "K", "N", "d")
SIM_KEYS = ("dt", "n_paths", "scheme", "taming_n")

DEFAULT_TOLERANCES = {
    "n_sigma": 4.0,           # MC agreement policy
    "tol_disc": 0.02,         # pathwise tangent-flow slack (20 dt at dt = 1e-3)
    "hypothesis_tol": 1e-9,   # certificate slack on the sampling grid
    "tail_abs": 0.005,        # stationary tail probability vs exact
    "moment_abs": [0.01, 0.02],  # stationary moments vs exact, by m
    "ibp": 0.05,              # normalised integration-by-parts residual
    "ibp_abs": 0.02,          # each side of the OU sin identity vs exact
    "score_rel_l2": 0.07,     # score field vs exact in L^2(nu_hat)
    "score_point_rel": 0.07,  # score at a point vs exact
    "generator_rel": 0.10,    # -1/2 D*D phi at a point vs exact
    "cp_entry_abs": 0.05,     # C_p ratio entry vs exact
    "cp_stability": 0.25,     # full vs half battery sup
    "envelope_stability": 0.25,  # small-time constant under grid refinement
}


@dataclass
class ExperimentConfig:
    experiment: str
    model: dict = field(default_factory=lambda: {"name": "ou", "params": {}})
    sim: dict = field(default_factory=dict)
    seed: int = 0
    knobs: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def to_dict(self):
        return copy.deepcopy(asdict(self))


def _reject_unknown(section, given, allowed):
    for k in given:
        if k not in allowed:
            where = f"{section}.{k}" if section else k
            raise ConfigError(f"unknown config key {where!r}; allowed: {sorted(allowed)}")


def parse_config(raw: dict, experiments) -> ExperimentConfig:
    """Validate ``raw`` and fill in every default so the result is fully resolved.

    ``experiments`` maps experiment names to objects with ``knobs`` and ``sim``
    default dicts.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("", raw, TOP_KEYS)
    if "experiment" not in raw:
        raise ConfigError("missing required key 'experiment'")
    name = raw["experiment"]
    if name not in experiments:
        raise ConfigError(f"unknown experiment {name!r}; available: {sorted(experiments)}")
    exp = experiments[name]

    model = dict(raw.get("model", {}))
    _reject_unknown("model", model, MODEL_KEYS)
    params = dict(model.get("params", {}))
    _reject_unknown("model.params", params, PARAM_KEYS)
    model = {"name": model.get("name", "ou"), "params": params}

    sim = dict(raw.get("sim", {}))
    _reject_unknown("sim", sim, SIM_KEYS)
    sim = {**{"scheme": "tamed_euler", "taming_n": None}, **exp.sim, **sim}

    knobs = dict(raw.get("knobs", {}))
    _reject_unknown("knobs", knobs, exp.knobs)
    knobs = {**copy.deepcopy(exp.knobs), **knobs}

    tols = dict(raw.get("tolerances", {}))
    _reject_unknown("tolerances", tols, DEFAULT_TOLERANCES)
    tols = {**copy.deepcopy(DEFAULT_TOLERANCES), **tols}

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a nonnegative integer, got {seed!r}")
    return ExperimentConfig(name, model, sim, seed, knobs, tols, str(raw.get("output_dir", "runs")))


def load_config(path, experiments) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw, experiments)
