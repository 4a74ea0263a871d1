"""Experiment configuration: defaults, strict validation and dotted overrides.

A config is a JSON object.  Every scenario has a complete default tree;
user files may only set keys that exist in that tree, and each value must
match the type of its default.  Errors name the offending field by its
dotted path.
"""
from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Iterable

from .errors import ConfigError

SCENARIOS = ("imitation", "subgoal", "sysid", "brl_grid10", "brl_queueing")
MODELS = ("pg", "dirichlet")

_GRID = {"width": 10, "height": 10, "noise": 0.5, "gamma": 0.95}

_SUBGOAL_WALLS = (
    [[[4, y], [5, y]] for y in range(7)]
    + [[[x, 5], [x, 6]] for x in range(5, 10) if x != 7]
)

_KERNEL = {
    "theta": 1.0,
    "lengthscale": "max-distance",
    "em": True,
    "em_mu": True,
    "optimize_lengthscale": False,
    "sweeps": 200,
    "tol": 1e-6,
}

DEFAULTS: dict[str, dict] = {
    "imitation": {
        "environment": dict(_GRID, reward_cells=5, reward_value=1.0),
        "kernel": dict(_KERNEL, em_mu=False, optimize_lengthscale=True),
        "params": {"expert_beta": 5.0, "coverage": 0.5, "demos_per_state": 20},
    },
    "subgoal": {
        "environment": dict(_GRID, walls=_SUBGOAL_WALLS, goals=[[8, 1], [2, 8], [8, 8]]),
        "kernel": dict(_KERNEL, lengthscale=3.0, sweeps=1),
        "params": {
            "goal_beta": 2.0,
            "coverage": 0.3,
            "demos_per_state": 5,
            "estimator": "subgoal",
            "gibbs_samples": 100,
            "burn_in": 50,
            "use_likelihood": True,
        },
    },
    "sysid": {
        "environment": dict(_GRID),
        "kernel": dict(_KERNEL, lengthscale=1.0, sweeps=10),
        "params": {"checkpoints": [200, 500, 1000, 2000]},
    },
    "brl_grid10": {
        "environment": dict(_GRID),
        "kernel": dict(_KERNEL, lengthscale=1.5, sweeps=3),
        "params": {"variant": "mean", "n_models": 10, "replan_every": 50, "horizon": 3000, "level": 0.9},
    },
    "brl_queueing": {
        "environment": {
            "B1": 10,
            "B2": 10,
            "arrival": 1.0,
            "batch1": 3.0,
            "batch2": 2.0,
            "gamma": 0.95,
            "clamp_transfer": False,
        },
        "kernel": dict(_KERNEL, lengthscale=0.2, sweeps=3),
        "params": {
            "variant": "mean",
            "n_models": 10,
            "episodes": 50,
            "episode_length": 20,
            "eval_steps": 1000,
        },
    },
}

_CHOICES = {
    "model": MODELS,
    "params.estimator": ("subgoal", "imitation"),
    "params.variant": ("mean", "sampled"),
}


def default_config(scenario: str) -> dict:
    if scenario not in DEFAULTS:
        raise ConfigError(f"scenario: unknown value {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    cfg = {"scenario": scenario, "model": "pg", "seeds": list(range(10)), "output_dir": None}
    cfg.update(copy.deepcopy(DEFAULTS[scenario]))
    return cfg


def _merge(base: dict, user: dict, prefix: str = "") -> None:
    for key, val in user.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"{path}: unknown key")
        ref = base[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: expected an object")
            _merge(ref, val, path + ".")
        else:
            base[key] = val


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_value(path: str, ref, val) -> None:
    if path == "output_dir":
        if val is not None and not isinstance(val, str):
            raise ConfigError(f"{path}: expected a string or null")
        return
    if path == "kernel.lengthscale":
        if val == "max-distance" or (_is_number(val) and val > 0):
            return
        raise ConfigError(f"{path}: expected a positive number or \"max-distance\"")
    if isinstance(ref, bool):
        ok = isinstance(val, bool)
    elif isinstance(ref, int):
        ok = isinstance(val, int) and not isinstance(val, bool)
    elif isinstance(ref, float):
        ok = _is_number(val)
    elif isinstance(ref, str):
        ok = isinstance(val, str)
    elif isinstance(ref, list):
        ok = isinstance(val, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(ref).__name__}, got {json.dumps(val)}")
    if path in _CHOICES and val not in _CHOICES[path]:
        raise ConfigError(f"{path}: unknown value {val!r}; expected one of {', '.join(_CHOICES[path])}")


def _walk(ref: dict, cfg: dict, prefix: str = ""):
    for key, r in ref.items():
        path = f"{prefix}{key}"
        if isinstance(r, dict):
            yield from _walk(r, cfg[key], path + ".")
        else:
            yield path, r, cfg[key]


def _positive(cfg: dict, paths: Iterable[str], strict: bool = True) -> None:
    for path in paths:
        node = cfg
        for part in path.split("."):
            node = node[part]
        if (strict and not node > 0) or (not strict and node < 0):
            raise ConfigError(f"{path}: must be {'positive' if strict else 'nonnegative'}")


def validate(cfg: dict) -> dict:
    """Return a complete, validated copy of ``cfg`` (defaults filled in)."""
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    if "scenario" not in cfg:
        raise ConfigError("scenario: missing required key")
    scenario = cfg["scenario"]
    if not isinstance(scenario, str) or scenario not in SCENARIOS:
        raise ConfigError(f"scenario: unknown value {scenario!r}; expected one of {', '.join(SCENARIOS)}")
    full = default_config(scenario)
    ref = copy.deepcopy(full)
    _merge(full, cfg)
    for path, r, v in _walk(ref, full):
        _check_value(path, r, v)

    seeds = full["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicate seed")
    _positive(full, ["kernel.theta", "kernel.sweeps", "kernel.tol"])
    env, params = full["environment"], full["params"]
    if scenario == "brl_queueing":
        _positive(full, [f"environment.{k}" for k in ("B1", "B2", "arrival", "batch1", "batch2")])
        _positive(full, ["params.n_models", "params.episodes", "params.episode_length", "params.eval_steps"])
    else:
        _positive(full, ["environment.width", "environment.height"])
        _positive(full, ["environment.noise"], strict=False)
    if not 0.0 < env["gamma"] < 1.0:
        raise ConfigError("environment.gamma: must lie in (0, 1)")
    if scenario in ("imitation", "subgoal"):
        if not 0.0 < params["coverage"] <= 1.0:
            raise ConfigError("params.coverage: must lie in (0, 1]")
        _positive(full, ["params.demos_per_state"])
    if scenario == "imitation":
        n = env["reward_cells"]
        if not 0 < n <= env["width"] * env["height"]:
            raise ConfigError("environment.reward_cells: must be between 1 and the number of cells")
    if scenario == "subgoal":
        _positive(full, ["params.gibbs_samples"])
        _positive(full, ["params.burn_in", "params.goal_beta"], strict=False)
        for i, g in enumerate(env["goals"]):
            if not (isinstance(g, list) and len(g) == 2 and all(isinstance(v, int) for v in g)):
                raise ConfigError(f"environment.goals.{i}: expected [x, y]")
        if not env["goals"]:
            raise ConfigError("environment.goals: need at least one goal")
        for i, w in enumerate(env["walls"]):
            if not (isinstance(w, list) and len(w) == 2 and all(isinstance(c, list) and len(c) == 2 for c in w)):
                raise ConfigError(f"environment.walls.{i}: expected [[x1, y1], [x2, y2]]")
    if scenario == "sysid":
        cps = params["checkpoints"]
        if not cps or not all(isinstance(c, int) and c > 0 for c in cps) or sorted(set(cps)) != cps:
            raise ConfigError("params.checkpoints: expected increasing positive integers")
    if scenario == "brl_grid10":
        _positive(full, ["params.n_models", "params.replan_every", "params.horizon", "params.level"])
    return full


def parse_value(text: str) -> Any:
    """Override values are JSON literals; anything unparsable is a plain string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, dotted: str, value: Any) -> None:
    """Set ``cfg[a][b]...`` from a dotted key ``a.b...`` (validation happens later)."""
    parts = dotted.split(".")
    if not all(parts):
        raise ConfigError(f"{dotted}: malformed override key")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        nxt = node.setdefault(part, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: cannot override inside a non-object")
        node = nxt
    node[parts[-1]] = value


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON form of ``cfg``."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def environment_hash(cfg: dict) -> str:
    """Hash of the parts that must agree for two runs to be comparable."""
    params = {k: v for k, v in cfg["params"].items() if k != "estimator"}
    return config_hash({"scenario": cfg["scenario"], "environment": cfg["environment"], "params": params})
