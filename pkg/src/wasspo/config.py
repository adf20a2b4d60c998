"""Run configuration: a flat YAML mapping of documented keys.

Top-level keys are ``command``, ``env``, ``seed``, ``out`` and ``checks``.
Any parameter of the selected environment may be overridden by name
(``alpha: 0.7``), as may any hyperparameter of the selected command; see
:data:`COMMAND_KEYS`. The grid smoothing bandwidth is spelled
``kernel_sigma`` because ``sigma`` is already the scalar regulator's noise
level. Unknown keys, nested mappings and out-of-range values are rejected,
with every problem reported in one error.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import envs
from .grid import GridConfig
from .trajopt import OptimizerConfig
from .world_model import WorldModelConfig

COMMANDS = ("grid", "traj", "wm", "verify")
CHECKS = ("gradient", "hessian", "contraction", "doeblin", "convexity")
TOP_KEYS = ("command", "env", "seed", "out", "checks")
DEFAULT_ENV = {"grid": "scalar", "traj": "pendulum", "wm": "pendulum", "verify": "scalar"}


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists every violation."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class VerifyConfig:
    contraction_trials: int = 100
    contraction_samples: int = 200
    convexity_trials: int = 100
    doeblin_m: int = 1
    fd_step: float = 1e-3
    hessian_step: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class Rule:
    kind: str  # int, float, str, bool, ints
    lo: float = -math.inf
    hi: float = math.inf
    lo_open: bool = False
    optional: bool = False
    choices: tuple = ()

    def check(self, key, value):
        """Coerced value and an error message (or ``None``)."""
        if value is None:
            return (None, None) if self.optional else (None, f"{key} may not be null")
        if self.kind == "bool":
            if not isinstance(value, bool):
                return None, f"{key} must be true or false, got {value!r}"
            return value, None
        if self.kind == "str":
            if value not in self.choices:
                return None, f"{key} must be one of {list(self.choices)}, got {value!r}"
            return value, None
        if self.kind == "ints":
            if not isinstance(value, list) or not value:
                return None, f"{key} must be a non-empty list of integers, got {value!r}"
            out = []
            for v in value:
                x, err = Rule("int", self.lo).check(key, v)
                if err:
                    return None, err
                out.append(x)
            return tuple(out), None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return None, f"{key} must be a number, got {value!r}"
        if self.kind == "int":
            if isinstance(value, float) and not value.is_integer():
                return None, f"{key} must be an integer, got {value!r}"
            value = int(value)
        else:
            value = float(value)
            if not math.isfinite(value):
                return None, f"{key} must be finite"
        if value < self.lo or (self.lo_open and value == self.lo):
            op = ">" if self.lo_open else ">="
            return None, f"{key} must be {op} {self.lo:g}, got {value!r}"
        if value > self.hi:
            return None, f"{key} must be <= {self.hi:g}, got {value!r}"
        return value, None


POS_INT, NONNEG_INT = Rule("int", 1), Rule("int", 0)
POS, NONNEG = Rule("float", 0, lo_open=True), Rule("float", 0)
FRACTION = Rule("float", 0, 1)

COMMAND_KEYS = {
    "grid": {
        "resolution": Rule("ints", 2, optional=True),
        "n_particles": POS_INT,
        "kernel_sigma": Rule("float", 0, lo_open=True, optional=True),
        "gamma": Rule("float", 0, 1, lo_open=True),
        "lr": NONNEG,
        "iterations": NONNEG_INT,
    },
    "traj": {
        "method": Rule("str", choices=("adam", "ng")),
        "lr": Rule("float", 0, optional=True),
        "horizon": Rule("int", 1, optional=True),
        "batch_size": POS_INT,
        "iterations": NONNEG_INT,
        "cg_tol": POS,
        "cg_max_iter": POS_INT,
        "cg_damping": NONNEG,
        "start_capacity": POS_INT,
        "start_init": POS_INT,
        "metric_capacity": POS_INT,
        "grad_clip": Rule("float", 0, lo_open=True, optional=True),
        "start_mix": FRACTION,
        "hidden": Rule("ints", 1, optional=True),
    },
    "wm": {
        "iterations": NONNEG_INT,
        "horizon": Rule("int", 1, optional=True),
        "batch_policy": POS_INT,
        "batch_wm": POS_INT,
        "wm_updates": NONNEG_INT,
        "lr_wm": NONNEG,
        "feature_dim": POS_INT,
        "wm_hidden": Rule("ints", 1),
        "ridge": NONNEG,
        "lr": NONNEG,
        "cg_tol": POS,
        "cg_max_iter": POS_INT,
        "cg_damping": NONNEG,
        "grad_clip": Rule("float", 0, lo_open=True, optional=True),
        "random_start_frac": FRACTION,
        "init_trajectories": NONNEG_INT,
        "buffer_capacity": POS_INT,
        "hidden": Rule("ints", 1, optional=True),
        "oracle": Rule("bool"),
    },
    "verify": {
        "contraction_trials": POS_INT,
        "contraction_samples": Rule("int", 2),
        "convexity_trials": POS_INT,
        "doeblin_m": POS_INT,
        "fd_step": POS,
        "hessian_step": POS,
    },
}
COMMAND_CLASSES = {"grid": GridConfig, "traj": OptimizerConfig,
                   "wm": WorldModelConfig, "verify": VerifyConfig}
RENAMED = {("grid", "kernel_sigma"): "sigma"}


@dataclass
class RunConfig:
    command: str
    env: str
    seed: int = 0
    out: str = "out"
    checks: tuple = CHECKS
    env_params: dict = field(default_factory=dict)
    params: object = None

    def make_env(self):
        return envs.make_env(self.env, **self.env_params)

    def echo(self) -> dict:
        """Fully resolved configuration as plain data (for summary.json)."""
        from .artifacts import to_jsonable

        env = self.make_env()
        params = self.params
        if hasattr(params, "resolved"):
            params = params.resolved(env)
        out = {"command": self.command, "env": self.env, "seed": self.seed,
               "env_params": to_jsonable(env.params), "params": to_jsonable(params)}
        if self.command == "verify":
            out["checks"] = list(self.checks)
        return out


def _env_rule(name: str, f) -> Rule:
    default = f.default
    return Rule("int") if isinstance(default, int) and not isinstance(default, bool) else Rule("float")


def parse_yaml(text: str, source: str = "<config>") -> tuple[dict, dict]:
    """Flat mapping and the line number of every key.

    Empty documents give an empty mapping. Duplicate keys, nested mappings
    and lists of non-scalars are errors.
    """
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError([f"{where}: YAML parse error: {getattr(exc, 'problem', exc)}"]) from exc
    if root is None:
        return {}, {}
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError([f"{source}:{root.start_mark.line + 1}: top level must be a key: value mapping"])
    problems, lines = [], {}
    for knode, vnode in root.value:
        line = knode.start_mark.line + 1
        if not isinstance(knode, yaml.ScalarNode):
            problems.append(f"{source}:{line}: keys must be plain names")
            continue
        key = knode.value
        if key in lines:
            problems.append(f"{source}:{line}: duplicate key {key!r} (first on line {lines[key]})")
        lines[key] = line
        if isinstance(vnode, yaml.MappingNode):
            problems.append(f"{source}:{line}: {key}: nested mappings are not allowed")
        elif isinstance(vnode, yaml.SequenceNode) and any(
                not isinstance(v, yaml.ScalarNode) for v in vnode.value):
            problems.append(f"{source}:{line}: {key}: lists may only hold scalars")
    if problems:
        raise ConfigError(problems)
    data = yaml.safe_load(text) or {}
    return {str(k): v for k, v in data.items()}, lines


def build_config(data: dict, command: str | None = None, lines: dict | None = None,
                 source: str = "<config>") -> RunConfig:
    """Validate a flat mapping into a :class:`RunConfig`.

    ``command`` (from the command line) wins over a ``command`` key, which
    must then agree with it.
    """
    lines = lines or {}
    problems = []

    def where(key):
        return f"{source}:{lines[key]}: " if key in lines else ""

    file_cmd = data.get("command")
    if command is None:
        command = file_cmd
    elif file_cmd is not None and file_cmd != command:
        problems.append(f"{where('command')}command {file_cmd!r} conflicts with {command!r}")
    if command not in COMMANDS:
        raise ConfigError(problems + [f"{where('command')}command must be one of {list(COMMANDS)}, got {command!r}"])
    env_name = data.get("env") or DEFAULT_ENV[command]
    if env_name not in envs.ENV_CLASSES:
        raise ConfigError(problems + [
            f"{where('env')}env must be one of {sorted(envs.ENV_CLASSES)}, got {env_name!r}"])
    if command == "grid" and env_name == "oscillators":
        problems.append(f"{where('env')}grid does not support oscillators: a lattice over the "
                        "10-dimensional state needs n**10 points (intractable for any useful n)")
    if command == "verify" and env_name != "scalar":
        problems.append(f"{where('env')}verify checks are defined on the scalar environment, got {env_name!r}")

    run = RunConfig(command, env_name)
    seed, err = Rule("int", 0).check("seed", data.get("seed", 0))
    problems += [where("seed") + err] if err else []
    run.seed = seed if seed is not None else 0
    out = data.get("out", "out")
    if not isinstance(out, str) or not out:
        problems.append(f"{where('out')}out must be a directory path")
    else:
        run.out = out
    if "checks" in data:
        checks = data["checks"]
        checks = [checks] if isinstance(checks, str) else checks
        if command != "verify":
            problems.append(f"{where('checks')}checks only applies to verify")
        elif not isinstance(checks, list) or not checks or any(c not in CHECKS for c in checks):
            problems.append(f"{where('checks')}checks must be a list drawn from {list(CHECKS)}")
        else:
            run.checks = tuple(dict.fromkeys(checks))

    env_fields = {f.name: f for f in dataclasses.fields(envs.ENV_CLASSES[env_name][1])}
    cmd_rules = COMMAND_KEYS[command]
    kwargs = {}
    for key, value in data.items():
        if key in TOP_KEYS:
            continue
        if key in env_fields:
            v, err = _env_rule(key, env_fields[key]).check(key, value)
            if err:
                problems.append(where(key) + err)
            else:
                run.env_params[key] = v
        elif key in cmd_rules:
            v, err = cmd_rules[key].check(key, value)
            if err:
                problems.append(where(key) + err)
            else:
                kwargs[RENAMED.get((command, key), key)] = v
        else:
            problems.append(f"{where(key)}unknown key {key!r} for {command} on {env_name}")
    if not problems:
        try:
            env = envs.make_env(env_name, **run.env_params)
        except ValueError as exc:
            problems.append(f"environment parameters: {exc}")
        else:
            res = kwargs.get("resolution")
            if command == "grid" and res is not None and len(res) != env.state_dim:
                problems.append(f"{where('resolution')}resolution needs {env.state_dim} entries "
                                f"for {env_name}, got {len(res)}")
        try:
            run.params = COMMAND_CLASSES[command](seed=run.seed, **kwargs)
        except ValueError as exc:
            problems.append(f"{command} parameters: {exc}")
    if problems:
        raise ConfigError(problems)
    return run


def load_config(path=None, command: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (optional), apply command-line ``overrides`` and validate."""
    data, lines, source = {}, {}, "<config>"
    if path is not None:
        path = Path(path)
        source = str(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"{source}: cannot read config: {exc.strerror}"]) from exc
        data, lines = parse_yaml(text, source)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
            lines.pop(key, None)
    return build_config(data, command, lines, source)
