"""Plot-ready output files: CSV with 17 significant digits and JSON with
sorted keys, both written byte-for-byte reproducibly."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

SCHEMA = "wasspo/1"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> Path:
    """Comma-separated values with a header row; floats as ``%.17g``."""
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        if isinstance(row, dict):
            row = [row[h] for h in header]
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv(path) -> tuple[list, np.ndarray]:
    """Header and float matrix of a file written by :func:`write_csv`."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    data = np.array([[float(x) if x else np.nan for x in ln.split(",")] for ln in lines[1:]])
    return header, data.reshape(len(lines) - 1, len(header))


def to_jsonable(obj):
    """Plain JSON types for dataclasses, numpy scalars/arrays and tuples."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj), encoding="utf-8")
    return path


def digest(obj) -> str:
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    text = json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def state_names(env) -> list:
    if env.name == "pendulum":
        return ["theta", "thetadot"]
    if env.name == "oscillators":
        n = env.params.n
        return [f"x{i}" for i in range(n)] + [f"v{i}" for i in range(n)]
    return ["s"] if env.state_dim == 1 else [f"s{i}" for i in range(env.state_dim)]


def action_names(env) -> list:
    return ["a"] if env.action_dim == 1 else [f"a{i}" for i in range(env.action_dim)]


def write_trajectory(path, env, trajectory) -> Path:
    """``t, <state>, <action>, cost`` for a single-start rollout.

    The final state has no action; only the ``H`` acted-upon states are written.
    """
    s = trajectory.states[:-1, 0]
    a = trajectory.actions[:, 0]
    c = trajectory.costs[:, 0]
    header = ["t", *state_names(env), *action_names(env), "cost"]
    rows = [[t, *s[t], *a[t], c[t]] for t in range(len(c))]
    return write_csv(path, header, rows)
