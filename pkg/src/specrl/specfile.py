"""Experiment spec files: parse, validate, serialize, expand searches, derive seeds.

A spec is JSON with five top-level sections (agent, env, body, meta, search).
Every omitted optional field is filled in at parse time and written back by
:func:`serialize_spec`, so a stored spec alone reproduces a run.
"""
from __future__ import annotations

import copy
import itertools
import json
import math
import types
import typing
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms.base import DISCRETE_ONLY, ON_POLICY, AgentSpec
from .envs import ENV_REGISTRY, Box, EnvSpec

SEARCH_METHODS = ("grid", "choice", "uniform", "loguniform", "randint")
DISTRIBUTED_MODES = ("none", "hogwild", "server_worker")
MAX_GRID = 10000


class SpecError(ValueError):
    pass


@dataclass
class MetaSpec:
    spec_name: str = "unnamed"
    version: str = __version__
    num_trials: int = 1
    num_sessions: int = 4
    base_seed: int = 0
    eval_frequency: int = 1000
    eval_episodes: int = 4
    log_frequency: int = 10000
    checkpoint_frequency: int = 100000
    distributed: str = "none"
    push_frequency: int = 8
    overrides: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)


@dataclass
class BodySpec:
    agent_env: list = field(default_factory=lambda: [[0, 0]])


@dataclass
class SearchEntry:
    path: str
    method: str
    args: list


@dataclass
class SearchSpace:
    entries: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {e.path: {e.method: e.args} for e in self.entries}


@dataclass
class Spec:
    agent: list[AgentSpec]
    env: list[EnvSpec]
    body: BodySpec
    meta: MetaSpec
    search: SearchSpace | None = None

    @property
    def agent_spec(self) -> AgentSpec:
        return self.agent[0]

    @property
    def env_spec(self) -> EnvSpec:
        return self.env[0]

    @property
    def name(self) -> str:
        return self.meta.spec_name


_REQUIRED = {Spec: ("agent", "env", "body", "meta")}


# --- generic typed construction ------------------------------------------------

def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise SpecError(f"{where}: null not allowed")
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is list:
        if not isinstance(value, list):
            raise SpecError(f"{where}: expected a list, got {type(value).__name__}")
        (item,) = typing.get_args(tp) or (typing.Any,)
        return [_coerce(item, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise SpecError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise SpecError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SpecError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise SpecError(f"{where}: expected a string, got {value!r}")
        return value
    if tp in (list, dict):
        if not isinstance(value, tp):
            raise SpecError(f"{where}: expected {tp.__name__}, got {type(value).__name__}")
        return copy.deepcopy(value)
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise SpecError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise SpecError(f"unknown key {key!r} at {where}")
    kwargs = {}
    for name, f in known.items():
        if name in data:
            kwargs[name] = _coerce(hints[name], data[name], f"{where}.{name}")
        elif name in _REQUIRED.get(cls, ()) or (f.default is MISSING and f.default_factory is MISSING):
            raise SpecError(f"missing required key {name!r} at {where}")
    return cls(**kwargs)


def _parse_search(data) -> SearchSpace | None:
    if data is None:
        return None
    if not isinstance(data, dict):
        raise SpecError("search: expected an object mapping dotted paths to {method: args}")
    entries = []
    for path in sorted(data):
        spec = data[path]
        if not isinstance(spec, dict) or len(spec) != 1:
            raise SpecError(f"search.{path}: expected exactly one {{method: args}} pair")
        (method, args), = spec.items()
        if method not in SEARCH_METHODS:
            raise SpecError(f"search.{path}: unknown method {method!r}; use one of {SEARCH_METHODS}")
        if not isinstance(args, list):
            raise SpecError(f"search.{path}.{method}: expected a list of arguments")
        entries.append(SearchEntry(path, method, copy.deepcopy(args)))
    return SearchSpace(entries)


def spec_from_dict(data: dict) -> Spec:
    if not isinstance(data, dict):
        raise SpecError("spec document must be a JSON object")
    data = dict(data)
    search = data.pop("search", None)
    if "search" in data:
        raise SpecError("unreachable")
    spec = _build(Spec, data, "spec")
    spec.search = _parse_search(search)
    return spec


def spec_to_dict(spec: Spec) -> dict:
    out = asdict(spec)
    out["search"] = spec.search.to_json() if spec.search is not None else None
    return out


def parse_spec(text: str) -> Spec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"syntax error at line {exc.lineno} column {exc.colno} (char {exc.pos}): {exc.msg}") from exc
    return spec_from_dict(data)


def load_spec(path) -> Spec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


def serialize_spec(spec: Spec) -> str:
    """Key-sorted JSON; floats use repr so every value round-trips exactly."""
    return json.dumps(spec_to_dict(spec), sort_keys=True, indent=2) + "\n"


def save_spec(spec: Spec, path) -> None:
    Path(path).write_text(serialize_spec(spec), encoding="utf-8")


# --- dotted paths -------------------------------------------------------------

def _step_into(node, part: str, path: str):
    if isinstance(node, list):
        if part.lstrip("-").isdigit():
            idx = int(part)
            if not -len(node) <= idx < len(node):
                raise SpecError(f"path {path!r}: index {idx} out of range")
            return idx
        raise SpecError(f"path {path!r}: expected a list index at {part!r}")
    if isinstance(node, dict):
        if part not in node:
            raise SpecError(f"path {path!r} does not resolve: no key {part!r}")
        return part
    raise SpecError(f"path {path!r} does not resolve: {part!r} below a leaf value")


def _walk(data, path: str):
    """Returns (container, key) for the final component.

    A non-numeric component applied to a one-element list descends into that
    element, so ``agent.net.lr`` means ``agent.0.net.lr``.
    """
    parts = path.split(".")
    node = data
    for i, part in enumerate(parts):
        if isinstance(node, list) and len(node) == 1 and not part.lstrip("-").isdigit():
            node = node[0]
        key = _step_into(node, part, path)
        if i == len(parts) - 1:
            return node, key
        node = node[key]


def get_path(data: dict, path: str):
    node, key = _walk(data, path)
    return node[key]


def set_path(data: dict, path: str, value) -> None:
    node, key = _walk(data, path)
    node[key] = value


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(spec: Spec, overrides) -> Spec:
    """Apply ``key=value`` strings (value parsed as JSON when possible) and record them."""
    data = spec_to_dict(spec)
    recorded = dict(data["meta"]["overrides"])
    for item in overrides:
        if "=" not in item:
            raise SpecError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = _parse_override_value(raw)
        set_path(data, key.strip(), value)
        recorded[key.strip()] = value
    data["meta"]["overrides"] = recorded
    return spec_from_dict(data)


# --- validation ---------------------------------------------------------------

def validate_spec(spec: Spec) -> list[str]:
    """All invariant and cross-field violations; an empty list means valid."""
    out: list[str] = []
    if len(spec.agent) != 1:
        out.append(f"exactly one agent entry is supported, got {len(spec.agent)}")
    if len(spec.env) != 1:
        out.append(f"exactly one env entry is supported, got {len(spec.env)}")
    if spec.body.agent_env != [[0, 0]]:
        out.append("body.agent_env must be [[0, 0]] (one agent connected to one env)")
    m = spec.meta
    for key in ("num_trials", "num_sessions", "eval_episodes"):
        if getattr(m, key) < 1:
            out.append(f"meta.{key} must be >= 1")
    for key in ("eval_frequency", "log_frequency", "checkpoint_frequency", "push_frequency"):
        if getattr(m, key) < 1:
            out.append(f"meta.{key} must be >= 1")
    if m.distributed not in DISTRIBUTED_MODES:
        out.append(f"meta.distributed must be one of {DISTRIBUTED_MODES}")
    for agent in spec.agent:
        algo, mem = agent.algorithm, agent.memory
        out += algo.violations() + mem.violations() + agent.net.violations()
        if algo.name in ON_POLICY and mem.name != "onpolicy":
            out.append(f"on-policy algorithm {algo.name!r} cannot use off-policy memory {mem.name!r}")
        if algo.name not in ON_POLICY and mem.name == "onpolicy":
            out.append(f"off-policy algorithm {algo.name!r} needs a replay memory")
        if mem.name == "prioritized_replay" and algo.name not in ("dqn", "ddqn_per"):
            out.append(f"prioritized_replay requires dqn or ddqn_per, not {algo.name!r}")
        if algo.name == "sac" and mem.name != "replay":
            out.append("sac requires replay memory")
        for env in spec.env:
            cls = ENV_REGISTRY.get(env.name)
            if cls is not None and algo.name in DISCRETE_ONLY and isinstance(cls.action_space, Box):
                out.append(f"{algo.name!r} needs discrete actions but env {env.name!r} is continuous")
    for env in spec.env:
        out += env.violations()
    if spec.search is not None:
        data = spec_to_dict(spec)
        for e in spec.search.entries:
            try:
                get_path(data, e.path)
            except SpecError as exc:
                out.append(f"search: {exc}")
            out += _search_entry_violations(e)
    return out


def _search_entry_violations(e: SearchEntry) -> list[str]:
    if e.method in ("grid", "choice"):
        return [] if e.args else [f"search.{e.path}: {e.method} needs at least one value"]
    if len(e.args) != 2 or not all(isinstance(a, (int, float)) and not isinstance(a, bool) for a in e.args):
        return [f"search.{e.path}: {e.method} needs numeric [low, high]"]
    lo, hi = e.args
    out = []
    if not lo <= hi if e.method != "randint" else not lo < hi:
        out.append(f"search.{e.path}: empty range {e.args}")
    if e.method == "loguniform" and not (lo > 0 and hi > 0):
        out.append(f"search.{e.path}: loguniform bounds must be > 0")
    return out


# --- search expansion -----------------------------------------------------------

def _draw(entry: SearchEntry, rng: np.random.Generator):
    lo_hi = entry.args
    if entry.method == "choice":
        return copy.deepcopy(lo_hi[int(rng.integers(len(lo_hi)))])
    if entry.method == "uniform":
        return float(rng.uniform(lo_hi[0], lo_hi[1]))
    if entry.method == "loguniform":
        return float(math.exp(rng.uniform(math.log(lo_hi[0]), math.log(lo_hi[1]))))
    return int(rng.integers(lo_hi[0], lo_hi[1]))


def expand_search(spec: Spec, budget: int, rng: np.random.Generator) -> list[Spec]:
    """Concrete specs from the search section.

    Grid entries enumerate their Cartesian product (which must fit in the
    budget). Stochastic entries draw values; when present, each grid point gets
    ``budget // n_grid`` draws. Each result has no search section and records
    its substituted values in ``meta.provenance``.
    """
    if spec.search is None:
        raise SpecError("spec has no search section")
    if budget < 1:
        raise SpecError("budget must be >= 1")
    grid = [e for e in spec.search.entries if e.method == "grid"]
    stochastic = [e for e in spec.search.entries if e.method != "grid"]
    n_grid = math.prod(len(e.args) for e in grid)
    if n_grid > min(budget, MAX_GRID):
        raise SpecError(f"grid product {n_grid} exceeds budget {budget}")
    base = spec_to_dict(spec)
    base["search"] = None
    for e in spec.search.entries:
        get_path(base, e.path)  # path resolution failure raises here
    draws = budget // n_grid if stochastic else 1
    out = []
    for combo in itertools.product(*(e.args for e in grid)):
        for _ in range(draws):
            values = {e.path: copy.deepcopy(v) for e, v in zip(grid, combo)}
            values.update({e.path: _draw(e, rng) for e in stochastic})
            data = copy.deepcopy(base)
            for path, value in values.items():
                set_path(data, path, value)
            data["meta"]["provenance"] = {**data["meta"]["provenance"], **values}
            out.append(spec_from_dict(data))
    return out


# --- seeds ----------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    """splitmix64 finalizer: a bijection on 64-bit integers."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base_seed: int, trial_idx: int, session_idx: int) -> int:
    """Deterministic 64-bit seed for (base, trial, session).

    For a fixed base the map is injective over indices below 2**32: the
    packed (trial, session) word is offset by a hash of the base and passed
    through a bijective mixer.
    """
    if trial_idx < 0 or session_idx < 0:
        raise ValueError("trial and session indices must be >= 0")
    if trial_idx >= 1 << 32 or session_idx >= 1 << 32:
        raise ValueError("trial and session indices must be < 2**32")
    packed = (trial_idx << 32) | session_idx
    return _mix64((_mix64(base_seed & _MASK64) + packed) & _MASK64)
