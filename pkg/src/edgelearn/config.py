"""Experiment configuration: loading, defaults and validation.

Configs are TOML (or JSON) files with top-level keys ``scenario``, ``seed``,
``output_dir``, ``format`` and one table per parameter block. Every key has
a documented default; scenario-specific defaults (see
``SCENARIO_DEFAULTS``) are applied before the file's own values, so
:meth:`ExperimentConfig.to_dict` always shows the complete effective
configuration. Unknown keys and out-of-range values raise
:class:`ConfigError` naming the offending key path.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SCENARIOS = (
    "xai-moo-sweep",
    "federated-moo",
    "dtree-central",
    "federated-forest",
    "federated-boost",
    "cl-replay",
    "fcl",
    "distributed-cl",
)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class ModelBlock:
    arch: str = "linear"
    hidden: int = 8
    lr: float = 0.1


@dataclass
class MooBlock:
    outer_iters: int = 1000
    lr: float = 0.05
    ridge: float = 1e-8
    normalization: str = "loss"
    client_weighting: str = "sum"
    weights: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    n_samples: int = 400
    dim: int = 2
    noise: float = 0.3
    nonlinearity: float = 0.5


@dataclass
class TreeBlock:
    impurity: str = "gini"
    max_depth: int = -1  # -1: unlimited
    min_samples: int = 2
    min_gain: float = 0.0
    depths: list = field(default_factory=lambda: [1, 2, 3, 4, 6, -1])
    n_samples: int = 600
    n_features: int = 4
    n_classes: int = 3
    test_fraction: float = 0.25
    trees_per_client: int = 10
    selected_per_client: int = 5
    selection: str = "validation"
    boost_rounds: int = 10
    boost_lr: float = 0.3


@dataclass
class StreamBlock:
    n_classes: int = 4
    dim: int = 2
    batch_size: int = 10
    radius: float = 3.0
    scale: float = 1.0
    phases: list = field(default_factory=lambda: [
        {"duration": 100, "probs": [0.5, 0.5, 0.0, 0.0]},
        {"duration": 300, "probs": [0.0, 0.0, 0.5, 0.5]},
    ])
    held_out_per_class: int = 200
    checkpoint_every: int = 10


@dataclass
class BufferBlock:
    capacity: int = 200
    policy: str = "rs"
    tau: float = 0.5
    beta: float = 0.5
    beta_end: float = -1.0  # -1: constant beta
    replay_batch: int = 10
    server_capacity: int = 300


@dataclass
class FederationBlock:
    clients: int = 4
    scheme: str = "iid"
    alpha: float = 0.5
    shards_per_client: int = 2
    rounds: int = 50
    local_steps: int = 1
    weighting: str = "samples"
    classes_per_client: int = 2


@dataclass
class TopologyBlock:
    # vertex n_clients is the server when present
    server: bool = True
    edges: list = field(default_factory=lambda: [
        {"u": 0, "v": 1, "cost": 1.0, "capacity": 50},
        {"u": 1, "v": 2, "cost": 0.5, "capacity": 50},
        {"u": 0, "v": 2, "cost": 2.0, "capacity": 50},
        {"u": 0, "v": 3, "cost": 1.5, "capacity": 50},
        {"u": 1, "v": 3, "cost": 1.0, "capacity": 50},
        {"u": 2, "v": 3, "cost": 2.5, "capacity": 50},
    ])
    lam: float = 0.5
    steps: int = 60
    capacities: list = field(default_factory=lambda: [20, 40, 240])
    policies: list = field(default_factory=lambda: ["local-only", "offload-overflow", "shared-buffer"])


BLOCKS = {
    "model": ModelBlock,
    "moo": MooBlock,
    "tree": TreeBlock,
    "stream": StreamBlock,
    "buffer": BufferBlock,
    "federation": FederationBlock,
    "topology": TopologyBlock,
}

SCENARIO_DEFAULTS: dict[str, dict[str, dict[str, Any]]] = {
    "xai-moo-sweep": {"model": {"arch": "mlp1"}},
    "federated-moo": {"model": {"arch": "mlp1"}, "federation": {"rounds": 300}},
    "dtree-central": {},
    "federated-forest": {"federation": {"scheme": "dirichlet"}},
    "federated-boost": {"federation": {"clients": 3}, "tree": {"impurity": "mse", "max_depth": 3}},
    "cl-replay": {},
    "fcl": {
        "federation": {"rounds": 400},
        "stream": {"phases": [{"duration": 400, "probs": [0.25, 0.25, 0.25, 0.25]}]},
        "buffer": {"capacity": 100},
    },
    "distributed-cl": {
        "federation": {"clients": 3},
        "stream": {"phases": [
            {"duration": 30, "probs": [0.5, 0.5, 0.0, 0.0]},
            {"duration": 30, "probs": [0.0, 0.0, 0.5, 0.5]},
        ]},
    },
}


@dataclass
class ExperimentConfig:
    scenario: str
    seed: int = 0
    output_dir: str = "runs"
    format: str = "csv"
    model: ModelBlock = field(default_factory=ModelBlock)
    moo: MooBlock = field(default_factory=MooBlock)
    tree: TreeBlock = field(default_factory=TreeBlock)
    stream: StreamBlock = field(default_factory=StreamBlock)
    buffer: BufferBlock = field(default_factory=BufferBlock)
    federation: FederationBlock = field(default_factory=FederationBlock)
    topology: TopologyBlock = field(default_factory=TopologyBlock)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        """Canonical JSON of the full effective configuration."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def replace(self, **top) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(top)
        return from_dict(d)


TOP_LEVEL = {"scenario", "seed", "output_dir", "format"}


def _typecheck(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
    return value


def _merge_block(name: str, cls, values: dict) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(name, "expected a table")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", f"unknown key {key!r}")
        kwargs[key] = _typecheck(f"{name}.{key}", value, getattr(defaults, key))
    return cls(**kwargs)


def _in(path, value, lo, hi, note=""):
    if not lo <= value <= hi:
        extra = f" ({note})" if note else ""
        raise ConfigError(path, f"value {value!r} outside [{lo}, {hi}]{extra}")


def _pos(path, value, strict=True):
    if (value <= 0) if strict else (value < 0):
        raise ConfigError(path, f"value {value!r} must be {'>' if strict else '>='} 0")


def _choice(path, value, options):
    if value not in options:
        raise ConfigError(path, f"{value!r} is not one of {sorted(options)}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _choice("scenario", cfg.scenario, SCENARIOS)
    _choice("format", cfg.format, ("csv", "jsonl"))
    if cfg.seed < 0:
        raise ConfigError("seed", "must be >= 0")
    m, mo, t, s, b, f, tp = cfg.model, cfg.moo, cfg.tree, cfg.stream, cfg.buffer, cfg.federation, cfg.topology
    _choice("model.arch", m.arch, ("linear", "mlp1"))
    _pos("model.hidden", m.hidden)
    _pos("model.lr", m.lr)
    _pos("moo.outer_iters", mo.outer_iters, strict=False)
    _pos("moo.lr", mo.lr)
    _pos("moo.ridge", mo.ridge, strict=False)
    _choice("moo.normalization", mo.normalization, ("none", "l2", "loss"))
    _choice("moo.client_weighting", mo.client_weighting, ("sum", "samples"))
    for i, w in enumerate(mo.weights):
        if isinstance(w, bool) or not isinstance(w, (int, float)):
            raise ConfigError(f"moo.weights[{i}]", f"expected a number, got {w!r}")
        _in(f"moo.weights[{i}]", w, 0.0, 1.0, "scalarization weight")
    mo.weights = [float(w) for w in mo.weights]
    _pos("moo.n_samples", mo.n_samples)
    _pos("moo.dim", mo.dim)
    _pos("moo.noise", mo.noise, strict=False)
    _choice("tree.impurity", t.impurity, ("gini", "entropy", "mse"))
    if t.max_depth < -1:
        raise ConfigError("tree.max_depth", "must be >= 0, or -1 for unlimited")
    for i, dpt in enumerate(t.depths):
        if isinstance(dpt, bool) or not isinstance(dpt, int) or dpt < -1:
            raise ConfigError(f"tree.depths[{i}]", "depths must be integers >= -1")
    _pos("tree.min_samples", t.min_samples)
    _pos("tree.min_gain", t.min_gain, strict=False)
    _pos("tree.n_samples", t.n_samples)
    _pos("tree.n_features", t.n_features)
    _pos("tree.n_classes", t.n_classes)
    _in("tree.test_fraction", t.test_fraction, 0.0, 0.9)
    _pos("tree.trees_per_client", t.trees_per_client)
    _in("tree.selected_per_client", t.selected_per_client, 0, t.trees_per_client, "at most trees_per_client")
    _choice("tree.selection", t.selection, ("random", "validation"))
    _pos("tree.boost_rounds", t.boost_rounds, strict=False)
    _pos("tree.boost_lr", t.boost_lr, strict=False)
    _pos("stream.n_classes", s.n_classes)
    _pos("stream.dim", s.dim)
    _pos("stream.batch_size", s.batch_size)
    _pos("stream.scale", s.scale)
    _pos("stream.held_out_per_class", s.held_out_per_class)
    _pos("stream.checkpoint_every", s.checkpoint_every)
    if not s.phases:
        raise ConfigError("stream.phases", "at least one phase is required")
    for i, ph in enumerate(s.phases):
        p = f"stream.phases[{i}]"
        if not isinstance(ph, dict) or set(ph) != {"duration", "probs"}:
            raise ConfigError(p, "each phase needs exactly 'duration' and 'probs'")
        if not isinstance(ph["duration"], int) or ph["duration"] < 1:
            raise ConfigError(f"{p}.duration", "must be an integer >= 1")
        probs = ph["probs"]
        if len(probs) != s.n_classes or any(not isinstance(v, (int, float)) or v < 0 for v in probs):
            raise ConfigError(f"{p}.probs", f"need {s.n_classes} non-negative numbers")
        if abs(math.fsum(probs) - 1.0) > 1e-12:
            raise ConfigError(f"{p}.probs", "probabilities must sum to 1")
        ph["probs"] = [float(v) for v in probs]
    _pos("buffer.capacity", b.capacity, strict=False)
    _choice("buffer.policy", b.policy, ("rs", "cbrs", "klrs"))
    _in("buffer.tau", b.tau, 0.0, 1.0)
    _in("buffer.beta", b.beta, 0.0, 1.0, "beta is a convex-combination weight of batch and replay losses")
    if b.beta_end != -1.0:
        _in("buffer.beta_end", b.beta_end, 0.0, 1.0, "beta is a convex-combination weight of batch and replay losses")
    _pos("buffer.replay_batch", b.replay_batch, strict=False)
    _pos("buffer.server_capacity", b.server_capacity, strict=False)
    _pos("federation.clients", f.clients)
    _choice("federation.scheme", f.scheme, ("iid", "dirichlet", "shard"))
    _pos("federation.alpha", f.alpha)
    _pos("federation.shards_per_client", f.shards_per_client)
    _pos("federation.rounds", f.rounds)
    _pos("federation.local_steps", f.local_steps)
    _choice("federation.weighting", f.weighting, ("uniform", "samples"))
    _in("federation.classes_per_client", f.classes_per_client, 1, s.n_classes)
    _in("topology.lam", tp.lam, 0.0, 1.0, "trade-off between training loss and communication cost")
    _pos("topology.steps", tp.steps)
    for i, e in enumerate(tp.edges):
        p = f"topology.edges[{i}]"
        if not isinstance(e, dict) or not {"u", "v", "cost"} <= set(e) or not set(e) <= {"u", "v", "cost", "capacity"}:
            raise ConfigError(p, "edges need 'u', 'v', 'cost' and optionally 'capacity'")
        if e["cost"] < 0:
            raise ConfigError(f"{p}.cost", "must be >= 0")
        if e.get("capacity", 0) < 0:
            raise ConfigError(f"{p}.capacity", "must be >= 0")
    for i, pol in enumerate(tp.policies):
        _choice(f"topology.policies[{i}]", pol, ("local-only", "offload-overflow", "shared-buffer"))
    for i, c in enumerate(tp.capacities):
        if isinstance(c, bool) or not isinstance(c, int) or c < 0:
            raise ConfigError(f"topology.capacities[{i}]", "must be an integer >= 0")
    return cfg


def _deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "configuration must be a table")
    for key in raw:
        if key not in TOP_LEVEL and key not in BLOCKS:
            raise ConfigError(key, f"unknown key {key!r}")
    if "scenario" not in raw:
        raise ConfigError("scenario", "missing required key")
    scenario = raw["scenario"]
    _choice("scenario", scenario, SCENARIOS)
    merged = _deep_update(SCENARIO_DEFAULTS.get(scenario, {}), {k: v for k, v in raw.items() if k in BLOCKS})
    top = {}
    for key, default in (("seed", 0), ("output_dir", "runs"), ("format", "csv")):
        if key in raw:
            top[key] = _typecheck(key, raw[key], default)
    blocks = {name: _merge_block(name, cls, merged.get(name, {})) for name, cls in BLOCKS.items()}
    return validate(ExperimentConfig(scenario=scenario, **top, **blocks))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)
