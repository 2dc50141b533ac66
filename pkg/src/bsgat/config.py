"""Run configuration: one JSON file, overridable by command-line flags."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .engine.params import TrainConfig
from .errors import ConfigError
from .graph_builder import GraphConfig
from .ingestion import DatasetSchema, SamplingPolicy, SplitSpec, SynthSpec

CONFIG_ENV = "BSGAT_CONFIG"

# every key the CLI reads, grouped by section; shown in --help
CONFIG_KEYS = {
    "paths": ("input", "output", "graph", "checkpoint", "log", "report_dir", "embeddings"),
    "schema": ("column_roles",),
    "sampling": ("full_retention", "fraction", "seed"),
    "split": ("train", "val", "test", "seed"),
    "graph": ("prefix_length", "lambda", "mu"),
    "train": tuple(f.name for f in fields(TrainConfig)),
    "synth": ("flows_per_class", "profiles", "subnet_count", "prefix_length", "base_network", "noise", "seed"),
    "": ("label_mode", "include_ports", "seed"),
}


@dataclass
class Paths:
    input: str | None = None
    output: str | None = None
    graph: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    report_dir: str | None = None
    embeddings: str | None = None


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    schema: DatasetSchema = field(default_factory=DatasetSchema)
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    split: SplitSpec = field(default_factory=SplitSpec)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    label_mode: str = "multiclass"
    include_ports: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.label_mode not in ("binary", "multiclass"):
            raise ConfigError(f"label_mode must be 'binary' or 'multiclass', got {self.label_mode!r}")


def _section(obj: Mapping, name: str) -> dict:
    sec = obj.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(f"config section {name!r} must be an object")
    allowed = set(CONFIG_KEYS[name])
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    return dict(sec)


def config_from_dict(obj: Mapping[str, Any]) -> RunConfig:
    top_unknown = set(obj) - set(CONFIG_KEYS) - set(CONFIG_KEYS[""])
    if top_unknown:
        raise ConfigError(f"unknown config keys: {sorted(top_unknown)}")
    seed = int(obj.get("seed", 0))
    try:
        paths = Paths(**_section(obj, "paths"))
        schema = DatasetSchema.from_json({"column_roles": _section(obj, "schema").get("column_roles", {})})
        samp = _section(obj, "sampling")
        sampling = SamplingPolicy(
            frozenset(samp.get("full_retention", ())), float(samp.get("fraction", 1.0)),
            int(samp.get("seed", seed)),
        )
        sp = _section(obj, "split")
        split = SplitSpec(float(sp.get("train", 0.5)), float(sp.get("val", 0.2)),
                          float(sp.get("test", 0.3)), int(sp.get("seed", seed)))
        g = _section(obj, "graph")
        graph = GraphConfig(int(g.get("prefix_length", 24)), float(g.get("lambda", 0.85)),
                            float(g.get("mu", 0.7)))
        tr = _section(obj, "train")
        tr.setdefault("seed", seed)
        train = TrainConfig.from_dict(tr)
        sy = _section(obj, "synth")
        sy.setdefault("seed", seed)
        synth = SynthSpec.from_dict(sy)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    return RunConfig(paths, schema, sampling, split, graph, train, synth,
                     obj.get("label_mode", "multiclass"), bool(obj.get("include_ports", True)), seed)


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Read the JSON config at ``path`` (or ``$BSGAT_CONFIG``); defaults if neither."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{p}: top level must be an object")
    return config_from_dict(obj)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Apply a global seed override to every seeded component."""
    return replace(
        cfg,
        seed=seed,
        sampling=replace(cfg.sampling, seed=seed),
        split=replace(cfg.split, seed=seed),
        train=replace(cfg.train, seed=seed),
        synth=replace(cfg.synth, seed=seed),
    )
