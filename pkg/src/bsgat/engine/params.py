"""Model parameters, training configuration, initialisation and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from ..errors import ConfigError, DataError

MODES = ("eq5", "eq6", "plain")
_MAGIC = b"BSGATCKPT1\n"


@dataclass
class TrainConfig:
    """Training hyperparameters and their defaults."""

    learning_rate: float = 0.002
    dropout: float = 0.2
    hidden: int = 128
    layers: int = 2
    batch_size: int = 500
    epochs: int = 1000
    heads: int = 3
    negative_slope: float = 0.2
    mode: str = "eq5"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"attention mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate <= 0 or self.hidden <= 0 or self.heads <= 0 or self.batch_size <= 0:
            raise ConfigError("learning_rate, hidden, heads and batch_size must be positive")
        if self.layers < 0 or self.epochs < 0:
            raise ConfigError("layers and epochs must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.negative_slope < 0:
            raise ConfigError("negative_slope must be non-negative")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class LayerParams:
    """One attention layer: ``W`` is (K, F', F_in), ``a`` is (K, 2F')."""

    W: np.ndarray
    a: np.ndarray

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W.shape[2]


@dataclass
class ModelParams:
    layers: list[LayerParams]
    out_W: np.ndarray  # (C, F'_last)
    out_b: np.ndarray  # (C,)
    mode: str = "eq5"
    negative_slope: float = 0.2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        dim = self.in_dim
        for k, layer in enumerate(self.layers):
            if layer.a.shape != (layer.heads, 2 * layer.out_dim):
                raise DataError(f"layer {k}: attention vector shape {layer.a.shape}")
            if layer.in_dim != dim:
                raise DataError(f"layer {k}: expects input dim {layer.in_dim}, chain gives {dim}")
            dim = layer.out_dim
        if self.out_W.shape[1] != dim or self.out_b.shape != (self.out_W.shape[0],):
            raise DataError("output head shape does not match last layer")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim if self.layers else self.out_W.shape[1]

    @property
    def num_classes(self) -> int:
        return self.out_W.shape[0]

    def named(self) -> dict[str, np.ndarray]:
        """Parameter tensors in checkpoint order (views, not copies)."""
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"layers.{k}.W"] = layer.W
            out[f"layers.{k}.a"] = layer.a
        out["out.W"] = self.out_W
        out["out.b"] = self.out_b
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            [LayerParams(l.W.copy(), l.a.copy()) for l in self.layers],
            self.out_W.copy(), self.out_b.copy(), self.mode, self.negative_slope, dict(self.meta),
        )


def _glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_params(in_dim: int, num_classes: int, cfg: TrainConfig, seed: int | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    layers = []
    dim = in_dim
    for _ in range(cfg.layers):
        W = _glorot(rng, (cfg.heads, cfg.hidden, dim), dim, cfg.hidden)
        a = _glorot(rng, (cfg.heads, 2 * cfg.hidden), 2 * cfg.hidden, 1)
        layers.append(LayerParams(W, a))
        dim = cfg.hidden
    out_W = _glorot(rng, (num_classes, dim), dim, num_classes)
    return ModelParams(layers, out_W, np.zeros(num_classes), cfg.mode, cfg.negative_slope)


# --------------------------------------------------------------------------
# checkpoint: magic line, u64 little-endian header length, JSON header,
# then every tensor of ModelParams.named() as little-endian float64 (C order)


def save_checkpoint(model: ModelParams, path, extra: Mapping | None = None) -> None:
    tensors = model.named()
    header = {
        "format": "bsgat-checkpoint",
        "version": 1,
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "layers": len(model.layers),
        "heads": model.layers[0].heads if model.layers else 0,
        "hidden": model.layers[0].out_dim if model.layers else 0,
        "mode": model.mode,
        "negative_slope": model.negative_slope,
        "meta": model.meta,
        "extra": dict(extra or {}),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Return ``(model, header)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)
    if len(data) < pos + 8:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: bad checkpoint header: {exc}") from None
    pos += hlen
    arrays = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(data):
            raise DataError(f"{path}: truncated tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise DataError(f"{path}: {len(data) - pos} trailing bytes")
    layers = [
        LayerParams(arrays[f"layers.{k}.W"], arrays[f"layers.{k}.a"]) for k in range(header["layers"])
    ]
    model = ModelParams(layers, arrays["out.W"], arrays["out.b"], header["mode"],
                        header["negative_slope"], header.get("meta", {}))
    return model, header


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
