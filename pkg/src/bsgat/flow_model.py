"""Flow records, label spaces and min-max feature normalization."""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError

BENIGN = "Benign"


@dataclass(frozen=True)
class FlowRecord:
    """One NetFlow entry.

    ``features`` holds the non-addressing statistics in column order. The
    addressing 5-tuple is kept separately because it drives graph topology.
    """

    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    protocol: int
    features: tuple[float, ...]
    label: int
    attack_class: str

    def __post_init__(self):
        for name in ("src_ip", "dst_ip"):
            try:
                ipaddress.IPv4Address(getattr(self, name))
            except ValueError:
                raise DataError(f"invalid IPv4 address for {name}: {getattr(self, name)!r}") from None
        for name in ("src_port", "dst_port"):
            if not 0 <= getattr(self, name) <= 65535:
                raise DataError(f"{name} out of range: {getattr(self, name)}")
        if not 0 <= self.protocol <= 255:
            raise DataError(f"protocol out of range: {self.protocol}")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label}")
        if (self.label == 0) != is_benign(self.attack_class):
            raise DataError(
                f"label {self.label} inconsistent with attack class {self.attack_class!r}"
            )

    @property
    def src_ip_int(self) -> int:
        return int(ipaddress.IPv4Address(self.src_ip))

    @property
    def dst_ip_int(self) -> int:
        return int(ipaddress.IPv4Address(self.dst_ip))


def is_benign(attack_class: str) -> bool:
    return attack_class.strip().lower() == BENIGN.lower()


@dataclass(frozen=True)
class LabelSpace:
    mode: str
    classes: tuple[str, ...]

    def __post_init__(self):
        if self.mode not in ("binary", "multiclass"):
            raise DataError(f"unknown label mode {self.mode!r}")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("class names must be unique")
        if self.mode == "binary" and len(self.classes) != 2:
            raise DataError("binary label space needs exactly two classes")

    @property
    def C(self) -> int:
        return len(self.classes)

    @classmethod
    def binary(cls) -> "LabelSpace":
        # index 1 is the positive (attack) class
        return cls("binary", ("benign", "attack"))

    @classmethod
    def from_flows(cls, flows: Sequence[FlowRecord], mode: str = "multiclass") -> "LabelSpace":
        if mode == "binary":
            return cls.binary()
        names = sorted({f.attack_class for f in flows})
        # Benign first so class 0 is always the negative class when present.
        names.sort(key=lambda c: (not is_benign(c), c))
        return cls(mode, tuple(names))

    def index(self, flow: FlowRecord) -> int:
        if self.mode == "binary":
            return flow.label
        try:
            return self.classes.index(flow.attack_class)
        except ValueError:
            raise DataError(f"attack class {flow.attack_class!r} not in label space") from None

    def encode(self, flows: Sequence[FlowRecord]) -> np.ndarray:
        return np.array([self.index(f) for f in flows], dtype=np.int64)


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    fitted_on: str = "train"
    include_ports: bool = True
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.minimum.shape != self.maximum.shape:
            raise DataError("min/max shape mismatch")
        if np.any(self.minimum > self.maximum):
            raise DataError("normalization min exceeds max")

    @property
    def dim(self) -> int:
        return self.minimum.shape[0]


def raw_feature_matrix(flows: Sequence[FlowRecord], include_ports: bool = True) -> np.ndarray:
    """Stack the per-flow numeric inputs; optionally prepend ports and protocol."""
    if not flows:
        return np.zeros((0, 0))
    dims = {len(f.features) for f in flows}
    if len(dims) != 1:
        raise DataError(f"non-uniform feature dimension: {sorted(dims)}")
    feats = np.array([f.features for f in flows], dtype=np.float64).reshape(len(flows), -1)
    if include_ports:
        addr = np.array([(f.src_port, f.dst_port, f.protocol) for f in flows], dtype=np.float64)
        feats = np.hstack([addr, feats])
    return feats


def fit_normalizer(
    train_flows: Sequence[FlowRecord], include_ports: bool = True, fitted_on: str = "train"
) -> NormalizationStats:
    if not train_flows:
        raise DataError("empty training set")
    x = raw_feature_matrix(train_flows, include_ports)
    return NormalizationStats(x.min(axis=0), x.max(axis=0), fitted_on, include_ports)


def normalize(flows: Sequence[FlowRecord], stats: NormalizationStats) -> np.ndarray:
    """Map every feature to [0, 1] using training min/max, clamping outliers.

    Constant columns map to 0.
    """
    x = raw_feature_matrix(flows, stats.include_ports)
    if len(flows) == 0:
        return np.zeros((0, stats.dim))
    if x.shape[1] != stats.dim:
        raise DataError(f"feature dimension {x.shape[1]} does not match normalizer ({stats.dim})")
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = (x - stats.minimum) / safe
    out[:, span == 0] = 0.0
    return np.clip(out, 0.0, 1.0)
