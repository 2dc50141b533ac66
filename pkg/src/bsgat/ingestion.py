"""NF-v2 style CSV ingestion, per-class sampling, stratified splits and a
synthetic traffic generator that emits the same CSV schema."""

from __future__ import annotations

import csv
import io
import ipaddress
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .flow_model import FlowRecord, is_benign

log = logging.getLogger(__name__)

ADDRESS_ROLES = ("src_ip", "src_port", "dst_ip", "dst_port", "protocol")
ROLES = ADDRESS_ROLES + ("feature", "label", "attack_class", "ignored")

NF_V2_DEFAULT_ROLES = {
    "IPV4_SRC_ADDR": "src_ip",
    "L4_SRC_PORT": "src_port",
    "IPV4_DST_ADDR": "dst_ip",
    "L4_DST_PORT": "dst_port",
    "PROTOCOL": "protocol",
    "Label": "label",
    "Attack": "attack_class",
}


@dataclass
class DatasetSchema:
    """Column name -> role mapping. Unlisted columns are features."""

    column_roles: dict[str, str] = field(default_factory=lambda: dict(NF_V2_DEFAULT_ROLES))

    def __post_init__(self):
        for col, role in self.column_roles.items():
            if role not in ROLES:
                raise ConfigError(f"unknown role {role!r} for column {col!r}")
        for role in ADDRESS_ROLES + ("label", "attack_class"):
            n = sum(1 for r in self.column_roles.values() if r == role)
            if n != 1:
                raise ConfigError(f"schema needs exactly one {role!r} column, found {n}")

    @classmethod
    def from_json(cls, obj: Mapping | str) -> "DatasetSchema":
        if isinstance(obj, str):
            obj = json.loads(obj)
        roles = dict(NF_V2_DEFAULT_ROLES)
        overrides = dict(obj.get("column_roles", {}))
        # a new column claiming an addressing/label role replaces the default holder
        for col, role in overrides.items():
            if role in ADDRESS_ROLES + ("label", "attack_class"):
                for old, r in list(roles.items()):
                    if r == role and old != col:
                        del roles[old]
        roles.update(overrides)
        return cls(roles)

    def column_for(self, role: str) -> str:
        return next(c for c, r in self.column_roles.items() if r == role)

    def feature_columns(self, header: Sequence[str]) -> list[str]:
        return [c for c in header if self.column_roles.get(c, "feature") == "feature"]


def _cell_int(value: str, line: int, column: str) -> int:
    try:
        f = float(value)
    except ValueError:
        raise DataError(f"line {line}: column {column!r}: not a number: {value!r}") from None
    if not f.is_integer():
        raise DataError(f"line {line}: column {column!r}: expected an integer, got {value!r}")
    return int(f)


def _cell_float(value: str, line: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"line {line}: column {column!r}: not a number: {value!r}") from None


def parse_flow_csv(
    stream: IO[bytes] | IO[str], schema: DatasetSchema | None = None
) -> list[FlowRecord]:
    """Parse a UTF-8 CSV stream into flow records, preserving row order."""
    flows, _ = parse_flow_csv_with_columns(stream, schema)
    return flows


def parse_flow_csv_with_columns(
    stream: IO[bytes] | IO[str], schema: DatasetSchema | None = None
) -> tuple[list[FlowRecord], list[str]]:
    schema = schema or DatasetSchema()
    if isinstance(stream, (io.RawIOBase, io.BufferedIOBase)) or "b" in getattr(stream, "mode", ""):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty file: no header row") from None
    index = {name: i for i, name in enumerate(header)}
    for col, role in schema.column_roles.items():
        if role != "ignored" and role != "feature" and col not in index:
            raise DataError(f"missing mapped column {col!r} (role {role})")
    feature_cols = schema.feature_columns(header)
    if not feature_cols:
        raise DataError("no feature columns in header")
    pos = {role: index[schema.column_for(role)] for role in ADDRESS_ROLES + ("label", "attack_class")}
    fpos = [index[c] for c in feature_cols]

    flows = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {line}: expected {len(header)} cells, got {len(row)}")
        try:
            flows.append(
                FlowRecord(
                    src_ip=row[pos["src_ip"]].strip(),
                    src_port=_cell_int(row[pos["src_port"]], line, header[pos["src_port"]]),
                    dst_ip=row[pos["dst_ip"]].strip(),
                    dst_port=_cell_int(row[pos["dst_port"]], line, header[pos["dst_port"]]),
                    protocol=_cell_int(row[pos["protocol"]], line, header[pos["protocol"]]),
                    features=tuple(_cell_float(row[i], line, header[i]) for i in fpos),
                    label=_cell_int(row[pos["label"]], line, header[pos["label"]]),
                    attack_class=row[pos["attack_class"]].strip(),
                )
            )
        except DataError as exc:
            msg = str(exc)
            raise DataError(msg if msg.startswith("line ") else f"line {line}: {msg}") from None
    if not flows:
        raise DataError("empty file: no data rows")
    return flows, feature_cols


def read_flow_csv(path, schema: DatasetSchema | None = None) -> tuple[list[FlowRecord], list[str]]:
    with open(path, "rb") as fh:
        return parse_flow_csv_with_columns(fh, schema)


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_flow_csv(
    flows: Sequence[FlowRecord], stream: IO[str], feature_names: Sequence[str] | None = None
) -> None:
    """Write flows in the NF-v2 column layout (addressing, features, Label, Attack)."""
    if not flows:
        raise DataError("nothing to write")
    width = len(flows[0].features)
    if feature_names is None:
        feature_names = [f"F{i}" for i in range(width)]
    if len(feature_names) != width:
        raise DataError("feature name count does not match feature dimension")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(
        ["IPV4_SRC_ADDR", "L4_SRC_PORT", "IPV4_DST_ADDR", "L4_DST_PORT", "PROTOCOL"]
        + list(feature_names)
        + ["Label", "Attack"]
    )
    for f in flows:
        writer.writerow(
            [f.src_ip, f.src_port, f.dst_ip, f.dst_port, f.protocol]
            + [_fmt(v) for v in f.features]
            + [f.label, f.attack_class]
        )


def write_flow_csv(path, flows, feature_names=None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        serialize_flow_csv(flows, fh, feature_names)


# --------------------------------------------------------------------------
# sampling and splitting


@dataclass
class SamplingPolicy:
    full_retention: frozenset[str] = frozenset()
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.full_retention = frozenset(self.full_retention)
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"sampling fraction must be in (0, 1], got {self.fraction}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _by_class(flows: Sequence[FlowRecord]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, f in enumerate(flows):
        groups[f.attack_class].append(i)
    return groups


def sample_by_class(flows: Sequence[FlowRecord], policy: SamplingPolicy) -> list[FlowRecord]:
    """Keep full-retention classes entirely; subsample the rest without replacement.

    The retained flows keep their original relative order.
    """
    groups = _by_class(flows)
    for name in sorted(policy.full_retention - groups.keys()):
        log.warning("full-retention class %r not present in data", name)
    rng = np.random.default_rng(policy.seed)
    keep: list[int] = []
    for name in sorted(groups):
        idx = groups[name]
        if name in policy.full_retention or policy.fraction == 1.0:
            keep.extend(idx)
            continue
        k = min(len(idx), _round_half_up(len(idx) * policy.fraction))
        chosen = rng.choice(len(idx), size=k, replace=False)
        keep.extend(idx[c] for c in chosen)
    keep.sort()
    return [flows[i] for i in keep]


@dataclass
class SplitSpec:
    train: float = 0.5
    val: float = 0.2
    test: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0:
            raise ConfigError("split ratios must be non-negative")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")


def split_indices(flows: Sequence[FlowRecord], spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified split by attack class; returns sorted index arrays."""
    rng = np.random.default_rng(spec.seed)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    groups = _by_class(flows)
    for name in sorted(groups):
        idx = np.asarray(groups[name])
        perm = idx[rng.permutation(len(idx))]
        n = len(idx)
        if n < 3:
            log.warning("class %r has only %d member(s); favouring the training split", name, n)
            n_train = max(1, min(n, _round_half_up(n * spec.train)))
            n_test = n - n_train
            n_val = 0
        else:
            n_train = _round_half_up(n * spec.train)
            n_val = min(n - n_train, _round_half_up(n * spec.val))
            n_test = n - n_train - n_val
        parts[0].extend(perm[:n_train])
        parts[1].extend(perm[n_train:n_train + n_val])
        parts[2].extend(perm[n_train + n_val:n_train + n_val + n_test])
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def split_dataset(flows: Sequence[FlowRecord], spec: SplitSpec):
    tr, va, te = split_indices(flows, spec)
    return [flows[i] for i in tr], [flows[i] for i in va], [flows[i] for i in te]


# --------------------------------------------------------------------------
# synthetic traffic

SYNTH_FEATURES = (
    "L7_PROTO",
    "IN_BYTES",
    "IN_PKTS",
    "OUT_BYTES",
    "OUT_PKTS",
    "TCP_FLAGS",
    "FLOW_DURATION_MILLISECONDS",
    "MIN_TTL",
    "MAX_TTL",
    "LONGEST_FLOW_PKT",
    "SHORTEST_FLOW_PKT",
    "SRC_TO_DST_AVG_THROUGHPUT",
)
# raw value = max(0, scale * (offset + center + noise * z))
_SYNTH_SCALE = (10.0, 400.0, 5.0, 800.0, 5.0, 4.0, 200.0, 8.0, 8.0, 100.0, 10.0, 1000.0)
_SYNTH_OFFSET = (4.0,) * len(SYNTH_FEATURES)


@dataclass
class ClassProfile:
    """Behaviour of the hosts that emit one traffic class.

    ``center`` is the class mean in noise-standard-deviation units, one
    entry per synthetic feature. With probability ``fixed_src_port_prob`` a
    flow uses a source port from ``src_ports``; otherwise an ephemeral port.
    """

    name: str
    flows: int
    hosts: int
    dst_ips: tuple[str, ...]
    dst_ports: tuple[int, ...]
    center: tuple[float, ...]
    protocols: tuple[int, ...] = (6,)
    src_ports: tuple[int, ...] = ()
    fixed_src_port_prob: float = 0.0


def default_profiles(flows_per_class: int = 1000) -> list[ClassProfile]:
    z = [0.0] * len(SYNTH_FEATURES)

    def shifted(**kw):
        c = list(z)
        for k, v in kw.items():
            c[SYNTH_FEATURES.index(k)] = v
        return tuple(c)

    return [
        ClassProfile(
            "Benign", flows_per_class, 60,
            dst_ips=("8.8.8.8", "1.1.1.1", "172.16.0.10", "172.16.0.11", "172.16.0.12"),
            dst_ports=(53, 80, 123, 443),
            center=shifted(IN_BYTES=0.6, OUT_BYTES=0.6, FLOW_DURATION_MILLISECONDS=0.4),
            protocols=(6, 17),
            src_ports=(53, 123),
            fixed_src_port_prob=0.2,
        ),
        ClassProfile(
            "Reconnaissance", flows_per_class, 20,
            dst_ips=tuple(f"172.16.1.{i}" for i in range(1, 41)),
            dst_ports=tuple(range(1, 1025)),
            center=shifted(IN_PKTS=-0.6, TCP_FLAGS=0.7, SHORTEST_FLOW_PKT=-0.5),
        ),
        ClassProfile(
            "DDoS", flows_per_class, 40,
            dst_ips=("172.16.2.1", "172.16.2.2", "172.16.2.3"),
            dst_ports=(80, 443),
            center=shifted(IN_PKTS=0.8, SRC_TO_DST_AVG_THROUGHPUT=0.6, MIN_TTL=-0.4),
            protocols=(6, 17),
            src_ports=tuple(range(1024, 1032)),
            fixed_src_port_prob=0.3,
        ),
        ClassProfile(
            "DoS", flows_per_class, 30,
            dst_ips=("172.16.3.1", "172.16.3.2", "172.16.3.3"),
            dst_ports=(80, 443),
            center=shifted(IN_PKTS=0.8, SRC_TO_DST_AVG_THROUGHPUT=0.2, MIN_TTL=0.2),
            protocols=(6, 17),
            src_ports=tuple(range(1024, 1032)),
            fixed_src_port_prob=0.3,
        ),
    ]


@dataclass
class SynthSpec:
    profiles: list[ClassProfile] = field(default_factory=default_profiles)
    subnet_count: int = 8
    prefix_length: int = 24
    base_network: str = "192.168.0.0"
    noise: float = 1.0
    seed: int = 0

    @property
    def host_count(self) -> int:
        return sum(p.hosts for p in self.profiles)

    def validate(self) -> None:
        if not self.profiles:
            raise ConfigError("synthetic spec has no class profiles")
        if self.host_count <= 0 or any(p.hosts <= 0 for p in self.profiles):
            raise ConfigError("synthetic spec needs at least one host per class")
        if sum(p.flows for p in self.profiles) <= 0 or any(p.flows < 0 for p in self.profiles):
            raise ConfigError("synthetic spec has zero flows")
        if self.subnet_count <= 0:
            raise ConfigError("subnet_count must be positive")
        if not 1 <= self.prefix_length <= 30:
            raise ConfigError("prefix_length must be in 1..30 for synthetic layouts")
        capacity = 2 ** (32 - self.prefix_length) - 2
        if self.host_count > capacity * self.subnet_count:
            raise ConfigError("more hosts than the subnet layout can hold")
        if self.subnet_count > 2 ** self.prefix_length:
            raise ConfigError("subnet_count exceeds the available prefixes")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate class names in synthetic spec")
        for p in self.profiles:
            if len(p.center) != len(SYNTH_FEATURES):
                raise ConfigError(f"profile {p.name!r}: center needs {len(SYNTH_FEATURES)} entries")
            if not p.dst_ips or not p.dst_ports or not p.protocols:
                raise ConfigError(f"profile {p.name!r}: empty destination or protocol pool")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SynthSpec":
        obj = dict(obj)
        fpc = obj.pop("flows_per_class", None)
        profiles = obj.pop("profiles", None)
        if profiles is None:
            profs = default_profiles(1000 if fpc is None else int(fpc))
        else:
            profs = []
            for p in profiles:
                p = dict(p)
                for key in ("dst_ips", "dst_ports", "center", "protocols", "src_ports"):
                    if key in p:
                        p[key] = tuple(p[key])
                profs.append(ClassProfile(**p))
        try:
            return cls(profiles=profs, **obj)
        except TypeError as exc:
            raise ConfigError(f"bad synth config: {exc}") from None


def generate_synthetic(spec: SynthSpec) -> list[FlowRecord]:
    """Generate class-conditional flows over a fixed subnet layout.

    Every source host emits a single class. Row order is shuffled.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base = int(ipaddress.IPv4Address(spec.base_network))
    host_bits = 32 - spec.prefix_length
    base &= ~((1 << host_bits) - 1) & 0xFFFFFFFF
    subnets = [base + (k << host_bits) for k in range(spec.subnet_count)]
    capacity = 2 ** host_bits - 2

    used: dict[int, set[int]] = {s: set() for s in subnets}
    scale = np.array(_SYNTH_SCALE)
    offset = np.array(_SYNTH_OFFSET)

    records = []
    for prof in spec.profiles:
        hosts = []
        for _ in range(prof.hosts):
            free = [s for s in subnets if len(used[s]) < capacity]
            subnet = free[int(rng.integers(len(free)))]
            while True:
                h = int(rng.integers(1, capacity + 1))
                if h not in used[subnet]:
                    used[subnet].add(h)
                    break
            hosts.append(str(ipaddress.IPv4Address(subnet + h)))
        # even split of the class's flows across its hosts
        per_host = np.full(prof.hosts, prof.flows // prof.hosts)
        per_host[: prof.flows % prof.hosts] += 1
        center = np.array(prof.center)
        label = 0 if is_benign(prof.name) else 1
        for host, count in zip(hosts, per_host):
            for _ in range(int(count)):
                if prof.src_ports and rng.random() < prof.fixed_src_port_prob:
                    sport = int(prof.src_ports[int(rng.integers(len(prof.src_ports)))])
                else:
                    sport = int(rng.integers(32768, 61000))
                dst_ip = prof.dst_ips[int(rng.integers(len(prof.dst_ips)))]
                dport = int(prof.dst_ports[int(rng.integers(len(prof.dst_ports)))])
                proto = int(prof.protocols[int(rng.integers(len(prof.protocols)))])
                z = rng.standard_normal(len(SYNTH_FEATURES))
                raw = np.maximum(0.0, scale * (offset + center + spec.noise * z))
                records.append(
                    FlowRecord(host, sport, dst_ip, dport, proto,
                               tuple(round(float(v), 3) for v in raw), label, prof.name)
                )
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def class_counts(flows: Iterable[FlowRecord]) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    for f in flows:
        counts[f.attack_class] += 1
    return dict(sorted(counts.items()))
