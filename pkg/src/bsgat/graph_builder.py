"""Behavior-similarity graph construction.

Nodes are flows. An unordered pair of flows is joined by at most one edge,
classified by the first rule that accepts it:

* ``S`` - same source IP;
* ``M`` - same source subnet, same destination IP and destination port;
* ``O`` - one flow lies in the *partner* mask area of the other (the other
  area sharing the longest source-prefix with it) and both use the same
  source port, destination IP and destination port.

Two constructions are provided: :func:`build_graph_bruteforce` evaluates the
rules pair by pair and serves as an oracle for the indexed
:func:`build_graph`.
"""

from __future__ import annotations

import ipaddress
import re
from collections import defaultdict
from dataclasses import dataclass
from enum import IntEnum
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .flow_model import FlowRecord


class EdgeClass(IntEnum):
    S = 0
    M = 1
    O = 2  # noqa: E741


@dataclass(frozen=True)
class GraphConfig:
    prefix_length: int = 24
    lam: float = 0.85
    mu: float = 0.7

    def __post_init__(self):
        if not 0 <= self.prefix_length <= 32:
            raise ConfigError(f"prefix length must be in 0..32, got {self.prefix_length}")
        if not 0 < self.mu <= self.lam <= 1:
            raise ConfigError(f"need 0 < mu <= lambda <= 1, got lambda={self.lam} mu={self.mu}")

    def weight(self, cls: EdgeClass | int) -> float:
        return (1.0, self.lam, self.mu)[int(cls)]

    @property
    def weights(self) -> np.ndarray:
        return np.array([1.0, self.lam, self.mu])


class BehaviorGraph:
    """Undirected graph over ``n`` flow nodes.

    Edges are stored once each as ``(i, j)`` with ``i < j``, sorted
    lexicographically, together with their :class:`EdgeClass`. Node ``k``
    corresponds to row ``k`` of the flow list the graph was built from.
    """

    def __init__(self, n: int, src, dst, cls, config: GraphConfig):
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        cls = np.asarray(cls, dtype=np.uint8)
        if not (src.shape == dst.shape == cls.shape):
            raise DataError("edge arrays differ in length")
        if np.any(src >= dst):
            raise DataError("edges must satisfy i < j (no self-edges)")
        if src.size and (src.min() < 0 or dst.max() >= n):
            raise DataError("edge endpoint out of range")
        order = np.lexsort((dst, src))
        self.n = int(n)
        self.src, self.dst, self.cls = src[order], dst[order], cls[order]
        key = self.src * max(self.n, 1) + self.dst
        if key.size and np.any(np.diff(key) == 0):
            raise DataError("duplicate edge")
        self.config = config
        self._csr = None

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @property
    def eb(self) -> np.ndarray:
        return self.config.weights[self.cls]

    def edge_dict(self) -> dict[tuple[int, int], EdgeClass]:
        return {(int(i), int(j)): EdgeClass(int(c)) for i, j, c in zip(self.src, self.dst, self.cls)}

    def counts_by_class(self) -> dict[str, int]:
        counts = np.bincount(self.cls, minlength=3)
        return {c.name: int(counts[c]) for c in EdgeClass}

    def degrees(self) -> np.ndarray:
        return np.bincount(np.concatenate([self.src, self.dst]), minlength=self.n)

    def csr(self):
        """Symmetric adjacency as ``(indptr, indices, cls)``, rows sorted by column."""
        if self._csr is None:
            rows = np.concatenate([self.src, self.dst])
            cols = np.concatenate([self.dst, self.src])
            cls = np.concatenate([self.cls, self.cls])
            order = np.lexsort((cols, rows))
            indptr = np.zeros(self.n + 1, dtype=np.int64)
            np.cumsum(np.bincount(rows, minlength=self.n), out=indptr[1:])
            self._csr = (indptr, cols[order], cls[order])
        return self._csr

    def neighbors(self, i: int) -> list[tuple[int, EdgeClass]]:
        indptr, indices, cls = self.csr()
        lo, hi = indptr[i], indptr[i + 1]
        return [(int(j), EdgeClass(int(c))) for j, c in zip(indices[lo:hi], cls[lo:hi])]

    def permuted(self, perm: Sequence[int]) -> "BehaviorGraph":
        """Relabel node ``k`` as ``perm[k]``."""
        perm = np.asarray(perm)
        a, b = perm[self.src], perm[self.dst]
        return BehaviorGraph(self.n, np.minimum(a, b), np.maximum(a, b), self.cls, self.config)

    def __eq__(self, other):
        if not isinstance(other, BehaviorGraph):
            return NotImplemented
        return (
            self.n == other.n
            and self.config == other.config
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.cls, other.cls)
        )

    def __repr__(self):
        return f"BehaviorGraph(n={self.n}, edges={self.counts_by_class()})"


# --------------------------------------------------------------------------
# addressing helpers


def _ip_ints(ips: Sequence[str]) -> np.ndarray:
    return np.array([int(ipaddress.IPv4Address(ip)) for ip in ips], dtype=np.int64)


@dataclass
class _Columns:
    src: np.ndarray
    dst: np.ndarray
    sport: np.ndarray
    dport: np.ndarray

    @classmethod
    def of(cls, flows: Sequence[FlowRecord]) -> "_Columns":
        return cls(
            _ip_ints([f.src_ip for f in flows]),
            _ip_ints([f.dst_ip for f in flows]),
            np.array([f.src_port for f in flows], dtype=np.int64),
            np.array([f.dst_port for f in flows], dtype=np.int64),
        )


def network_of(ip: int | np.ndarray, prefix_length: int):
    mask = (0xFFFFFFFF << (32 - prefix_length)) & 0xFFFFFFFF
    return ip & mask


def format_area(network: int, prefix_length: int) -> str:
    return f"{ipaddress.IPv4Address(int(network))}/{prefix_length}"


def common_prefix_bits(a: int, b: int, limit: int = 32) -> int:
    """Number of leading bits two IPv4 addresses share, capped at ``limit``."""
    x = (a ^ b) & 0xFFFFFFFF
    return min(limit, 32 - x.bit_length())


def mask_area_partition(flows: Sequence[FlowRecord], prefix_length: int = 24) -> dict[int, list[int]]:
    """Group node indices by source network at ``prefix_length``.

    Keys are network addresses as integers; see :func:`format_area`.
    """
    areas: dict[int, list[int]] = defaultdict(list)
    for i, f in enumerate(flows):
        areas[network_of(f.src_ip_int, prefix_length)].append(i)
    return dict(sorted(areas.items()))


def longest_prefix_area(src_ip: int | str, areas: Mapping[int, object], prefix_length: int) -> int | None:
    """Area (other than the node's own) sharing the most leading bits with ``src_ip``.

    Ties go to the numerically smallest network. Linear scan over ``areas``.
    """
    if isinstance(src_ip, str):
        src_ip = int(ipaddress.IPv4Address(src_ip))
    own = network_of(src_ip, prefix_length)
    best, best_bits = None, -1
    for net in sorted(areas):
        if net == own:
            continue
        bits = common_prefix_bits(src_ip, net, prefix_length)
        if bits > best_bits:
            best, best_bits = net, bits
    return best


class PrefixTrie:
    """Binary trie over fixed-length network prefixes."""

    __slots__ = ("prefix_length", "root")

    def __init__(self, prefix_length: int):
        self.prefix_length = prefix_length
        self.root: list = [None, None]

    def _bits(self, network: int):
        shift = 32 - self.prefix_length
        value = network >> shift
        for d in range(self.prefix_length):
            yield (value >> (self.prefix_length - 1 - d)) & 1

    def insert(self, network: int) -> None:
        node = self.root
        for b in self._bits(network):
            if node[b] is None:
                node[b] = [None, None]
            node = node[b]

    def nearest_other(self, network: int) -> int | None:
        """Deepest divergence from ``network``'s path, resolved to its leftmost leaf."""
        p = self.prefix_length
        node = self.root
        best = None  # (path value including the divergent bit, depth)
        path = 0
        for d, b in enumerate(self._bits(network)):
            sibling = node[1 - b]
            if sibling is not None:
                best = ((path << 1) | (1 - b), d + 1, sibling)
            node = node[b]
            if node is None:
                break
            path = (path << 1) | b
        if best is None:
            return None
        value, depth, node = best
        while depth < p:
            b = 0 if node[0] is not None else 1
            value = (value << 1) | b
            node = node[b]
            depth += 1
        return value << (32 - p) if p < 32 else value


# --------------------------------------------------------------------------
# construction


def build_graph_bruteforce(flows: Sequence[FlowRecord], cfg: GraphConfig = GraphConfig()) -> BehaviorGraph:
    """Evaluate the S > M > O rule chain on every unordered pair (O(n^2))."""
    if not flows:
        raise DataError("cannot build a graph from an empty flow list")
    n = len(flows)
    col = _Columns.of(flows)
    p = cfg.prefix_length
    area = network_of(col.src, p)
    areas = {int(a): None for a in np.unique(area)}
    partner = np.array(
        [-1 if (q := longest_prefix_area(int(ip), areas, p)) is None else q for ip in col.src],
        dtype=np.int64,
    )

    src_e, dst_e, cls_e = [], [], []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        same_src = col.src[j] == col.src[i]
        same_dst = (col.dst[j] == col.dst[i]) & (col.dport[j] == col.dport[i])
        m = ~same_src & (area[j] == area[i]) & same_dst
        linked = (area[j] == partner[i]) | (partner[j] == area[i])
        o = ~same_src & ~m & linked & same_dst & (col.sport[j] == col.sport[i])
        for mask, c in ((same_src, EdgeClass.S), (m, EdgeClass.M), (o, EdgeClass.O)):
            hit = j[mask]
            src_e.append(np.full(hit.size, i))
            dst_e.append(hit)
            cls_e.append(np.full(hit.size, int(c)))
    if n == 1:
        return BehaviorGraph(1, [], [], [], cfg)
    return BehaviorGraph(n, np.concatenate(src_e), np.concatenate(dst_e), np.concatenate(cls_e), cfg)


def _clique_pairs(members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.triu_indices(members.size, 1)
    return members[a], members[b]


def _group(keys) -> list[np.ndarray]:
    buckets: dict = defaultdict(list)
    for i, k in enumerate(keys):
        buckets[k].append(i)
    return [np.array(v, dtype=np.int64) for v in buckets.values() if len(v) > 1]


def build_graph(flows: Sequence[FlowRecord], cfg: GraphConfig = GraphConfig()) -> BehaviorGraph:
    """Indexed construction, edge-for-edge identical to the brute-force oracle.

    Rule S uses buckets on source IP, rule M buckets on (source network,
    destination IP, destination port) and rule O a prefix trie over mask
    areas plus buckets on (source port, destination IP, destination port).
    """
    if not flows:
        raise DataError("cannot build a graph from an empty flow list")
    n = len(flows)
    col = _Columns.of(flows)
    p = cfg.prefix_length
    area = network_of(col.src, p)
    parts: list[tuple[np.ndarray, np.ndarray, int]] = []

    for members in _group(col.src.tolist()):
        parts.append((*_clique_pairs(members), EdgeClass.S))

    m_keys = zip(area.tolist(), col.dst.tolist(), col.dport.tolist())
    for members in _group(m_keys):
        a, b = _clique_pairs(members)
        keep = col.src[a] != col.src[b]
        parts.append((a[keep], b[keep], EdgeClass.M))

    by_area: dict[int, list[int]] = defaultdict(list)
    for i, a in enumerate(area.tolist()):
        by_area[a].append(i)
    trie = PrefixTrie(p)
    for a in by_area:
        trie.insert(a)
    o_pairs = set()
    for a, members in by_area.items():
        q = trie.nearest_other(a)
        if q is None:
            continue
        buckets: dict = defaultdict(list)
        for j in by_area[q]:
            buckets[(col.sport[j], col.dst[j], col.dport[j])].append(j)
        for i in members:
            for j in buckets.get((col.sport[i], col.dst[i], col.dport[i]), ()):
                o_pairs.add((i, j) if i < j else (j, i))
    if o_pairs:
        oa, ob = np.array(sorted(o_pairs), dtype=np.int64).T
        parts.append((oa, ob, EdgeClass.O))

    if not parts:
        return BehaviorGraph(n, [], [], [], cfg)
    src = np.concatenate([np.minimum(a, b) for a, b, _ in parts])
    dst = np.concatenate([np.maximum(a, b) for a, b, _ in parts])
    cls = np.concatenate([np.full(a.size, int(c)) for a, _, c in parts])
    return BehaviorGraph(n, src, dst, cls, cfg)


def degree_histogram(graph: BehaviorGraph) -> np.ndarray:
    """Per-node neighbour counts in ascending order."""
    return np.sort(graph.degrees())


# --------------------------------------------------------------------------
# edge-list files

_HEADER = re.compile(r"^nodes=(\d+) lambda=(\S+) mu=(\S+) prefix=(\d+)$")


def serialize_graph(graph: BehaviorGraph, stream: IO[str]) -> None:
    cfg = graph.config
    stream.write(f"nodes={graph.n} lambda={cfg.lam!r} mu={cfg.mu!r} prefix={cfg.prefix_length}\n")
    for i, j, c in zip(graph.src.tolist(), graph.dst.tolist(), graph.cls.tolist()):
        stream.write(f"{i} {j} {EdgeClass(c).name} {cfg.weight(c)!r}\n")


def deserialize_graph(stream: IO[str]) -> BehaviorGraph:
    """Parse an edge-list file; errors cite the line number and byte offset."""
    offset = 0
    header = stream.readline()
    m = _HEADER.match(header.rstrip("\n"))
    if not m:
        raise DataError(f"line 1 (offset 0): malformed graph header {header.strip()!r}")
    try:
        cfg = GraphConfig(int(m.group(4)), float(m.group(2)), float(m.group(3)))
    except (ValueError, ConfigError) as exc:
        raise DataError(f"line 1 (offset 0): bad graph header: {exc}") from None
    n = int(m.group(1))
    offset += len(header.encode())
    seen: dict[tuple[int, int], tuple[int, bool]] = {}
    for lineno, line in enumerate(stream, start=2):
        where = f"line {lineno} (offset {offset})"
        offset += len(line.encode())
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise DataError(f"{where}: expected '<i> <j> <class> <eb>'")
        try:
            i, j = int(fields[0]), int(fields[1])
            c = EdgeClass[fields[2]]
            eb = float(fields[3])
        except (ValueError, KeyError):
            raise DataError(f"{where}: unparseable edge {line.strip()!r}") from None
        if i == j:
            raise DataError(f"{where}: self-edge on node {i}")
        if not (0 <= i < n and 0 <= j < n):
            raise DataError(f"{where}: node index out of range for n={n}")
        if eb != cfg.weight(c):
            raise DataError(f"{where}: weight {eb} does not match class {c.name}")
        key = (min(i, j), max(i, j))
        forward = i < j
        if key in seen:
            prev_cls, prev_forward = seen[key]
            if prev_cls != c:
                raise DataError(f"{where}: asymmetric edge {key} ({EdgeClass(prev_cls).name} vs {c.name})")
            if prev_forward == forward:
                raise DataError(f"{where}: duplicate edge {key}")
        seen[key] = (int(c), forward)
    if seen:
        keys = np.array(list(seen.keys()), dtype=np.int64)
        cls = np.array([v[0] for v in seen.values()])
        return BehaviorGraph(n, keys[:, 0], keys[:, 1], cls, cfg)
    return BehaviorGraph(n, [], [], [], cfg)


def save_graph(graph: BehaviorGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        serialize_graph(graph, fh)


def load_graph(path) -> BehaviorGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize_graph(fh)
