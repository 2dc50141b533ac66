import ipaddress

import numpy as np
import pytest

from bsgat.engine import TrainConfig, cross_entropy, forward, init_params
from bsgat.flow_model import FlowRecord
from bsgat.graph_builder import BehaviorGraph, GraphConfig

ACCEPTANCE_LINES: list[str] = []


def flow(src="10.0.0.1", dst="8.8.8.8", sport=40000, dport=53, proto=17, feats=(1.0, 2.0),
         attack="Benign"):
    return FlowRecord(src, sport, dst, dport, proto, tuple(feats), 0 if attack == "Benign" else 1, attack)


def random_flows(rng, n, prefix=24, subnets=6, hosts_per_subnet=5, dsts=4, ports=(53, 80),
                 sports=(1000, 1001, 40000)):
    """Flows drawn from small address pools so all three edge rules fire."""
    host_bits = 32 - prefix
    # subnets sit in the low bits of the prefix so nearby areas share long prefixes
    base = int(ipaddress.IPv4Address("10.0.0.0")) if prefix >= 16 else 0
    nets = sorted({base | (int(rng.integers(0, min(256, 2 ** prefix))) << host_bits) for _ in range(subnets)})
    hosts = [
        str(ipaddress.IPv4Address(net + int(rng.integers(0, min(2 ** host_bits, 200)))))
        for net in nets for _ in range(hosts_per_subnet)
    ]
    dst_pool = [f"172.16.0.{k + 1}" for k in range(dsts)]
    classes = ["Benign", "DoS", "DDoS"]
    out = []
    for _ in range(n):
        c = classes[int(rng.integers(3))]
        out.append(flow(
            src=hosts[int(rng.integers(len(hosts)))],
            dst=dst_pool[int(rng.integers(len(dst_pool)))],
            sport=int(sports[int(rng.integers(len(sports)))]),
            dport=int(ports[int(rng.integers(len(ports)))]),
            feats=tuple(float(v) for v in rng.normal(size=3)),
            attack=c,
        ))
    return out


def endpoint_graph_degrees(flows):
    """Degrees of the endpoint-style graph: nodes are ip:port, each flow an edge."""
    nbrs: dict[str, set] = {}
    for f in flows:
        a, b = f"{f.src_ip}:{f.src_port}", f"{f.dst_ip}:{f.dst_port}"
        nbrs.setdefault(a, set()).add(b)
        nbrs.setdefault(b, set()).add(a)
    return np.array(sorted(len(v) for v in nbrs.values()))


def random_graph(rng, n, p=0.25, cfg=None):
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    cls = rng.integers(0, 3, size=len(pairs))
    return BehaviorGraph(n, [a for a, _ in pairs], [b for _, b in pairs], cls, cfg or GraphConfig())


def random_model(rng, in_dim, num_classes, *, hidden=8, heads=2, layers=2, mode="eq5", scale=1.0):
    cfg = TrainConfig(hidden=hidden, heads=heads, layers=layers, mode=mode, seed=int(rng.integers(1 << 30)))
    model = init_params(in_dim, num_classes, cfg)
    for t in model.named().values():
        t *= scale
    # nonzero biases so the output head is exercised
    model.out_b[:] = rng.normal(size=num_classes) * 0.1
    return model


def finite_difference_errors(model, graph, X, labels, eps=1e-5, targets=None):
    """Elementwise |analytic - numeric| / max(|analytic|, |numeric|, 1e-6), per tensor."""
    from bsgat.engine import backward

    cache = forward(model, graph, X, targets=targets)
    y = labels[cache.targets]
    grads = backward(cache, y)

    def loss():
        c = forward(model, graph, X, targets=targets)
        return cross_entropy(c.logits, labels[c.targets])

    errors = {}
    for name, tensor in model.named().items():
        num = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = loss()
            flat[k] = old - eps
            down = loss()
            flat[k] = old
            num.reshape(-1)[k] = (up - down) / (2 * eps)
        a = grads[name]
        errors[name] = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-6)
    return errors


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
