import io
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsgat.errors import ConfigError, DataError
from bsgat.flow_model import LabelSpace
from bsgat.graph_builder import EdgeClass, GraphConfig, build_graph_bruteforce
from bsgat.ingestion import (
    ClassProfile,
    DatasetSchema,
    SamplingPolicy,
    SplitSpec,
    SynthSpec,
    class_counts,
    default_profiles,
    generate_synthetic,
    parse_flow_csv,
    sample_by_class,
    serialize_flow_csv,
    split_dataset,
    split_indices,
)

from conftest import flow

HEADER = "IPV4_SRC_ADDR,L4_SRC_PORT,IPV4_DST_ADDR,L4_DST_PORT,PROTOCOL,IN_BYTES,Label,Attack\n"


def _csv(*rows):
    return io.BytesIO((HEADER + "".join(r + "\n" for r in rows)).encode())


class TestParse:
    def test_three_rows_in_order(self):
        flows = parse_flow_csv(_csv(
            "10.0.0.1,1000,8.8.8.8,53,17,10,0,Benign",
            "10.0.0.2,1001,8.8.8.8,53,17,20,1,DDoS",
            "10.0.0.3,1002,8.8.8.8,80,6,30,0,Benign",
        ))
        assert [f.src_ip for f in flows] == ["10.0.0.1", "10.0.0.2", "10.0.0.3"]
        assert flows[1].features == (20.0,)
        assert flows[2].protocol == 6

    def test_bad_port_cites_row(self):
        with pytest.raises(DataError, match=r"line 3.*L4_DST_PORT"):
            parse_flow_csv(_csv(
                "10.0.0.1,1000,8.8.8.8,53,17,10,0,Benign",
                "10.0.0.2,1001,8.8.8.8,notanumber,17,20,1,DDoS",
            ))

    def test_label_space_from_file(self):
        flows = parse_flow_csv(_csv(
            "10.0.0.1,1000,8.8.8.8,53,17,10,0,Benign",
            "10.0.0.2,1001,8.8.8.8,53,17,20,1,DDoS",
        ))
        assert LabelSpace.from_flows(flows).C == 2

    def test_missing_column(self):
        with pytest.raises(DataError, match="PROTOCOL"):
            parse_flow_csv(io.StringIO("IPV4_SRC_ADDR,L4_SRC_PORT,IPV4_DST_ADDR,L4_DST_PORT,X,Label,Attack\n"))

    def test_empty(self):
        with pytest.raises(DataError, match="empty"):
            parse_flow_csv(io.BytesIO(b""))
        with pytest.raises(DataError, match="empty"):
            parse_flow_csv(io.BytesIO(HEADER.encode()))

    def test_custom_schema(self):
        text = "src,sport,dst,dport,proto,bytes,y,kind\n10.0.0.1,1,10.0.0.2,2,6,5,1,Scan\n"
        schema = DatasetSchema({
            "src": "src_ip", "sport": "src_port", "dst": "dst_ip", "dport": "dst_port",
            "proto": "protocol", "y": "label", "kind": "attack_class",
        })
        (f,) = parse_flow_csv(io.StringIO(text), schema)
        assert (f.src_ip, f.attack_class, f.features) == ("10.0.0.1", "Scan", (5.0,))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(
        st.tuples(
            st.integers(0, 2 ** 32 - 1), st.integers(0, 65535), st.integers(0, 2 ** 32 - 1),
            st.integers(0, 65535), st.integers(0, 255),
            st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=2, max_size=2),
            st.sampled_from(["Benign", "DoS", "Theft"]),
        ),
        min_size=1, max_size=15,
    ))
    def test_round_trip(self, rows):
        import ipaddress
        flows = [
            flow(str(ipaddress.IPv4Address(s)), str(ipaddress.IPv4Address(d)), sp, dp, pr, fs, a)
            for s, sp, d, dp, pr, fs, a in rows
        ]
        buf = io.StringIO()
        serialize_flow_csv(flows, buf, ["A", "B"])
        assert parse_flow_csv(io.StringIO(buf.getvalue())) == flows


def _labelled(counts):
    out = []
    for name, n in counts.items():
        out += [flow(src=f"10.0.{len(out) // 250}.{len(out) % 250 + 1}", attack=name) for _ in range(n)]
    return out


class TestSampling:
    def test_five_percent(self):
        kept = sample_by_class(_labelled({"DDoS": 1000}), SamplingPolicy(fraction=0.05, seed=1))
        assert len(kept) == 50

    def test_full_retention(self):
        flows = _labelled({"Theft": 200, "DDoS": 1000})
        kept = sample_by_class(flows, SamplingPolicy({"Theft"}, 0.05, 1))
        assert class_counts(kept) == {"DDoS": 50, "Theft": 200}

    def test_identity(self):
        flows = _labelled({"Benign": 7, "DoS": 5})
        assert sample_by_class(flows, SamplingPolicy(fraction=1.0)) == flows

    def test_absent_class_warns(self, caplog):
        sample_by_class(_labelled({"DoS": 3}), SamplingPolicy({"Theft"}, 0.5))
        assert "Theft" in caplog.text

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            SamplingPolicy(fraction=0.0)

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(st.sampled_from(["Benign", "DoS", "DDoS", "Theft"]), st.integers(1, 60), min_size=1),
           st.floats(0.01, 1.0), st.integers(0, 100))
    def test_counts_property(self, counts, fraction, seed):
        flows = _labelled(counts)
        kept = class_counts(sample_by_class(flows, SamplingPolicy({"Theft"}, fraction, seed)))
        for name, n in counts.items():
            if name == "Theft":
                assert kept[name] == n
            else:
                assert kept.get(name, 0) in (math.floor(n * fraction), math.ceil(n * fraction))
        # retained flows keep their original relative order
        positions = {id(f): i for i, f in enumerate(flows)}
        order = [positions[id(f)] for f in sample_by_class(flows, SamplingPolicy({"Theft"}, fraction, seed))]
        assert order == sorted(order)


class TestSplit:
    def test_paper_ratios(self):
        tr, va, te = split_dataset(_labelled({"Benign": 1000}), SplitSpec())
        assert (len(tr), len(va), len(te)) == (500, 200, 300)

    def test_ten_of_one_class(self):
        tr, va, te = split_dataset(_labelled({"DoS": 10}), SplitSpec())
        assert (len(tr), len(va), len(te)) == (5, 2, 3)

    def test_deterministic(self):
        flows = _labelled({"Benign": 40, "DoS": 33})
        a = split_indices(flows, SplitSpec(seed=4))
        b = split_indices(flows, SplitSpec(seed=4))
        for x, y in zip(a, b):
            assert x.tolist() == y.tolist()

    def test_tiny_class_goes_to_train(self, caplog):
        tr, va, te = split_indices(_labelled({"Theft": 1, "Benign": 10}), SplitSpec())
        assert 0 in tr.tolist()
        assert "Theft" in caplog.text

    def test_ratios_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            SplitSpec(0.5, 0.5, 0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.dictionaries(st.sampled_from(["Benign", "DoS", "DDoS"]), st.integers(3, 80), min_size=1),
           st.integers(0, 1000))
    def test_partition_property(self, counts, seed):
        flows = _labelled(counts)
        spec = SplitSpec(seed=seed)
        parts = split_indices(flows, spec)
        allidx = sorted(i for p in parts for i in p.tolist())
        assert allidx == list(range(len(flows)))
        for part, ratio in zip(parts, (spec.train, spec.val, spec.test)):
            got = class_counts(flows[i] for i in part)
            for name, n in counts.items():
                assert abs(got.get(name, 0) - n * ratio) <= 1


def _two_class_spec(n=500, seed=0):
    profs = default_profiles(n)[:2]
    return SynthSpec(profiles=profs, seed=seed)


class TestSynthetic:
    def test_counts(self):
        flows = generate_synthetic(_two_class_spec())
        assert len(flows) == 1000
        assert set(class_counts(flows).values()) == {500}

    def test_byte_identical_export(self):
        a, b = io.StringIO(), io.StringIO()
        serialize_flow_csv(generate_synthetic(_two_class_spec(50, 3)), a)
        serialize_flow_csv(generate_synthetic(_two_class_spec(50, 3)), b)
        assert a.getvalue() == b.getvalue()

    def test_zero_flows(self):
        spec = SynthSpec(profiles=default_profiles(0))
        with pytest.raises(ConfigError):
            generate_synthetic(spec)

    def test_zero_hosts(self):
        prof = default_profiles(10)[0]
        bad = ClassProfile(**{**prof.__dict__, "hosts": 0})
        with pytest.raises(ConfigError):
            generate_synthetic(SynthSpec(profiles=[bad]))

    def test_shared_subnet_attack_yields_m_edges(self):
        # two hosts in one /24 hitting the same dst_ip:dst_port
        prof = ClassProfile(
            name="DDoS", flows=6, hosts=2, dst_ips=("172.16.0.9",), dst_ports=(80,),
            center=(0.0,) * 12, protocols=(6,), src_ports=(), fixed_src_port_prob=0.0,
        )
        flows = generate_synthetic(SynthSpec(profiles=[prof], subnet_count=1))
        g = build_graph_bruteforce(flows, GraphConfig())
        counts = g.counts_by_class()
        assert counts["M"] == 9  # 3 x 3 cross-host pairs
        assert counts["S"] == 6  # two 3-cliques
        for (i, j), c in g.edge_dict().items():
            assert (c == EdgeClass.S) == (flows[i].src_ip == flows[j].src_ip)

    def test_hosts_are_class_pure(self):
        flows = generate_synthetic(SynthSpec(profiles=default_profiles(40)))
        owner = {}
        for f in flows:
            assert owner.setdefault(f.src_ip, f.attack_class) == f.attack_class
