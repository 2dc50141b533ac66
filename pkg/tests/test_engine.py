import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsgat.errors import DataError, NumericalError
from bsgat.engine import (
    AdamState,
    LayerParams,
    ModelParams,
    TrainConfig,
    adam_step,
    aggregate,
    attention_coefficients,
    backward,
    cross_entropy,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from bsgat.graph_builder import BehaviorGraph, EdgeClass, GraphConfig

from conftest import finite_difference_errors, random_graph, random_model


def dense_reference_logits(model, graph, X):
    """Loop-per-node forward built from a dense eb matrix."""
    n = graph.n
    eb = np.zeros((n, n))
    for (i, j), c in graph.edge_dict().items():
        eb[i, j] = eb[j, i] = graph.config.weight(c)
    np.fill_diagonal(eb, 1.0)
    h = np.asarray(X, dtype=float)
    for layer in model.layers:
        K, F, _ = layer.W.shape
        out = np.zeros((n, F))
        for i in range(n):
            members = np.flatnonzero(eb[i])
            acc = np.zeros(F)
            for k in range(K):
                z = h @ layer.W[k].T
                e = np.array([layer.a[k, :F] @ z[i] + layer.a[k, F:] @ z[j] for j in members])
                e = np.where(e > 0, e, model.negative_slope * e)
                w = np.ones(members.size) if model.mode == "plain" else eb[i, members]
                alpha = w * np.exp(e) / np.sum(w * np.exp(e))
                coef = alpha * eb[i, members] if model.mode == "eq6" else alpha
                acc += coef @ z[members]
            pre = acc / K
            out[i] = np.where(pre > 0, pre, np.exp(pre) - 1)
        h = out
    return h @ model.out_W.T + model.out_b


def _layer(W, a):
    return LayerParams(np.asarray(W, dtype=float), np.asarray(a, dtype=float))


class TestAttention:
    cfg = GraphConfig()

    def test_isolated_node(self):
        g = BehaviorGraph(1, [], [], [], self.cfg)
        layer = _layer(np.ones((2, 3, 2)), np.ones((2, 6)))
        _, alpha = attention_coefficients(layer, np.ones((1, 2)), g, 0)
        np.testing.assert_array_equal(alpha, [[1.0], [1.0]])

    def test_equal_logits_equal_weights(self):
        g = BehaviorGraph(2, [0], [1], [EdgeClass.S], self.cfg)
        layer = _layer(np.zeros((1, 2, 2)), np.zeros((1, 4)))
        _, alpha = attention_coefficients(layer, np.ones((2, 2)), g, 0)
        np.testing.assert_allclose(alpha, [[0.5, 0.5]])

    def test_equal_logits_o_weight(self):
        # self eb = 1, neighbour eb = 0.7 -> 1/1.7 and 0.7/1.7
        g = BehaviorGraph(2, [0], [1], [EdgeClass.O], self.cfg)
        layer = _layer(np.zeros((1, 2, 2)), np.zeros((1, 4)))
        _, alpha = attention_coefficients(layer, np.ones((2, 2)), g, 0)
        np.testing.assert_allclose(alpha, [[1 / 1.7, 0.7 / 1.7]], atol=1e-12)
        np.testing.assert_allclose(alpha, [[0.5882, 0.4118]], atol=5e-5)

    def test_plain_ignores_weights(self):
        g = BehaviorGraph(2, [0], [1], [EdgeClass.O], self.cfg)
        layer = _layer(np.zeros((1, 2, 2)), np.zeros((1, 4)))
        _, alpha = attention_coefficients(layer, np.ones((2, 2)), g, 0, mode="plain")
        np.testing.assert_allclose(alpha, [[0.5, 0.5]])

    def test_non_finite_features(self):
        g = BehaviorGraph(1, [], [], [], self.cfg)
        with pytest.raises(DataError):
            attention_coefficients(_layer(np.ones((1, 1, 1)), np.ones((1, 2))), np.array([[np.nan]]), g, 0)

    def test_shift_invariance(self, rng):
        # a shift common to all of a node's logits: move the centre term via a[:F]
        g = random_graph(rng, 8, p=0.5)
        X = rng.normal(size=(8, 3))
        layer = _layer(rng.normal(size=(2, 4, 3)), np.abs(rng.normal(size=(2, 8))))
        X_pos = np.abs(X)
        W_pos = np.abs(layer.W)
        base = _layer(W_pos, layer.a)
        _, a0 = attention_coefficients(base, X_pos, g, 3)
        shifted = _layer(W_pos, layer.a.copy())
        shifted.a[:, :4] *= 3.0  # all logits positive, so the centre term shifts every entry alike
        _, a1 = attention_coefficients(shifted, X_pos, g, 3)
        np.testing.assert_allclose(a0, a1, atol=1e-12)

    def test_isolated_aggregate(self, rng):
        g = BehaviorGraph(1, [], [], [], self.cfg)
        layer = _layer(rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 8)))
        v = rng.normal(size=(1, 2))
        idx, alpha = attention_coefficients(layer, v, g, 0)
        out = aggregate(alpha, layer, v, g, 0)
        pre = np.mean([layer.W[k] @ v[0] for k in range(3)], axis=0)
        np.testing.assert_allclose(out, np.where(pre > 0, pre, np.expm1(pre)), atol=1e-14)

    def test_single_neighbor_full_weight(self, rng):
        g = BehaviorGraph(2, [0], [1], [EdgeClass.M], self.cfg)
        layer = _layer(rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 6)))
        v = rng.normal(size=(2, 2))
        out = aggregate(np.array([[0.0, 1.0]]), layer, v, g, 0)
        pre = layer.W[0] @ v[1]
        np.testing.assert_allclose(out, np.where(pre > 0, pre, np.expm1(pre)), atol=1e-14)

    def test_eq6_scales_by_weight(self, rng):
        g = BehaviorGraph(2, [0], [1], [EdgeClass.M], self.cfg)
        layer = _layer(rng.normal(size=(1, 3, 2)), rng.normal(size=(1, 6)))
        v = rng.normal(size=(2, 2))
        out = aggregate(np.array([[0.0, 1.0]]), layer, v, g, 0, mode="eq6")
        pre = 0.85 * layer.W[0] @ v[1]
        np.testing.assert_allclose(out, np.where(pre > 0, pre, np.expm1(pre)), atol=1e-14)


class TestForward:
    @pytest.mark.parametrize("mode", ["eq5", "eq6", "plain"])
    def test_matches_dense_reference(self, rng, mode):
        g = random_graph(rng, 15, p=0.3)
        X = rng.normal(size=(15, 4))
        model = random_model(rng, 4, 3, mode=mode)
        logits = forward(model, g, X).logits
        np.testing.assert_allclose(logits, dense_reference_logits(model, g, X), atol=1e-12)

    def test_targets_subset(self, rng):
        g = random_graph(rng, 30, p=0.1)
        X = rng.normal(size=(30, 4))
        model = random_model(rng, 4, 3)
        full = forward(model, g, X).logits
        sub = forward(model, g, X, targets=[17, 3, 3, 25])
        assert sub.targets.tolist() == [3, 17, 25]
        np.testing.assert_allclose(sub.logits, full[[3, 17, 25]], atol=1e-13)

    def test_eval_deterministic(self, rng):
        g = random_graph(rng, 12)
        X = rng.normal(size=(12, 4))
        model = random_model(rng, 4, 2)
        a = forward(model, g, X, dropout=0.5, rng=np.random.default_rng(1)).logits
        b = forward(model, g, X, dropout=0.5, rng=np.random.default_rng(2)).logits
        np.testing.assert_array_equal(a, b)

    def test_train_mode_dropout_changes_output(self, rng):
        g = random_graph(rng, 12)
        X = rng.normal(size=(12, 4))
        model = random_model(rng, 4, 2)
        a = forward(model, g, X, train=True, dropout=0.5, rng=np.random.default_rng(1)).logits
        b = forward(model, g, X).logits
        assert not np.allclose(a, b)

    def test_zero_weight_model(self, rng):
        g = random_graph(rng, 6)
        model = random_model(rng, 3, 4)
        for t in model.named().values():
            if t is not model.out_b:
                t[...] = 0.0
        logits = forward(model, g, rng.normal(size=(6, 3))).logits
        np.testing.assert_array_equal(logits, np.tile(model.out_b, (6, 1)))

    def test_eb_reduction(self, rng):
        g = random_graph(rng, 20, cfg=GraphConfig(lam=1.0, mu=1.0))
        X = rng.normal(size=(20, 4))
        model = random_model(rng, 4, 3)
        plain = ModelParams(model.layers, model.out_W, model.out_b, "plain", model.negative_slope)
        np.testing.assert_allclose(forward(model, g, X).logits, forward(plain, g, X).logits, atol=1e-12, rtol=0)

    def test_permutation_equivariance(self, rng):
        g = random_graph(rng, 25)
        X = rng.normal(size=(25, 4))
        model = random_model(rng, 4, 3)
        perm = rng.permutation(25)
        Xp = np.empty_like(X)
        Xp[perm] = X
        base = forward(model, g, X).logits
        moved = forward(model, g.permuted(perm), Xp).logits
        np.testing.assert_allclose(moved[perm], base, atol=1e-12)

    def test_shape_errors(self, rng):
        g = random_graph(rng, 5)
        model = random_model(rng, 4, 2)
        with pytest.raises(DataError):
            forward(model, g, rng.normal(size=(5, 3)))
        with pytest.raises(DataError):
            forward(model, g, rng.normal(size=(4, 4)))

    def test_no_graph_layers(self, rng):
        g = random_graph(rng, 5)
        cfg = TrainConfig(layers=0, hidden=4, heads=1)
        model = init_params(3, 2, cfg)
        X = rng.normal(size=(5, 3))
        np.testing.assert_allclose(forward(model, g, X).logits, X @ model.out_W.T + model.out_b)


class TestLoss:
    def test_uniform(self):
        assert cross_entropy(np.zeros((1, 5)), [2]) == pytest.approx(math.log(5), abs=1e-15)
        assert cross_entropy(np.zeros((1, 5)), [2]) == pytest.approx(1.6094, abs=1e-4)

    def test_huge_margin(self):
        assert cross_entropy(np.array([[1e4, 0.0, -1e4]]), [0]) == 0.0

    def test_mean(self, rng):
        logits = rng.normal(size=(2, 3))
        l1 = cross_entropy(logits[:1], [1])
        l2 = cross_entropy(logits[1:], [2])
        assert cross_entropy(logits, [1, 2]) == pytest.approx((l1 + l2) / 2, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy(np.zeros((1, 2)), [2])


class TestBackward:
    @pytest.mark.parametrize("mode", ["eq5", "eq6", "plain"])
    def test_finite_differences(self, rng, mode):
        g = random_graph(rng, 12, p=0.3)
        X = rng.normal(size=(12, 3))
        model = random_model(rng, 3, 3, hidden=4, mode=mode)
        labels = rng.integers(0, 3, size=12)
        errs = finite_difference_errors(model, g, X, labels, targets=[0, 2, 5, 7, 11])
        worst = max(e.max() for e in errs.values())
        assert worst <= 1e-4

    def test_dropout_masks_reused(self, rng):
        g = random_graph(rng, 10, p=0.3)
        X = rng.normal(size=(10, 3))
        model = random_model(rng, 3, 2, hidden=4)
        labels = rng.integers(0, 2, size=10)
        cache = forward(model, g, X, train=True, dropout=0.3, rng=np.random.default_rng(5))
        grads = backward(cache, labels)
        W = model.out_W
        eps = 1e-6
        old = W[0, 0]
        W[0, 0] = old + eps
        up = cross_entropy(forward(model, g, X, train=True, dropout=0.3, rng=np.random.default_rng(5)).logits, labels)
        W[0, 0] = old - eps
        dn = cross_entropy(forward(model, g, X, train=True, dropout=0.3, rng=np.random.default_rng(5)).logits, labels)
        W[0, 0] = old
        assert grads["out.W"][0, 0] == pytest.approx((up - dn) / (2 * eps), rel=1e-6)

    def test_logit_gradient_uniform(self):
        # zero model: logits are the (zero) bias, so dL/db = mean(1/C - onehot)
        cfg = TrainConfig(layers=1, hidden=2, heads=1)
        model = init_params(2, 4, cfg)
        for t in model.named().values():
            t[...] = 0.0
        g = BehaviorGraph(2, [], [], [], GraphConfig())
        cache = forward(model, g, np.ones((2, 2)))
        grads = backward(cache, [1, 3])
        np.testing.assert_allclose(grads["out.b"], np.array([0.25, 0.25 - 0.5, 0.25, 0.25 - 0.5]), atol=1e-15)

    def test_unused_parameters_get_zero(self):
        # constant node features of zero -> the W of layer 0 never influences the loss
        cfg = TrainConfig(layers=1, hidden=3, heads=2)
        model = init_params(2, 2, cfg, seed=3)
        g = BehaviorGraph(3, [0], [1], [EdgeClass.S], GraphConfig())
        grads = backward(forward(model, g, np.zeros((3, 2))), [0, 1, 0])
        np.testing.assert_array_equal(grads["layers.0.W"], 0.0)
        np.testing.assert_array_equal(grads["layers.0.a"], 0.0)


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.002)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step(self):
        # m_hat = 1, v_hat = 1 at t = 1 -> update = -lr / (1 + eps)
        p = {"w": np.array([0.0])}
        state = adam_step(p, {"w": np.array([1.0])}, AdamState(), 0.002)
        assert state.t == 1
        assert p["w"][0] == pytest.approx(-0.002 / (1 + 1e-8), abs=1e-18)

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            adam_step({"w": np.zeros(1)}, {"w": np.array([np.inf])}, AdamState(), 0.1)

    def test_identical_trajectories(self, rng):
        g = random_graph(rng, 20)
        X = rng.normal(size=(20, 3))
        labels = rng.integers(0, 2, size=20)
        cfg = TrainConfig(hidden=4, heads=2, epochs=3, batch_size=7, seed=9)
        runs = []
        for _ in range(2):
            res = train(init_params(3, 2, cfg), g, X, labels, np.arange(14), np.arange(14, 20), cfg)
            runs.append(res)
        assert runs[0].history == runs[1].history
        for a, b in zip(runs[0].best.named().values(), runs[1].best.named().values()):
            np.testing.assert_array_equal(a, b)


class TestPredict:
    def test_rows_sum_to_one(self, rng):
        g = random_graph(rng, 10)
        _, probs = predict(random_model(rng, 3, 4, scale=5.0), g, rng.normal(size=(10, 3)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def _bias_only(self, bias):
        cfg = TrainConfig(layers=0)
        model = init_params(1, len(bias), cfg)
        model.out_W[...] = 0.0
        model.out_b[:] = bias
        return model

    def test_hand_softmax(self):
        cls, probs = predict(self._bias_only([10.0, 0.0]), BehaviorGraph(1, [], [], [], GraphConfig()), np.zeros((1, 1)))
        assert cls.tolist() == [0]
        assert probs[0, 0] == pytest.approx(0.99995, abs=5e-6)
        assert probs[0, 0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-15)

    def test_tie_lowest_index(self):
        cls, _ = predict(self._bias_only([1.0, 3.0, 3.0]), BehaviorGraph(1, [], [], [], GraphConfig()), np.zeros((1, 1)))
        assert cls.tolist() == [1]


class TestInit:
    cfg = TrainConfig(hidden=8, heads=2, layers=2)

    def test_same_seed(self):
        a, b = init_params(5, 3, self.cfg, seed=1), init_params(5, 3, self.cfg, seed=1)
        for x, y in zip(a.named().values(), b.named().values()):
            np.testing.assert_array_equal(x, y)

    def test_different_seed(self):
        a, b = init_params(5, 3, self.cfg, seed=1), init_params(5, 3, self.cfg, seed=2)
        assert not np.array_equal(a.layers[0].W, b.layers[0].W)

    def test_bounds(self):
        m = init_params(5, 3, self.cfg, seed=1)
        bounds = {
            "layers.0.W": math.sqrt(6 / (5 + 8)),
            "layers.1.W": math.sqrt(6 / (8 + 8)),
            "layers.0.a": math.sqrt(6 / (16 + 1)),
            "layers.1.a": math.sqrt(6 / (16 + 1)),
            "out.W": math.sqrt(6 / (8 + 3)),
        }
        named = m.named()
        for name, s in bounds.items():
            assert np.all(np.abs(named[name]) < s)
        np.testing.assert_array_equal(named["out.b"], 0.0)

    @pytest.mark.parametrize("field, value", [("mode", "eq7"), ("heads", 0), ("dropout", 1.0), ("learning_rate", 0)])
    def test_bad_config(self, field, value):
        from bsgat.errors import ConfigError

        with pytest.raises(ConfigError):
            TrainConfig(**{field: value})


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        model = random_model(rng, 4, 3, mode="eq6")
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, {"note": "x"})
        loaded, header = load_checkpoint(path)
        assert loaded.mode == "eq6"
        assert header["extra"] == {"note": "x"}
        for a, b in zip(model.named().values(), loaded.named().values()):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"nope")
        with pytest.raises(DataError):
            load_checkpoint(path)


class TestTraining:
    def test_zero_epochs_keeps_init(self, rng):
        g = random_graph(rng, 10)
        cfg = TrainConfig(hidden=4, heads=1, epochs=0)
        model = init_params(3, 2, cfg)
        init = model.copy()
        res = train(model, g, rng.normal(size=(10, 3)), rng.integers(0, 2, 10), np.arange(6), np.arange(6, 10), cfg)
        assert res.best_epoch == 0 and res.history == []
        for a, b in zip(init.named().values(), res.best.named().values()):
            np.testing.assert_array_equal(a, b)

    def test_learns_separable_graph(self, rng):
        # two cliques with distinct features
        n = 40
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if (i < 20) == (j < 20)]
        g = BehaviorGraph(n, [p[0] for p in pairs], [p[1] for p in pairs], [EdgeClass.S] * len(pairs), GraphConfig())
        labels = (np.arange(n) >= 20).astype(np.int64)
        X = rng.normal(size=(n, 3)) * 0.3 + labels[:, None]
        cfg = TrainConfig(hidden=8, heads=2, epochs=30, batch_size=10, learning_rate=0.01, dropout=0.0)
        idx = rng.permutation(n)
        res = train(init_params(3, 2, cfg), g, X, labels, idx[:24], idx[24:], cfg)
        assert res.best_val_f1 == 1.0
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 25), mode=st.sampled_from(["eq5", "eq6", "plain"]))
def test_attention_normalised(seed, n, mode):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, p=float(rng.uniform(0, 0.6)))
    X = rng.normal(size=(n, 3)) * 3
    model = random_model(rng, 3, 2, mode=mode, scale=3.0)
    cache = forward(model, g, X)
    for lc in cache.layers:
        for hc in lc.heads:
            sums = np.bincount(lc.block.dst, weights=hc.alpha, minlength=lc.block.n_out)
            np.testing.assert_allclose(sums, 1.0, atol=1e-12)
