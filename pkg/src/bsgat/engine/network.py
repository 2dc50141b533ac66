"""Behavior-weighted graph attention: forward pass, loss and exact gradients.

Every layer lets node ``i`` attend over ``{i} ∪ N(i)``; the implicit self
entry carries behaviour weight 1. Per head ``k``::

    e_ij   = LeakyReLU(a_k[:F'] . W_k v_i + a_k[F':] . W_k v_j)
    alpha  = eb_ij exp(e_ij) / sum_s eb_is exp(e_is)       (eq5, eq6)
    alpha  = exp(e_ij) / sum_s exp(e_is)                    (plain)
    v'_i   = ELU(mean_k sum_j c_ij W_k v_j)

with ``c_ij = alpha_ij`` (eq5, plain) or ``eb_ij * alpha_ij`` (eq6). Heads are
averaged. A dense layer maps the last hidden vectors to class logits.

Forward passes are restricted to the receptive field of the requested target
nodes, so a minibatch touches only its 2-hop neighbourhood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import DataError, NumericalError
from ..graph_builder import BehaviorGraph
from .params import LayerParams, ModelParams

_CHUNK = 1 << 15


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# --------------------------------------------------------------------------
# per-node reference path


def _members(graph: BehaviorGraph, i: int) -> tuple[np.ndarray, np.ndarray]:
    nb = graph.neighbors(i)
    idx = np.array([i] + [j for j, _ in nb], dtype=np.int64)
    eb = np.array([1.0] + [graph.config.weight(c) for _, c in nb])
    return idx, eb


def attention_coefficients(layer: LayerParams, feats: np.ndarray, graph: BehaviorGraph, i: int,
                           mode: str = "eq5", negative_slope: float = 0.2):
    """Attention of node ``i`` over itself and its neighbours, one row per head.

    Returns ``(members, alpha)`` where ``members[0] == i`` and ``alpha`` has
    shape ``(K, len(members))``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise DataError("non-finite node features")
    idx, eb = _members(graph, i)
    weights = np.ones_like(eb) if mode == "plain" else eb
    alpha = np.empty((layer.heads, idx.size))
    F = layer.out_dim
    for k in range(layer.heads):
        z = feats[idx] @ layer.W[k].T
        logits = leaky_relu(layer.a[k, :F] @ z[0] + z @ layer.a[k, F:], negative_slope)
        p = weights * np.exp(logits - logits.max())
        alpha[k] = p / p.sum()
    return idx, alpha


def aggregate(alpha: np.ndarray, layer: LayerParams, feats: np.ndarray, graph: BehaviorGraph, i: int,
              mode: str = "eq5") -> np.ndarray:
    """Hidden vector of node ``i`` from per-head attention over its members."""
    idx, eb = _members(graph, i)
    total = np.zeros(layer.out_dim)
    for k in range(layer.heads):
        coef = alpha[k] * eb if mode == "eq6" else alpha[k]
        total += coef @ (feats[idx] @ layer.W[k].T)
    return elu(total / layer.heads)


# --------------------------------------------------------------------------
# vectorised blocks


@dataclass
class Block:
    """Edges feeding one layer: outputs ``rows_out`` from inputs ``rows_in``.

    Entries are grouped by output node (``indptr``), self entry first.
    ``src`` indexes ``rows_in``; ``center`` maps each output node to its own
    position in ``rows_in``.
    """

    rows_in: np.ndarray
    rows_out: np.ndarray
    indptr: np.ndarray
    dst: np.ndarray
    src: np.ndarray
    eb: np.ndarray
    center: np.ndarray

    @property
    def n_out(self) -> int:
        return self.rows_out.size

    @property
    def n_in(self) -> int:
        return self.rows_in.size


def _gather_neighbors(indptr, indices, nodes):
    starts = indptr[nodes]
    lens = indptr[nodes + 1] - starts
    total = int(lens.sum())
    owner = np.repeat(np.arange(nodes.size), lens)
    base = np.repeat(starts - np.concatenate([[0], np.cumsum(lens)[:-1]]), lens)
    pos = base + np.arange(total)
    return owner, pos


def build_blocks(graph: BehaviorGraph, num_layers: int, targets: np.ndarray | None = None) -> list[Block]:
    indptr, indices, cls = graph.csr()
    weights = graph.config.weights
    if targets is None:
        rows = [np.arange(graph.n)] * (num_layers + 1)
    else:
        rows = [np.unique(np.asarray(targets, dtype=np.int64))]
        for _ in range(num_layers):
            owner, pos = _gather_neighbors(indptr, indices, rows[0])
            rows.insert(0, np.union1d(rows[0], indices[pos]))
    blocks = []
    for l in range(num_layers):
        rows_in, rows_out = rows[l], rows[l + 1]
        owner, pos = _gather_neighbors(indptr, indices, rows_out)
        dst = np.concatenate([np.arange(rows_out.size), owner])
        src_global = np.concatenate([rows_out, indices[pos]])
        eb = np.concatenate([np.ones(rows_out.size), weights[cls[pos]]])
        order = np.argsort(dst, kind="stable")
        dst, src_global, eb = dst[order], src_global[order], eb[order]
        counts = np.bincount(dst, minlength=rows_out.size)
        ptr = np.zeros(rows_out.size + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        blocks.append(Block(rows_in, rows_out, ptr, dst, np.searchsorted(rows_in, src_global), eb,
                            np.searchsorted(rows_in, rows_out)))
    return blocks


def _edge_dot(A: np.ndarray, ia: np.ndarray, B: np.ndarray, ib: np.ndarray) -> np.ndarray:
    """``sum_f A[ia[e], f] * B[ib[e], f]`` for every entry ``e``, in chunks."""
    out = np.empty(ia.size)
    for s in range(0, ia.size, _CHUNK):
        sl = slice(s, s + _CHUNK)
        out[sl] = np.einsum("ef,ef->e", A[ia[sl]], B[ib[sl]])
    return out


@dataclass
class HeadCache:
    positive: np.ndarray
    alpha: np.ndarray
    att_mask: np.ndarray | None
    matrix: sp.csr_matrix
    mixed: np.ndarray  # matrix @ x_in


@dataclass
class LayerCache:
    block: Block
    x_in: np.ndarray  # after input dropout
    in_mask: np.ndarray | None
    heads: list[HeadCache]
    pre: np.ndarray


@dataclass
class ForwardCache:
    model: ModelParams
    targets: np.ndarray
    layers: list[LayerCache]
    hidden: np.ndarray
    logits: np.ndarray
    dropout: float


def _dropout_mask(rng, shape, rate):
    return (rng.random(shape) >= rate) / (1.0 - rate)


def _layer_forward(layer: LayerParams, block: Block, x_in: np.ndarray, mode: str, slope: float,
                   rng, dropout: float):
    # All per-entry work happens in the input width: W_k v_j is never
    # materialised per edge since a.(W v) = (W^T a).v and sum c W v = W sum c v.
    F = layer.out_dim
    heads = []
    total = np.zeros((block.n_out, F))
    starts = block.indptr[:-1]
    weights = np.ones_like(block.eb) if mode == "plain" else block.eb
    for k in range(layer.heads):
        W = layer.W[k]
        s_center = x_in[block.center] @ (W.T @ layer.a[k, :F])
        s_nbr = x_in @ (W.T @ layer.a[k, F:])
        e = s_center[block.dst] + s_nbr[block.src]
        positive = e > 0
        g = np.where(positive, e, slope * e)
        gmax = np.maximum.reduceat(g, starts)
        p = weights * np.exp(g - gmax[block.dst])
        den = np.bincount(block.dst, weights=p, minlength=block.n_out)
        alpha = p / den[block.dst]
        att_mask = None
        coef = alpha
        if rng is not None and dropout > 0:
            att_mask = _dropout_mask(rng, alpha.shape, dropout)
            coef = alpha * att_mask
        if mode == "eq6":
            coef = coef * block.eb
        matrix = sp.csr_matrix((coef, block.src, block.indptr), shape=(block.n_out, block.n_in))
        mixed = matrix @ x_in
        total += mixed @ W.T
        heads.append(HeadCache(positive, alpha, att_mask, matrix, mixed))
    return heads, total / layer.heads


def forward(model: ModelParams, graph: BehaviorGraph, features: np.ndarray, *, train: bool = False,
            dropout: float = 0.0, rng: np.random.Generator | None = None,
            targets=None) -> ForwardCache:
    """Logits for ``targets`` (sorted, unique; all nodes by default).

    Dropout on layer inputs and attention coefficients is applied only when
    ``train`` is true and an ``rng`` is given.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != graph.n:
        raise DataError(f"feature matrix has shape {X.shape}, graph has {graph.n} nodes")
    if X.shape[1] != model.in_dim:
        raise DataError(f"feature dimension {X.shape[1]} does not match model input {model.in_dim}")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite node features")
    use_rng = rng if (train and dropout > 0) else None
    blocks = build_blocks(graph, len(model.layers), targets)
    target_rows = blocks[-1].rows_out if blocks else (
        np.arange(graph.n) if targets is None else np.unique(np.asarray(targets, dtype=np.int64)))

    h = X[blocks[0].rows_in] if blocks else X[target_rows]
    caches = []
    for layer, block in zip(model.layers, blocks):
        in_mask = None
        if use_rng is not None:
            in_mask = _dropout_mask(use_rng, h.shape, dropout)
            h = h * in_mask
        heads, pre = _layer_forward(layer, block, h, model.mode, model.negative_slope,
                                    use_rng, dropout)
        caches.append(LayerCache(block, h, in_mask, heads, pre))
        h = elu(pre)
    logits = h @ model.out_W.T + model.out_b
    return ForwardCache(model, target_rows, caches, h, logits, dropout if use_rng is not None else 0.0)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DataError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label outside 0..{logits.shape[1] - 1}")
    lp = log_softmax(logits)
    return float(-lp[np.arange(labels.size), labels].mean())


def backward(cache: ForwardCache, labels) -> dict[str, np.ndarray]:
    """Gradients of the mean cross-entropy for every tensor in ``model.named()``."""
    model = cache.model
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    dlogits = softmax(cache.logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads = {
        "out.W": dlogits.T @ cache.hidden,
        "out.b": dlogits.sum(axis=0),
    }
    dh = dlogits @ model.out_W
    slope = model.negative_slope
    for li in range(len(model.layers) - 1, -1, -1):
        layer, lc = model.layers[li], cache.layers[li]
        block = lc.block
        F = layer.out_dim
        dpre = dh * np.where(lc.pre > 0, 1.0, np.exp(np.minimum(lc.pre, 0.0)))
        dagg = dpre / layer.heads
        dW = np.zeros_like(layer.W)
        da = np.zeros_like(layer.a)
        need_dx = li > 0
        dx = np.zeros_like(lc.x_in) if need_dx else None
        x_center = lc.x_in[block.center]
        for k, hc in enumerate(lc.heads):
            W = layer.W[k]
            a_c, a_n = layer.a[k, :F], layer.a[k, F:]
            back = dagg @ W  # gradient w.r.t. the mixed inputs
            dcoef = _edge_dot(back, block.dst, lc.x_in, block.src)
            if model.mode == "eq6":
                dcoef = dcoef * block.eb
            dalpha = dcoef * hc.att_mask if hc.att_mask is not None else dcoef
            # softmax Jacobian; eb only rescales the normalised weights
            weighted = np.bincount(block.dst, weights=hc.alpha * dalpha, minlength=block.n_out)
            dg = hc.alpha * (dalpha - weighted[block.dst])
            de = np.where(hc.positive, dg, slope * dg)
            ds_center = np.bincount(block.dst, weights=de, minlength=block.n_out)
            ds_nbr = np.bincount(block.src, weights=de, minlength=block.n_in)
            xc = ds_center @ x_center
            xn = ds_nbr @ lc.x_in
            da[k, :F] = W @ xc
            da[k, F:] = W @ xn
            dW[k] = dagg.T @ hc.mixed + np.outer(a_c, xc) + np.outer(a_n, xn)
            if need_dx:
                dx += hc.matrix.T @ back
                dx += np.outer(ds_nbr, W.T @ a_n)
                dx[block.center] += np.outer(ds_center, W.T @ a_c)
        grads[f"layers.{li}.W"] = dW
        grads[f"layers.{li}.a"] = da
        if need_dx and lc.in_mask is not None:
            dx = dx * lc.in_mask
        dh = dx
    return grads


def predict(model: ModelParams, graph: BehaviorGraph, features: np.ndarray, targets=None):
    """``(classes, probabilities)``; ties resolve to the lowest class index."""
    cache = forward(model, graph, features, train=False, targets=targets)
    probs = softmax(cache.logits)
    return np.argmax(probs, axis=1), probs


def check_finite(value: float, what: str = "loss") -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {what}: {value}")
    return value
