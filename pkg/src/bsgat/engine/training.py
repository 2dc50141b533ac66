"""Minibatch training with best-on-validation checkpoint retention."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..eval_metrics import evaluate
from ..graph_builder import BehaviorGraph
from .network import backward, check_finite, cross_entropy, forward
from .optim import AdamState, adam_step
from .params import ModelParams, TrainConfig


@dataclass
class TrainResult:
    best: ModelParams
    best_epoch: int
    best_val_f1: float
    history: list[dict] = field(default_factory=list)


def weighted_f1(model, graph, X, labels, nodes, num_classes) -> float:
    if len(nodes) == 0:
        return 0.0
    cache = forward(model, graph, X, train=False, targets=nodes)
    pred = np.argmax(cache.logits, axis=1)
    classes = [str(c) for c in range(num_classes)]
    return evaluate(pred, labels[cache.targets], classes).weighted_f1


def train(model: ModelParams, graph: BehaviorGraph, X: np.ndarray, labels: np.ndarray,
          train_idx, val_idx, cfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam over shuffled minibatches of training nodes.

    Each epoch ends with a validation pass; the parameters with the best
    validation weighted F1 are kept (earliest epoch on ties). Epoch 0 is the
    initialisation.
    """
    rng = np.random.default_rng(cfg.seed)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    C = model.num_classes
    params = model.named()
    state = AdamState()

    best = model.copy()
    best_epoch = 0
    best_f1 = weighted_f1(model, graph, X, labels, val_idx, C)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        for s in range(0, order.size, cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            cache = forward(model, graph, X, train=True, dropout=cfg.dropout, rng=rng, targets=batch)
            y = labels[cache.targets]
            loss = check_finite(cross_entropy(cache.logits, y))
            adam_step(params, backward(cache, y), state, cfg.learning_rate)
            loss_sum += loss * y.size
        val_f1 = weighted_f1(model, graph, X, labels, val_idx, C)
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / max(train_idx.size, 1),
            "val_weighted_f1": val_f1,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_f1 > best_f1:
            best, best_epoch, best_f1 = model.copy(), epoch, val_f1
    return TrainResult(best, best_epoch, best_f1, history)


def format_log_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True)
