"""Supervised pre-training: encoder + linear softmax head on hyperedge embeddings."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import EncoderConfig, EncoderState, encode_edges, forward
from .hypergraph import Hypergraph
from .metrics import auroc
from .rng import substream
from .splits import holdout_split


class DegenerateTaskError(ValueError):
    pass


class SupervisedHead:
    def __init__(self, d_hi: int, n_classes: int = 2, seed: int | np.random.Generator = 0):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.weights = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d_hi), (d_hi, n_classes)), "head.weights")
        self.bias = Parameter(np.zeros(n_classes), "head.bias")

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weights, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weights, self.bias]


def one_hot(labels, n_classes: int = 2) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(logits, targets, sample_weight=None) -> Tensor:
    """Mean over rows of ``-sum_c y_c log softmax(logits)_c``; ``targets`` one-hot."""
    logits = ad.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"targets {y.shape} vs logits {logits.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and np.all(y.sum(axis=1) == 1.0)):
        raise ValueError("every label row must be one-hot")
    per_row = ad.sub(ad.row_logsumexp(logits), ad.sum_(ad.mul(logits, y), axis=1))
    if sample_weight is None:
        return ad.mean(per_row)
    w = np.asarray(sample_weight, dtype=np.float64)
    return ad.sum_(ad.mul(per_row, w / w.sum()))


@dataclass
class SupervisedConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    epochs: int = 200
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int | None = None
    val_fraction: float = 0.1
    patience: int = 20
    pos_weight: float | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRun:
    epochs: int
    lr: float
    seed: int
    loss_trace: list[float]
    config: dict
    val_auroc: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    extra_traces: dict[str, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _batches(ids: np.ndarray, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= ids.size:
        yield ids
        return
    order = rng.permutation(ids)
    for start in range(0, order.size, batch_size):
        yield np.sort(order[start:start + batch_size])


def predict_proba(hg: Hypergraph, state: EncoderState, head: SupervisedHead,
                  batch_size: int | None = None) -> np.ndarray:
    """Positive-class probability for every hyperedge of ``hg``."""
    emb = encode_edges(hg, state, batch_size)
    with ad.no_grad():
        probs = ad.row_softmax(head(emb)).data
    return probs[:, 1]


def fit_supervised(hg: Hypergraph, labels, config: SupervisedConfig | None = None
                   ) -> tuple[EncoderState, SupervisedHead, TrainRun]:
    """Jointly train encoder and head by cross-entropy on the hyperedge labels.

    A stratified ``val_fraction`` slice is held out for early stopping on
    AUROC; the parameters of the best validation epoch are restored.
    """
    config = config or SupervisedConfig()
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (hg.edge_count,):
        raise ValueError(f"need one label per hyperedge ({hg.edge_count}), got {y.shape}")
    if np.unique(y).size < 2:
        raise DegenerateTaskError("degenerate task: only one class present")

    seed = config.seed
    state = EncoderState(config.encoder, hg.node_count, substream(seed, "supervised.init"),
                         node_labels=hg.node_labels)
    head = SupervisedHead(config.encoder.d_hi, 2, substream(seed, "supervised.head"))
    params = state.parameters() + head.parameters()
    opt = ad.make_optimizer(config.optimizer, params, config.lr)

    all_ids = np.arange(hg.edge_count)
    val_ids = np.zeros(0, dtype=np.int64)
    if config.val_fraction > 0:
        n_val = int(round(config.val_fraction * y.size))
        if min(np.sum(y == 0), np.sum(y == 1)) >= 2 and n_val >= 2:
            train_ids, val_ids = holdout_split(y, config.val_fraction, substream(seed, "supervised.val"))
        else:
            train_ids = all_ids
    else:
        train_ids = all_ids
    if np.unique(y[train_ids]).size < 2:
        raise DegenerateTaskError("degenerate task: training slice has one class")
    val_hg = hg.subgraph_edges(val_ids) if val_ids.size and np.unique(y[val_ids]).size == 2 else None
    full_batch = config.batch_size is None or config.batch_size >= train_ids.size
    train_hg = hg.subgraph_edges(train_ids) if full_batch else None

    batch_rng = substream(seed, "supervised.batches")
    drop_rng = substream(seed, "supervised.dropout") if config.encoder.dropout > 0 else None
    run = TrainRun(0, config.lr, seed, [], config.to_dict())
    best = (-np.inf, None, 0)
    stale = 0
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for batch in _batches(train_ids, config.batch_size, batch_rng):
            sub = train_hg if full_batch else hg.subgraph_edges(batch)
            yb = y[batch]
            opt.zero_grad()
            _, edges = forward(sub, state, drop_rng)
            weights = None
            if config.pos_weight is not None:
                weights = np.where(yb == 1, config.pos_weight, 1.0)
            loss = cross_entropy(head(edges), one_hot(yb), weights)
            loss.backward()
            opt.step()
            total += loss.item() * batch.size
            count += batch.size
        run.loss_trace.append(total / count)
        run.epochs = epoch + 1
        if val_hg is not None:
            score = auroc(predict_proba(val_hg, state, head), y[val_ids])
            run.val_auroc.append(score)
            if score > best[0]:
                best = (score, state.copy_values() + [p.data.copy() for p in head.parameters()], epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    if best[1] is not None:
        for p, v in zip(params, best[1]):
            p.data[...] = v
        run.best_epoch = best[2] + 1
    return state, head, run
