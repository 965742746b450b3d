"""Self-supervised pre-training with five cross-view objectives.

Given two augmented views the encoder is run on each, and

* ``sim``        mean squared difference of node embeddings,
* ``hyper``      one-directional hyperedge InfoNCE (view A anchors, view B candidates),
* ``node``       symmetric node InfoNCE,
* ``edge``       symmetric hyperedge InfoNCE,
* ``membership`` symmetric node -> hyperedge InfoNCE over surviving incidences

are summed.  Similarity is cosine.  Items masked or removed in either view
take no part in a term, neither as anchors nor as negatives.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import (OP_NAMES, EdgeAugmentor, MaskingPolicy, ViewPair, generate_views,
                      node_mask_probabilities)
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderState, forward
from .hypergraph import Hypergraph, incidence_stats
from .rng import substream
from .supervised import TrainRun, _batches


class AlignmentError(ValueError):
    pass


def info_nce(anchors, candidates, positives, tau: float) -> Tensor:
    """Per-anchor ``-log softmax_q(cos(a, c_q) / tau)[positive]``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = ad.l2_normalize(anchors)
    c = ad.l2_normalize(candidates)
    logits = ad.scale(ad.matmul(a, ad.transpose(c)), 1.0 / tau)
    rows = np.arange(logits.shape[0])
    return ad.sub(ad.row_logsumexp(logits), ad.pick(logits, rows, positives))


def contrastive_pair(x_i, x_j, candidates, tau: float) -> float:
    """Single-anchor InfoNCE; ``x_j`` must be one of the ``candidates`` rows."""
    cand = np.atleast_2d(np.asarray(candidates.data if isinstance(candidates, Tensor) else candidates,
                                    dtype=np.float64))
    xj = np.asarray(x_j.data if isinstance(x_j, Tensor) else x_j, dtype=np.float64)
    hits = np.flatnonzero(np.all(cand == xj, axis=1))
    if hits.size == 0:
        raise ValueError("the positive must be among the candidates")
    xi = np.atleast_2d(np.asarray(x_i.data if isinstance(x_i, Tensor) else x_i, dtype=np.float64))
    return float(info_nce(xi, cand, hits[:1], tau).data[0])


def loss_sim(x_a, x_b) -> Tensor:
    if x_a.shape[0] == 0:
        raise AlignmentError("disjoint views: no shared nodes")
    return ad.mse(x_a, x_b)


def loss_hyper(e_a, e_b, tau: float) -> Tensor:
    if e_a.shape[0] == 0:
        raise AlignmentError("no hyperedge survives in both views")
    return ad.mean(info_nce(e_a, e_b, np.arange(e_a.shape[0]), tau))


def _symmetric(x_a, x_b, tau: float, what: str) -> Tensor:
    n = x_a.shape[0]
    if n == 0:
        raise AlignmentError(f"no {what} survives in both views")
    idx = np.arange(n)
    both = ad.add(ad.sum_(info_nce(x_a, x_b, idx, tau)), ad.sum_(info_nce(x_b, x_a, idx, tau)))
    return ad.scale(both, 1.0 / (2 * n))


def loss_node(n_a, n_b, tau: float) -> Tensor:
    return _symmetric(n_a, n_b, tau, "node")


def loss_edge(e_a, e_b, tau: float) -> Tensor:
    return _symmetric(e_a, e_b, tau, "hyperedge")


def loss_membership(n_a, n_b, e_a, e_b, node_rows, edge_rows, tau: float) -> Tensor:
    """Memberships ``(node_rows[k], edge_rows[k])`` index the aligned node/edge tables."""
    k = len(node_rows)
    if k == 0:
        raise AlignmentError("no surviving memberships")
    node_rows = np.asarray(node_rows)
    edge_rows = np.asarray(edge_rows)
    ab = info_nce(ad.take_rows(n_a, node_rows), e_b, edge_rows, tau)
    ba = info_nce(ad.take_rows(n_b, node_rows), e_a, edge_rows, tau)
    return ad.scale(ad.add(ad.sum_(ab), ad.sum_(ba)), 1.0 / (2 * k))


@dataclass
class LossReport:
    sim: float
    hyper: float
    node: float
    edge: float
    membership: float
    total: float
    total_tensor: Tensor = field(repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("sim", "hyper", "node", "edge", "membership", "total")}


@dataclass(frozen=True)
class Alignment:
    """Row indices into each view's tables for items that survive in both."""

    nodes: np.ndarray
    edges_a: np.ndarray
    edges_b: np.ndarray
    member_nodes: np.ndarray
    member_edges: np.ndarray


def align_views(pair: ViewPair) -> Alignment:
    nodes = np.flatnonzero((pair.view_a.node_degrees > 0) & (pair.view_b.node_degrees > 0))
    shared, ia, ib = np.intersect1d(pair.edge_ids_a, pair.edge_ids_b, return_indices=True)
    n = pair.base.node_count
    ea, va = pair.view_a.coo()
    eb, vb = pair.view_b.coo()
    key_a = pair.edge_ids_a[ea] * n + va
    key_b = pair.edge_ids_b[eb] * n + vb
    both = np.intersect1d(key_a, key_b)
    base_edge, node = both // n, both % n
    node_pos = np.searchsorted(nodes, node)
    edge_pos = np.searchsorted(shared, base_edge)
    return Alignment(nodes, ia, ib, node_pos, edge_pos)


def pair_losses(pair: ViewPair, out_a, out_b, tau: float, alignment: Alignment | None = None,
                edge_weights=(None, None)) -> LossReport:
    """All five objectives from encoder outputs ``(nodes, edges)`` of both views."""
    al = alignment or align_views(pair)
    (nodes_a, edges_a), (nodes_b, edges_b) = out_a, out_b
    if edge_weights[0] is not None:
        edges_a = ad.mul(edges_a, ad.reshape(edge_weights[0], (-1, 1)))
        edges_b = ad.mul(edges_b, ad.reshape(edge_weights[1], (-1, 1)))
    n_a, n_b = ad.take_rows(nodes_a, al.nodes), ad.take_rows(nodes_b, al.nodes)
    e_a, e_b = ad.take_rows(edges_a, al.edges_a), ad.take_rows(edges_b, al.edges_b)
    parts = {
        "sim": loss_sim(n_a, n_b),
        "hyper": loss_hyper(e_a, e_b, tau),
        "node": loss_node(n_a, n_b, tau),
        "edge": loss_edge(e_a, e_b, tau),
        "membership": loss_membership(n_a, n_b, e_a, e_b, al.member_nodes, al.member_edges, tau),
    }
    total = parts["sim"]
    for name in ("hyper", "node", "edge", "membership"):
        total = ad.add(total, parts[name])
    return LossReport(**{k: v.item() for k, v in parts.items()}, total=total.item(), total_tensor=total)


@dataclass
class ContrastiveConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    policy: MaskingPolicy = field(default_factory=MaskingPolicy)
    tau_level: float = 0.5
    tau_g: float = 1.0
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int | None = 256
    learn_augmentor: bool = False
    forced_op: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tau_level <= 0:
            raise ValueError("tau_level must be positive")
        if self.forced_op not in (None, "preserve", "remove", "mask_inside"):
            raise ValueError(f"unknown forced_op {self.forced_op!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _soft_weights(pair: ViewPair, augmentor: EdgeAugmentor, which: str):
    alpha = ad.matmul(ad.Tensor(pair.base_embeddings), augmentor.W)
    noise = pair.noise_a if which == "a" else pair.noise_b
    ops = pair.ops_a if which == "a" else pair.ops_b
    ids = pair.edge_ids_a if which == "a" else pair.edge_ids_b
    g = ad.row_softmax(ad.scale(ad.add(alpha, noise), 1.0 / augmentor.tau_g))
    return ad.straight_through(ad.pick(g, ids, ops[ids]))


def fit_unsupervised(hg: Hypergraph, config: ContrastiveConfig | None = None
                     ) -> tuple[EncoderState, TrainRun]:
    """Contrastive pre-training; returns the trained encoder and its loss traces.

    Fresh views are drawn at every optimisation step.  With ``batch_size``
    each step augments a random subset of hyperedges (all their nodes kept).
    """
    config = config or ContrastiveConfig()
    seed = config.seed
    state = EncoderState(config.encoder, hg.node_count, substream(seed, "unsupervised.init"),
                         node_labels=hg.node_labels)
    augmentor = EdgeAugmentor(config.encoder.d_hi, config.tau_g, substream(seed, "unsupervised.augmentor"))
    params = state.parameters() + (augmentor.parameters() if config.learn_augmentor else [])
    opt = ad.make_optimizer(config.optimizer, params, config.lr)
    p_v = node_mask_probabilities(incidence_stats(hg), config.policy)
    forced = None if config.forced_op is None else OP_NAMES.index(config.forced_op)

    batch_rng = substream(seed, "unsupervised.batches")
    view_rng = substream(seed, "augment.views")
    drop_rng = substream(seed, "unsupervised.dropout") if config.encoder.dropout > 0 else None
    ids = np.arange(hg.edge_count)
    full = config.batch_size is None or config.batch_size >= hg.edge_count
    run = TrainRun(0, config.lr, seed, [], config.to_dict())
    names = ("sim", "hyper", "node", "edge", "membership")
    run.extra_traces = {k: [] for k in names}
    run.extra_traces["step_total"] = []
    for epoch in range(config.epochs):
        sums = dict.fromkeys(names + ("total",), 0.0)
        steps = 0
        for batch in _batches(ids, config.batch_size, batch_rng):
            sub = hg if full else hg.subgraph_edges(batch)
            pair = generate_views(sub, state, config.policy, augmentor, view_rng, p_v=p_v, forced_ops=forced)
            opt.zero_grad()
            out_a = forward(pair.view_a, state, drop_rng)
            out_b = forward(pair.view_b, state, drop_rng)
            weights = (None, None)
            if config.learn_augmentor and pair.base_embeddings is not None:
                weights = (_soft_weights(pair, augmentor, "a"), _soft_weights(pair, augmentor, "b"))
            report = pair_losses(pair, out_a, out_b, config.tau_level, edge_weights=weights)
            report.total_tensor.backward()
            opt.step()
            for k in sums:
                sums[k] += getattr(report, k)
            run.extra_traces["step_total"].append(report.total)
            steps += 1
        run.loss_trace.append(sums["total"] / steps)
        for k in names:
            run.extra_traces[k].append(sums[k] / steps)
        run.epochs = epoch + 1
    return state, run
