"""Stochastic two-view augmentation of a hypergraph.

Each view independently (1) masks nodes with a duplication-dependent
probability and (2) picks one of three operations per hyperedge by
Gumbel-softmax over logits computed from the hyperedge embedding:
preserve, remove, or mask a random subset of the nodes inside.
Augmentation only ever deletes incidences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .encoder import EncoderState, encode_edges
from .hypergraph import Hypergraph, IncidenceStats, incidence_stats

PRESERVE, REMOVE, MASK_INSIDE = 0, 1, 2
OP_NAMES = ("preserve", "remove", "mask_inside")


class DegenerateViewError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskingPolicy:
    p_node: float = 0.3
    p_tau: float = 0.7
    p_inside: float = 0.3
    mask_direction: str = "formula"

    def __post_init__(self):
        for name in ("p_node", "p_tau", "p_inside"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mask_direction not in ("formula", "prose"):
            raise ValueError("mask_direction must be 'formula' or 'prose'")


def node_mask_probabilities(stats: IncidenceStats, policy: MaskingPolicy) -> np.ndarray:
    """Per-node masking probability ``min(ratio * p_node, p_tau)``.

    ``ratio = (w_max - w_v) / (w_max - w_avg)`` in the default ``formula``
    direction; ``prose`` uses ``(w_v - w_min)`` as numerator so that highly
    duplicated nodes are masked more.  When every active node has the same
    log-duplication the ratio is taken as 1.  Isolated nodes get 0.
    """
    p = np.zeros(stats.log_weight.shape)
    w = stats.log_weight[stats.active]
    spread = stats.w_max - stats.w_avg
    if spread <= 1e-12 * max(1.0, abs(stats.w_max)):
        ratio = np.ones_like(w)
    elif policy.mask_direction == "formula":
        ratio = (stats.w_max - w) / spread
    else:
        ratio = (w - stats.w_min) / spread
    p[stats.active] = np.minimum(ratio * policy.p_node, policy.p_tau)
    return np.clip(p, 0.0, policy.p_tau)


class EdgeAugmentor:
    """Linear map from a hyperedge embedding to three operation logits."""

    def __init__(self, d_hi: int, tau_g: float = 1.0, seed: int | np.random.Generator = 0):
        if tau_g <= 0:
            raise ValueError("Gumbel temperature must be positive")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.W = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d_hi), (d_hi, 3)), "augmentor.W")
        self.tau_g = tau_g

    def logits(self, edge_embeddings):
        return ad.matmul(edge_embeddings, self.W)

    def parameters(self) -> list[Parameter]:
        return [self.W]


def gumbel_softmax_sample(alpha, tau_g: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Soft Gumbel-softmax vectors and their argmax for logits ``alpha`` (``(..., 3)``)."""
    if tau_g <= 0:
        raise ValueError("Gumbel temperature must be positive")
    g, hard, _ = _gumbel_draw(np.asarray(alpha, dtype=np.float64), tau_g, rng)
    return g, hard


def _gumbel_draw(alpha, tau_g, rng):
    gamma = rng.gumbel(size=alpha.shape)
    z = (alpha + gamma) / tau_g
    z -= z.max(axis=-1, keepdims=True)
    g = np.exp(z)
    g /= g.sum(axis=-1, keepdims=True)
    return g, g.argmax(axis=-1), gamma


@dataclass
class View:
    hypergraph: Hypergraph
    node_mask: np.ndarray
    ops: np.ndarray
    edge_ids: np.ndarray
    noise: np.ndarray = field(repr=False)


@dataclass
class ViewPair:
    """Two augmented views of ``base``; ``edge_ids`` map view edges to base edges.

    ``noise_a`` / ``noise_b`` keep the Gumbel draws so the soft operation
    weights can be recomputed with gradients.
    """

    base: Hypergraph
    view_a: Hypergraph
    view_b: Hypergraph
    mask_a: np.ndarray
    mask_b: np.ndarray
    ops_a: np.ndarray
    ops_b: np.ndarray
    edge_ids_a: np.ndarray
    edge_ids_b: np.ndarray
    alpha: np.ndarray
    noise_a: np.ndarray = field(repr=False)
    noise_b: np.ndarray = field(repr=False)
    base_embeddings: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> str:
        def coo(view, ids):
            e, v = view.coo()
            return [[int(ids[a]), int(b)] for a, b in zip(e, v)]

        return json.dumps({
            "view_a": {"incidence": coo(self.view_a, self.edge_ids_a), "node_mask": self.mask_a.astype(int).tolist(),
                       "ops": [OP_NAMES[o] for o in self.ops_a]},
            "view_b": {"incidence": coo(self.view_b, self.edge_ids_b), "node_mask": self.mask_b.astype(int).tolist(),
                       "ops": [OP_NAMES[o] for o in self.ops_b]},
        })


def _make_view(hg: Hypergraph, p_v: np.ndarray, ops: np.ndarray, p_inside: float,
               rng: np.random.Generator) -> tuple[Hypergraph, np.ndarray, np.ndarray]:
    node_mask = rng.random(hg.node_count) < p_v
    e, v = hg.coo()
    keep = ~node_mask[v]
    keep &= ops[e] != REMOVE
    inside = ops[e] == MASK_INSIDE
    drop_inside = rng.random(e.size) < p_inside
    keep &= ~(inside & drop_inside)
    e, v = e[keep], v[keep]
    survivors = np.unique(e)
    remap = np.full(hg.edge_count, -1)
    remap[survivors] = np.arange(survivors.size)
    view = Hypergraph(hg.node_count, remap[e], v, hg.node_labels,
                      [hg.edge_labels[j] for j in survivors], edge_count=survivors.size)
    return view, node_mask, survivors


def generate_views(hg: Hypergraph, state: EncoderState, policy: MaskingPolicy, augmentor: EdgeAugmentor,
                   rng: np.random.Generator, p_v: np.ndarray | None = None, max_tries: int = 10,
                   forced_ops: int | None = None, encode_batch: int | None = None) -> ViewPair:
    """Draw two independent augmented views of ``hg``.

    ``p_v`` defaults to the masking probabilities of ``hg`` itself; pass the
    probabilities of a larger parent hypergraph when ``hg`` is a mini-batch.
    ``forced_ops`` pins every hyperedge to one operation (used for the
    identity augmentation).  Logits are computed from detached embeddings.
    """
    if p_v is None:
        p_v = node_mask_probabilities(incidence_stats(hg), policy)
    if forced_ops is None:
        base_emb = encode_edges(hg, state, encode_batch)
        alpha = base_emb @ augmentor.W.data
    else:
        base_emb = None
        alpha = np.zeros((hg.edge_count, 3))
    views = []
    for _ in range(2):
        for _attempt in range(max_tries):
            _, ops, noise = _gumbel_draw(alpha, augmentor.tau_g, rng)
            if forced_ops is not None:
                ops = np.full(hg.edge_count, forced_ops)
            view, mask, ids = _make_view(hg, p_v, ops, policy.p_inside, rng)
            if view.edge_count > 0:
                views.append(View(view, mask, ops, ids, noise))
                break
        else:
            raise DegenerateViewError(f"augmented view lost every hyperedge after {max_tries} draws")
    a, b = views
    return ViewPair(hg, a.hypergraph, b.hypergraph, a.node_mask, b.node_mask, a.ops, b.ops,
                    a.edge_ids, b.edge_ids, alpha, a.noise, b.noise, base_emb)
