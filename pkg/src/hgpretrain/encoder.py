"""Hypergraph transformer encoder.

Each layer runs two multi-head set-attention passes: every hyperedge attends
over its member nodes (node -> edge), then every node attends over its
incident hyperedges (edge -> node) using the hyperedge embeddings of the same
layer.  A set's updated rows are mean-pooled into one vector.  For the
edge -> node pass the node's own current embedding is prepended to the set
as an extra row; nodes without incident hyperedges keep their embedding.

Sets are bucketed by size (see :class:`hgpretrain.hypergraph.AttentionPlan`)
so that attention over thousands of small sets becomes a handful of batched
matmuls.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .hypergraph import Hypergraph


@dataclass(frozen=True)
class EncoderConfig:
    d_hi: int = 32
    heads: int = 4
    layers: int = 2
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.heads < 1 or self.d_hi // self.heads < 1:
            raise ValueError(f"d_hi={self.d_hi} too small for {self.heads} heads")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_hi // self.heads


class AttentionBlock:
    """Per-head query/key/value projections, output projection and layer norm.

    The H per-head ``d_hi x d_k`` matrices are stored side by side as one
    ``d_hi x (H*d_k)`` matrix; head ``h`` owns columns ``h*d_k:(h+1)*d_k``.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, name: str):
        d, hk = config.d_hi, config.heads * config.d_k
        self.config = config
        std = 1.0 / math.sqrt(d)
        self.w_q = Parameter(rng.normal(0.0, std, (d, hk)), f"{name}.w_q")
        self.w_k = Parameter(rng.normal(0.0, std, (d, hk)), f"{name}.w_k")
        self.w_v = Parameter(rng.normal(0.0, std, (d, hk)), f"{name}.w_v")
        self.w_o = Parameter(rng.normal(0.0, 1.0 / math.sqrt(hk), (hk, d)), f"{name}.w_o")
        self.b_o = Parameter(np.zeros(d), f"{name}.b_o")
        self.ln_gamma = Parameter(np.ones(d), f"{name}.ln_gamma")
        self.ln_beta = Parameter(np.zeros(d), f"{name}.ln_beta")

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.b_o, self.ln_gamma, self.ln_beta]


def set_attention(block: AttentionBlock, x_set, rng: np.random.Generator | None = None,
                  mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention over the rows of one set or a batch of sets.

    ``x_set`` has shape ``(s, d_hi)`` or ``(batch, s, d_hi)``.  Heads are
    concatenated, projected, added to the input and layer-normalised.  For
    padded batches, ``mask`` (``(batch, s)`` bool) marks real rows; padded
    rows are never attended to and their outputs are meaningless.

    This is a single graph node with a hand-written adjoint; see
    :func:`set_attention_reference` for the same map composed from
    primitives.
    """
    x = ad.as_tensor(x_set)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[1] == 0:
        raise ValueError("set attention over an empty set")
    if mask is not None and not np.asarray(mask).any(axis=-1).all():
        raise ValueError("set attention over an empty set")
    out = _fused_attention(block, x, rng, mask)
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def _fused_attention(block: AttentionBlock, x: Tensor, rng, mask=None) -> Tensor:
    cfg = block.config
    H, dk = cfg.heads, cfg.d_k
    n, s, d = x.shape
    X = x.data
    c = 1.0 / math.sqrt(dk)

    def split(t):
        return t.reshape(n, s, H, dk).transpose(0, 2, 1, 3)

    Q, K, V = split(X @ block.w_q.data), split(X @ block.w_k.data), split(X @ block.w_v.data)
    # scores are laid out key-major, St[..., j, i] = k_j . q_i, because numpy
    # reduces far faster over axis -2 than over a short last axis
    St = (K @ Q.transpose(0, 1, 3, 2)) * c
    if mask is not None:
        St = np.where(np.asarray(mask, dtype=bool)[:, None, :, None], St, -np.inf)
    St -= St.max(axis=-2, keepdims=True)
    Pt = np.exp(St)
    Pt /= Pt.sum(axis=-2, keepdims=True)
    M = (Pt.transpose(0, 1, 3, 2) @ V).transpose(0, 2, 1, 3).reshape(n, s, H * dk)
    Y = M @ block.w_o.data + block.b_o.data
    keep = None
    if cfg.dropout > 0.0 and rng is not None:
        keep = (rng.random(Y.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        Y = Y * keep
    Z = X + Y
    Zc = Z - Z.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((Zc * Zc).mean(axis=-1, keepdims=True) + cfg.ln_eps)
    Zhat = Zc * inv
    out = Zhat * block.ln_gamma.data + block.ln_beta.data

    def backward(G):
        g_gamma = (G * Zhat).sum(axis=(0, 1))
        g_beta = G.sum(axis=(0, 1))
        gz = G * block.ln_gamma.data
        dZ = inv * (gz - gz.mean(axis=-1, keepdims=True)
                    - Zhat * (gz * Zhat).mean(axis=-1, keepdims=True))
        dY = dZ if keep is None else dZ * keep
        flat_dY = dY.reshape(n * s, d)
        g_wo = M.reshape(n * s, H * dk).T @ flat_dY
        g_bo = flat_dY.sum(axis=0)
        dA = split(dY @ block.w_o.data.T)
        dPt = V @ dA.transpose(0, 1, 3, 2)
        dV = Pt @ dA
        dSt = Pt * (dPt - (dPt * Pt).sum(axis=-2, keepdims=True)) * c
        dQ = dSt.transpose(0, 1, 3, 2) @ K
        dK = dSt @ Q

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(n * s, H * dk)

        dQf, dKf, dVf = merge(dQ), merge(dK), merge(dV)
        Xf = X.reshape(n * s, d)
        dX = dZ + (dQf @ block.w_q.data.T + dKf @ block.w_k.data.T
                   + dVf @ block.w_v.data.T).reshape(n, s, d)
        return (dX, Xf.T @ dQf, Xf.T @ dKf, Xf.T @ dVf, g_wo, g_bo, g_gamma, g_beta)

    parents = (x, block.w_q, block.w_k, block.w_v, block.w_o, block.b_o, block.ln_gamma, block.ln_beta)
    return ad._make(out, parents, backward, "set_attention")


def set_attention_reference(block: AttentionBlock, x_set, rng: np.random.Generator | None = None) -> Tensor:
    """:func:`set_attention` composed from autodiff primitives (slow, for checking)."""
    x = ad.as_tensor(x_set)
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    n, s, d = x.shape
    if s == 0:
        raise ValueError("set attention over an empty set")
    cfg = block.config
    H, dk = cfg.heads, cfg.d_k

    def heads(w):
        t = ad.reshape(ad.matmul(x, w), (n, s, H, dk))
        return ad.transpose(t, (0, 2, 1, 3))

    q, k, v = heads(block.w_q), heads(block.w_k), heads(block.w_v)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = ad.matmul(ad.row_softmax(scores), v)
    merged = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (n, s, H * dk))
    proj = ad.linear(merged, block.w_o, block.b_o)
    proj = ad.dropout(proj, cfg.dropout, rng)
    out = ad.layer_norm(ad.add(x, proj), block.ln_gamma, block.ln_beta, cfg.ln_eps)
    if squeeze:
        out = ad.reshape(out, (s, d))
    return out


class EncoderState:
    """Learned node embedding table plus per-layer attention blocks."""

    def __init__(self, config: EncoderConfig, node_count: int, seed: int | np.random.Generator = 0,
                 node_labels=None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.config = config
        self.node_labels = list(node_labels) if node_labels is not None else None
        self.node_table = Parameter(rng.normal(0.0, 1.0 / math.sqrt(config.d_hi), (node_count, config.d_hi)),
                                    "node_table")
        self.blocks = [
            (AttentionBlock(config, rng, f"layer{l}.v2e"), AttentionBlock(config, rng, f"layer{l}.e2v"))
            for l in range(config.layers)
        ]

    @property
    def node_count(self) -> int:
        return self.node_table.shape[0]

    def parameters(self) -> list[Parameter]:
        params = [self.node_table]
        for v2e, e2v in self.blocks:
            params += v2e.parameters() + e2v.parameters()
        return params

    def copy_values(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_values(self, values) -> None:
        for p, v in zip(self.parameters(), values):
            p.data[...] = v


def _masked_mean(out: Tensor, valid: np.ndarray) -> Tensor:
    w = valid / valid.sum(axis=1, keepdims=True)
    n, s, d = out.shape
    return ad.reshape(ad.matmul(ad.Tensor(w[:, None, :]), out), (n, d))


def forward(hg: Hypergraph, state: EncoderState, rng: np.random.Generator | None = None,
            plan=None) -> tuple[Tensor, Tensor]:
    """Run all layers; returns ``(node_embeddings, edge_embeddings)`` of the last layer.

    ``rng`` is only used for dropout during training.
    """
    if hg.node_count != state.node_count:
        raise ValueError(f"hypergraph has {hg.node_count} nodes, encoder table has {state.node_count}")
    if hg.edge_count == 0:
        raise ValueError("hypergraph has no hyperedges")
    plan = hg.plan if plan is None else plan
    d = state.config.d_hi
    x_v: Tensor = state.node_table
    x_e: Tensor | None = None
    for v2e, e2v in state.blocks:
        pooled = []
        for b in plan.edge_buckets:
            n, s = b.members.shape
            rows = ad.reshape(ad.take_rows(x_v, b.members.reshape(-1)), (n, s, d))
            pooled.append(_masked_mean(set_attention(v2e, rows, rng, b.valid), b.valid))
        x_e = ad.take_rows(ad.concat(pooled, axis=0), plan.edge_order)

        parts = []
        for b in plan.node_buckets:
            n, deg = b.members.shape
            own = ad.reshape(ad.take_rows(x_v, b.owners), (n, 1, d))
            inc = ad.reshape(ad.take_rows(x_e, b.members.reshape(-1)), (n, deg, d))
            valid = np.concatenate([np.ones((n, 1), dtype=bool), b.valid], axis=1)
            rows = ad.concat([own, inc], axis=1)
            parts.append(_masked_mean(set_attention(e2v, rows, rng, valid), valid))
        if plan.isolated_nodes.size:
            parts.append(ad.take_rows(x_v, plan.isolated_nodes))
        x_v = ad.take_rows(ad.concat(parts, axis=0), plan.node_order)
    return x_v, x_e


def encode_edges(hg: Hypergraph, state: EncoderState, batch_size: int | None = None) -> np.ndarray:
    """Inference-only hyperedge embeddings as a plain array.

    With ``batch_size`` the hyperedges are encoded in consecutive chunks, each
    chunk forming its own hypergraph.
    """
    with ad.no_grad():
        if batch_size is None or batch_size >= hg.edge_count:
            return forward(hg, state)[1].data.copy()
        out = np.empty((hg.edge_count, state.config.d_hi))
        for start in range(0, hg.edge_count, batch_size):
            ids = np.arange(start, min(start + batch_size, hg.edge_count))
            out[ids] = forward(hg.subgraph_edges(ids), state)[1].data
        return out


def patient_embedding(edge_embeddings, hg: Hypergraph, patient_id: str) -> np.ndarray:
    """The final-layer hyperedge embedding of ``patient_id``."""
    e = hg.edge_index(patient_id)
    data = edge_embeddings.data if isinstance(edge_embeddings, Tensor) else np.asarray(edge_embeddings)
    return data[e].copy()


def save_encoder(path, state: EncoderState, extra: dict | None = None) -> Path:
    meta = {"encoder_config": asdict(state.config), "node_count": state.node_count,
            "node_labels": state.node_labels}
    if extra:
        meta.update(extra)
    return ad.save_checkpoint(path, state.parameters(), meta)


def load_encoder(path) -> EncoderState:
    arrays, manifest = ad.load_checkpoint(path)
    config = EncoderConfig(**manifest["encoder_config"])
    state = EncoderState(config, manifest["node_count"], seed=0, node_labels=manifest.get("node_labels"))
    for p in state.parameters():
        if p.name not in arrays:
            raise ValueError(f"checkpoint {path} lacks parameter {p.name}")
        if arrays[p.name].shape != p.shape:
            raise ValueError(f"{p.name}: checkpoint shape {arrays[p.name].shape} vs {p.shape}")
        p.data[...] = arrays[p.name]
    return state
