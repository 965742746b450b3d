"""Inspect the view generator and the five contrastive terms on a toy cohort.

    python demos/augmentation_tour.py
"""

import numpy as np

from hgpretrain.augment import OP_NAMES, EdgeAugmentor, MaskingPolicy, generate_views, node_mask_probabilities
from hgpretrain.contrastive import pair_losses
from hgpretrain.encoder import EncoderConfig, EncoderState, forward
from hgpretrain.hypergraph import from_matrix, incidence_stats

rng = np.random.default_rng(0)
matrix = (rng.random((12, 8)) < 0.35).astype(int)
matrix[:, 0] = 1  # one feature every patient carries
hg = from_matrix(matrix, [f"patient{i}" for i in range(12)], [f"dx{j}" for j in range(8)])

stats = incidence_stats(hg)
policy = MaskingPolicy(p_node=0.3, p_tau=0.7)
p_v = node_mask_probabilities(stats, policy)
print("feature  D(v)    mask prob")
for name, d, p in zip(hg.node_labels, stats.duplication, p_v):
    print(f"{name:7s}  {d:6.3f}  {p:.3f}")

state = EncoderState(EncoderConfig(d_hi=16, heads=2, layers=1), hg.node_count, seed=0)
pair = generate_views(hg, state, policy, EdgeAugmentor(16, seed=0), rng, p_v=p_v)
print("\nhyperedge ops, view A:", [OP_NAMES[o] for o in pair.ops_a])
print("hyperedge ops, view B:", [OP_NAMES[o] for o in pair.ops_b])
print("masked features A:", [hg.node_labels[v] for v in np.flatnonzero(pair.mask_a)])
print("masked features B:", [hg.node_labels[v] for v in np.flatnonzero(pair.mask_b)])

report = pair_losses(pair, forward(pair.view_a, state), forward(pair.view_b, state), 0.5)
print("\nloss terms:", {k: round(v, 4) for k, v in report.as_dict().items()})
