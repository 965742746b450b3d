import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgpretrain.augment import (MASK_INSIDE, PRESERVE, REMOVE, EdgeAugmentor, MaskingPolicy, _make_view,
                                generate_views, gumbel_softmax_sample, node_mask_probabilities)
from hgpretrain.encoder import EncoderConfig, EncoderState
from hgpretrain.hypergraph import IncidenceStats, incidence_stats

from conftest import random_hypergraph

CFG = EncoderConfig(d_hi=8, heads=2, layers=1)


def stats_from_weights(w):
    w = np.asarray(w, dtype=float)
    return IncidenceStats(np.exp(w), w, float(w.max()), float(w.mean()), float(w.min()), np.ones(w.size, bool))


class TestMaskProbabilities:
    def test_hand_example_with_cap(self):
        p = node_mask_probabilities(stats_from_weights([0.0, 1.0, 2.0]), MaskingPolicy(0.3, 0.5))
        # (2-0)/(2-1)*0.3 = 0.6 capped to 0.5; w_avg node gets p_node; w_max node gets 0
        np.testing.assert_allclose(p, [0.5, 0.3, 0.0], atol=1e-15)

    def test_degenerate_spread_is_uniform(self):
        p = node_mask_probabilities(stats_from_weights([0.4, 0.4, 0.4]), MaskingPolicy(0.3, 0.2))
        np.testing.assert_allclose(p, 0.2)

    def test_prose_direction_reverses(self):
        p = node_mask_probabilities(stats_from_weights([0.0, 1.0, 2.0]),
                                    MaskingPolicy(0.3, 0.9, mask_direction="prose"))
        np.testing.assert_allclose(p, [0.0, 0.3, 0.6], atol=1e-15)

    def test_isolated_nodes_never_masked(self, rng):
        hg = random_hypergraph(rng, 6, 10, isolated=2)
        p = node_mask_probabilities(incidence_stats(hg), MaskingPolicy())
        assert np.all(p[-2:] == 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 5), min_size=2, max_size=20), st.floats(0, 1), st.floats(0, 1))
    def test_bounds_and_monotone(self, w, p_node, p_tau):
        w = np.array(w)
        p = node_mask_probabilities(stats_from_weights(w), MaskingPolicy(p_node, p_tau))
        assert np.all((p >= 0) & (p <= p_tau))
        order = np.argsort(w)
        assert np.all(np.diff(p[order]) <= 1e-12)


class TestGumbel:
    def test_simplex(self, rng):
        g, hard = gumbel_softmax_sample(rng.normal(size=(500, 3)), 0.7, rng)
        np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(g > 0)
        np.testing.assert_array_equal(hard, g.argmax(axis=1))

    def test_hard_frequencies_match_softmax(self):
        rng = np.random.default_rng(99)
        alpha = np.array([0.5, -0.3, 1.1])
        _, hard = gumbel_softmax_sample(np.tile(alpha, (100_000, 1)), 1.0, rng)
        freq = np.bincount(hard, minlength=3) / hard.size
        target = np.exp(alpha) / np.exp(alpha).sum()
        np.testing.assert_allclose(freq, target, atol=0.01)

    def test_low_temperature_concentrates(self, rng):
        g, _ = gumbel_softmax_sample(rng.normal(size=(200, 3)), 1e-3, rng)
        assert np.all(g.max(axis=1) > 0.99)

    def test_rejects_nonpositive_temperature(self, rng):
        with pytest.raises(ValueError):
            gumbel_softmax_sample(np.zeros(3), 0.0, rng)


class TestViews:
    def test_identity_augmentation(self, rng):
        hg = random_hypergraph(rng, 6, 10)
        state = EncoderState(CFG, 10)
        pair = generate_views(hg, state, MaskingPolicy(p_node=0.0), EdgeAugmentor(8), rng, forced_ops=PRESERVE)
        for view in (pair.view_a, pair.view_b):
            np.testing.assert_array_equal(view.to_binary_matrix(), hg.to_binary_matrix())

    def test_remove_only_touches_that_edge(self, rng):
        hg = random_hypergraph(rng, 5, 8, density=0.5)
        ops = np.array([PRESERVE, REMOVE, PRESERVE, PRESERVE, PRESERVE])
        view, mask, ids = _make_view(hg, np.zeros(8), ops, 0.3, rng)
        assert ids.tolist() == [0, 2, 3, 4]
        for k, e in enumerate(ids):
            np.testing.assert_array_equal(view.nodes_of_edge(k), hg.nodes_of_edge(e))

    @pytest.mark.parametrize("seed", range(5))
    def test_views_only_delete(self, seed):
        rng = np.random.default_rng(seed)
        hg = random_hypergraph(rng, 10, 15, density=0.4)
        pair = generate_views(hg, EncoderState(CFG, 15, seed=seed), MaskingPolicy(0.5, 0.8, 0.5),
                              EdgeAugmentor(8, seed=seed), rng)
        base = hg.to_binary_matrix()
        for view, ids, mask in ((pair.view_a, pair.edge_ids_a, pair.mask_a), (pair.view_b, pair.edge_ids_b, pair.mask_b)):
            m = view.to_binary_matrix()
            assert np.all(m <= base[ids])
            assert not m[:, mask].any()

    def test_seed_fixes_pair(self, rng):
        hg = random_hypergraph(rng, 8, 12, density=0.4)
        state, aug = EncoderState(CFG, 12, seed=1), EdgeAugmentor(8, seed=2)
        a = generate_views(hg, state, MaskingPolicy(), aug, np.random.default_rng(5))
        b = generate_views(hg, state, MaskingPolicy(), aug, np.random.default_rng(5))
        assert a.to_json() == b.to_json()

    def test_mask_inside_probability(self):
        rng = np.random.default_rng(0)
        hg = random_hypergraph(rng, 40, 30, density=0.5)
        ops = np.full(40, MASK_INSIDE)
        kept = sum(_make_view(hg, np.zeros(30), ops, 0.3, rng)[0].nnz for _ in range(200))
        assert kept / (200 * hg.nnz) == pytest.approx(0.7, abs=0.01)

    def test_node_mask_frequencies_match_p_v(self):
        rng = np.random.default_rng(11)
        hg = random_hypergraph(rng, 30, 16, density=0.3)
        policy = MaskingPolicy(p_node=0.3, p_tau=0.7)
        p_v = node_mask_probabilities(incidence_stats(hg), policy)
        assert np.ptp(p_v) > 0.1
        state, aug = EncoderState(CFG, 16), EdgeAugmentor(8)
        hits = np.zeros(16)
        trials = 10_000
        for _ in range(trials // 2):
            pair = generate_views(hg, state, policy, aug, rng, p_v=p_v, forced_ops=PRESERVE)
            hits += pair.mask_a
            hits += pair.mask_b
        np.testing.assert_allclose(hits / trials, p_v, atol=0.02)

    def test_degenerate_view_error(self, rng):
        from hgpretrain.augment import DegenerateViewError
        hg = random_hypergraph(rng, 3, 4)
        with pytest.raises(DegenerateViewError):
            generate_views(hg, EncoderState(CFG, 4), MaskingPolicy(), EdgeAugmentor(8), rng, forced_ops=REMOVE)
