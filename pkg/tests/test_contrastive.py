import math

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from hgpretrain import autodiff as ad
from hgpretrain.augment import EdgeAugmentor, MaskingPolicy, generate_views
from hgpretrain.autodiff import Tensor
from hgpretrain.contrastive import (AlignmentError, ContrastiveConfig, align_views, contrastive_pair,
                                    fit_unsupervised, loss_edge, loss_hyper, loss_membership, loss_node,
                                    loss_sim, pair_losses)
from hgpretrain.encoder import EncoderConfig, EncoderState, forward, save_encoder
from hgpretrain.hypergraph import from_matrix

from conftest import random_hypergraph

CFG = EncoderConfig(d_hi=8, heads=2, layers=1)
ORTHO_LOSS = -math.log(math.e / (math.e + 1.0))  # cos(pos)=1, cos(neg)=0, tau=1


def brute_ell(x_i, x_j, cands, tau):
    cos = lambda a, b: a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return -math.log(math.exp(cos(x_i, x_j) / tau) / sum(math.exp(cos(x_i, q) / tau) for q in cands))


def brute_membership(n_a, n_b, e_a, e_b, members, tau):
    total = sum(brute_ell(n_a[v], e_b[e], e_b, tau) + brute_ell(n_b[v], e_a[e], e_a, tau) for v, e in members)
    return total / (2 * len(members))


class TestSim:
    def test_identical(self, rng):
        x = Tensor(rng.normal(size=(5, 8)))
        assert loss_sim(x, x).item() == 0.0

    def test_hand_value(self):
        a = np.zeros((2, 32))
        b = a.copy()
        a[0, 0] = 1.0
        assert loss_sim(Tensor(a), Tensor(b)).item() == 0.015625

    def test_homogeneous(self, rng):
        a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        base = loss_sim(Tensor(a), Tensor(b)).item()
        assert loss_sim(Tensor(3 * a), Tensor(3 * b)).item() == pytest.approx(9 * base, rel=1e-13)

    def test_disjoint(self):
        with pytest.raises(AlignmentError, match="disjoint"):
            loss_sim(Tensor(np.zeros((0, 4))), Tensor(np.zeros((0, 4))))


class TestPairLoss:
    def test_single_candidate(self, rng):
        x, y = rng.normal(size=4), rng.normal(size=4)
        assert contrastive_pair(x, y, y[None, :], 0.5) == 0.0

    def test_equal_similarity_two_candidates(self):
        x = np.array([1.0, 0.0, 0.0])
        cands = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        assert contrastive_pair(x, cands[0], cands, 0.5) == pytest.approx(math.log(2), abs=1e-15)

    def test_matches_brute_force(self, rng):
        for _ in range(20):
            c = rng.normal(size=(5, 6))
            x = rng.normal(size=6)
            assert contrastive_pair(x, c[2], c, 0.7) == pytest.approx(brute_ell(x, c[2], c, 0.7), abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(Exception):
            contrastive_pair(np.zeros(3), np.ones(3), np.ones((1, 3)), 0.5)


class TestSetLosses:
    def test_hyper_single_edge(self, rng):
        e = Tensor(rng.normal(size=(1, 8)))
        assert loss_hyper(e, Tensor(rng.normal(size=(1, 8))), 0.5).item() == 0.0

    def test_orthonormal_tables(self):
        e = Tensor(np.eye(2, 8))
        assert loss_hyper(e, e, 1.0).item() == pytest.approx(ORTHO_LOSS, abs=1e-12)
        assert loss_node(e, e, 1.0).item() == pytest.approx(ORTHO_LOSS, abs=1e-12)
        assert ORTHO_LOSS == pytest.approx(0.3133, abs=1e-4)

    def test_edge_is_symmetrised_hyper(self, rng):
        a, b = Tensor(rng.normal(size=(6, 8))), Tensor(rng.normal(size=(6, 8)))
        sym = 0.5 * (loss_hyper(a, b, 0.5).item() + loss_hyper(b, a, 0.5).item())
        assert loss_edge(a, b, 0.5).item() == pytest.approx(sym, abs=1e-14)

    def test_hyper_permutation_invariant(self, rng):
        a, b = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        perm = rng.permutation(5)
        assert loss_hyper(Tensor(a[perm]), Tensor(b[perm]), 0.5).item() == pytest.approx(
            loss_hyper(Tensor(a), Tensor(b), 0.5).item(), abs=1e-14)

    def test_membership_single(self, rng):
        n, e = Tensor(rng.normal(size=(1, 8))), Tensor(rng.normal(size=(1, 8)))
        assert loss_membership(n, n, e, e, [0], [0], 0.5).item() == 0.0

    def test_membership_matches_brute_force(self, rng):
        n_a, n_b, e_a, e_b = (rng.normal(size=(s, 8)) for s in (3, 3, 2, 2))
        members = [(0, 0), (1, 0), (1, 1), (2, 1)]
        got = loss_membership(Tensor(n_a), Tensor(n_b), Tensor(e_a), Tensor(e_b),
                              [v for v, _ in members], [e for _, e in members], 0.5).item()
        assert got == pytest.approx(brute_membership(n_a, n_b, e_a, e_b, members, 0.5), abs=1e-12)

    def test_membership_duplication(self, rng):
        n_a, n_b, e_a, e_b = (rng.normal(size=(s, 8)) for s in (3, 3, 2, 2))
        members = [(0, 0), (1, 0), (1, 1), (2, 1)]
        vs, es = [v for v, _ in members], [e for _, e in members]
        base = loss_membership(Tensor(n_a), Tensor(n_b), Tensor(e_a), Tensor(e_b), vs, es, 0.5).item()
        # listing every membership twice: the 1/2K mean is unchanged
        twice = loss_membership(Tensor(n_a), Tensor(n_b), Tensor(e_a), Tensor(e_b), vs * 2, es * 2, 0.5).item()
        assert twice == pytest.approx(base, abs=1e-14)
        # a disjoint copy of the whole hypergraph doubles every candidate pool: +ln 2 per term
        dup = [np.vstack([t, t]) for t in (n_a, n_b, e_a, e_b)]
        copy = loss_membership(*(Tensor(t) for t in dup), vs + [v + 3 for v in vs], es + [e + 2 for e in es],
                               0.5).item()
        assert copy == pytest.approx(brute_membership(*dup, list(zip(vs + [v + 3 for v in vs],
                                                                     es + [e + 2 for e in es])), 0.5), abs=1e-12)
        assert copy == pytest.approx(base + math.log(2), abs=1e-12)

    def test_no_memberships(self, rng):
        t = Tensor(rng.normal(size=(2, 4)))
        with pytest.raises(AlignmentError, match="no surviving memberships"):
            loss_membership(t, t, t, t, [], [], 0.5)


def random_pair(seed, policy=MaskingPolicy(0.3, 0.7, 0.3), n_edges=6, n_nodes=10, layers=1):
    rng = np.random.default_rng(seed)
    hg = random_hypergraph(rng, n_edges, n_nodes, density=0.4)
    state = EncoderState(EncoderConfig(d_hi=8, heads=2, layers=layers), n_nodes, seed=seed)
    pair = generate_views(hg, state, policy, EdgeAugmentor(8, seed=seed), rng)
    return hg, state, pair


class TestLossReport:
    def test_total_and_sign_on_random_instances(self):
        checked = 0
        for seed in range(80):
            _, state, pair = random_pair(seed)
            try:
                rep = pair_losses(pair, forward(pair.view_a, state), forward(pair.view_b, state), 0.5)
            except AlignmentError:
                continue
            parts = [rep.sim, rep.hyper, rep.node, rep.edge, rep.membership]
            assert abs(rep.total - sum(parts)) <= 1e-12
            assert min(parts) >= 0.0
            checked += 1
            if checked == 50:
                break
        assert checked == 50

    @pytest.mark.parametrize("seed", range(3))
    def test_rotation_invariance(self, seed):
        _, state, pair = random_pair(seed + 100, MaskingPolicy(0.1, 0.3, 0.1), n_edges=10)
        out_a, out_b = forward(pair.view_a, state), forward(pair.view_b, state)
        R = special_ortho_group.rvs(8, random_state=seed)
        rot = lambda out: tuple(Tensor(t.data @ R) for t in out)
        base = pair_losses(pair, out_a, out_b, 0.5).as_dict()
        turned = pair_losses(pair, rot(out_a), rot(out_b), 0.5).as_dict()
        for k in base:
            assert turned[k] == pytest.approx(base[k], abs=1e-9)

    def test_gradient_check_frozen_draws(self):
        m = np.array([[1, 1, 0, 1, 0, 0], [0, 1, 1, 0, 1, 0], [1, 0, 0, 1, 1, 1]])
        hg = from_matrix(m, ["p0", "p1", "p2"], list("abcdef"))
        state = EncoderState(CFG, 6, seed=3)
        pair = generate_views(hg, state, MaskingPolicy(0.2, 0.5, 0.2), EdgeAugmentor(8, seed=1),
                              np.random.default_rng(8))
        al = align_views(pair)

        def total():
            return pair_losses(pair, forward(pair.view_a, state), forward(pair.view_b, state), 0.5, al).total_tensor

        assert ad.gradient_check(total, state.parameters()) < 1e-6


class TestFitUnsupervised:
    def test_identity_augmentation_has_zero_sim(self, rng):
        hg = random_hypergraph(rng, 20, 12, density=0.3)
        cfg = ContrastiveConfig(encoder=CFG, policy=MaskingPolicy(p_node=0.0), forced_op="preserve", epochs=3,
                                lr=1e-2, batch_size=None)
        _, run = fit_unsupervised(hg, cfg)
        assert run.extra_traces["sim"] == [0.0, 0.0, 0.0]
        assert all(np.isfinite(run.extra_traces["step_total"]))

    def test_seed_reproduces_checkpoint(self, tmp_path, rng):
        hg = random_hypergraph(rng, 30, 15, density=0.3)
        cfg = ContrastiveConfig(encoder=CFG, epochs=2, lr=1e-2, batch_size=10, seed=7)
        for name in ("a", "b"):
            state, run = fit_unsupervised(hg, cfg)
            save_encoder(tmp_path / f"{name}.json", state)
            assert all(np.isfinite(run.loss_trace))
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_learned_augmentor_runs(self, rng):
        hg = random_hypergraph(rng, 12, 10, density=0.4)
        cfg = ContrastiveConfig(encoder=CFG, epochs=2, lr=1e-2, batch_size=None, learn_augmentor=True)
        _, run = fit_unsupervised(hg, cfg)
        assert len(run.loss_trace) == 2 and all(np.isfinite(run.loss_trace))
