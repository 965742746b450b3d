import math

import numpy as np
import pytest

from hgpretrain import autodiff as ad
from hgpretrain.encoder import EncoderConfig, save_encoder
from hgpretrain.hypergraph import from_matrix
from hgpretrain.metrics import auroc
from hgpretrain.supervised import (DegenerateTaskError, SupervisedConfig, cross_entropy, fit_supervised,
                                   one_hot, predict_proba)

TINY = EncoderConfig(d_hi=8, heads=2, layers=1)


def toy_cohort(seed, n=60, d=12):
    """Label = presence of feature 0, so the task is separable by construction."""
    rng = np.random.default_rng(seed)
    m = (rng.random((n, d)) < 0.25).astype(np.int8)
    m[:, 0] = rng.integers(0, 2, n)
    m[:n // 2, 0], m[n // 2:, 0] = 1, 0
    m[~m.any(axis=1), 1] = 1
    hg = from_matrix(m, [f"p{i}" for i in range(n)], [f"f{j}" for j in range(d)])
    return hg, m[:, 0].astype(int)


class TestCrossEntropy:
    def test_half_half(self):
        assert cross_entropy(np.zeros((1, 2)), one_hot([0])).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_limit(self):
        assert cross_entropy(np.array([[40.0, -40.0]]), one_hot([0])).item() < 1e-30

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError, match="one-hot"):
            cross_entropy(np.zeros((1, 2)), np.array([[0.5, 0.5]]))

    def test_gradient_is_softmax_minus_target(self, rng):
        logits = ad.Parameter(rng.normal(size=(5, 2)), "z")
        y = one_hot([0, 1, 1, 0, 1])
        cross_entropy(logits, y).backward()
        p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(logits.grad, (p - y) / 5, atol=1e-15)
        assert ad.gradient_check(lambda: cross_entropy(logits, y), [logits]) < 1e-6

    def test_non_negative(self, rng):
        for _ in range(20):
            assert cross_entropy(rng.normal(size=(4, 2)) * 5, one_hot(rng.integers(0, 2, 4))).item() >= 0.0


class TestFitSupervised:
    def test_separable_toy_reaches_high_auroc(self):
        hg, y = toy_cohort(0)
        cfg = SupervisedConfig(encoder=TINY, epochs=200, lr=1e-2, val_fraction=0.0, seed=0)
        state, head, run = fit_supervised(hg, y, cfg)
        assert auroc(predict_proba(hg, state, head), y) >= 0.95
        assert all(np.isfinite(run.loss_trace))
        assert len(run.loss_trace) == run.epochs

    def test_degenerate_task(self):
        hg, _ = toy_cohort(0, n=10)
        with pytest.raises(DegenerateTaskError, match="degenerate task"):
            fit_supervised(hg, np.zeros(10, int), SupervisedConfig(encoder=TINY, epochs=1))

    def test_same_seed_same_checkpoint(self, tmp_path):
        hg, y = toy_cohort(1)
        cfg = SupervisedConfig(encoder=TINY, epochs=3, lr=1e-2, batch_size=16, seed=4)
        for name in ("a", "b"):
            state, _, _ = fit_supervised(hg, y, cfg)
            save_encoder(tmp_path / f"{name}.json", state)
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    def test_zero_learning_rate_changes_nothing(self):
        hg, y = toy_cohort(2)
        cfg = SupervisedConfig(encoder=TINY, epochs=5, lr=0.0, optimizer="sgd", val_fraction=0.0, seed=0)
        state, _, run = fit_supervised(hg, y, cfg)
        fresh, _, _ = fit_supervised(hg, y, SupervisedConfig(encoder=TINY, epochs=0, val_fraction=0.0, seed=0))
        for a, b in zip(state.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        assert len(set(run.loss_trace)) == 1

    @pytest.mark.parametrize("seed", range(3))
    def test_small_rate_gradient_descent_is_monotone(self, seed):
        hg, y = toy_cohort(seed)
        cfg = SupervisedConfig(encoder=TINY, epochs=20, lr=1e-3, optimizer="sgd", val_fraction=0.0, seed=seed)
        _, _, run = fit_supervised(hg, y, cfg)
        assert np.all(np.diff(run.loss_trace) <= 1e-15)

    def test_early_stopping_restores_best(self):
        hg, y = toy_cohort(3, n=80)
        cfg = SupervisedConfig(encoder=TINY, epochs=30, lr=1e-2, val_fraction=0.2, patience=3, seed=0)
        _, _, run = fit_supervised(hg, y, cfg)
        assert run.best_epoch is not None
        assert run.val_auroc[run.best_epoch - 1] == max(run.val_auroc)
