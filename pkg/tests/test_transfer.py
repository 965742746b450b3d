import numpy as np
import pytest

from hgpretrain.classifiers import lr_fit
from hgpretrain.cohort import Cohort
from hgpretrain.encoder import EncoderConfig, EncoderState
from hgpretrain.transfer import (BaselinePreprocessor, VocabularyMismatchError, align_vocabulary,
                                 embed_patients, extract_and_concat, preprocess_baseline, read_representation,
                                 write_representation)


def make_cohort(rng, n=30, d_diag=10, d_b=53, names=None):
    diag = (rng.random((n, d_diag)) < 0.3).astype(np.int8)
    diag[:, 0] = 1
    base = rng.normal(size=(n, d_b))
    base[rng.random(base.shape) < 0.1] = np.nan
    base[0] = rng.normal(size=d_b)  # keep every column observed
    names = names or [f"dx_{j}" for j in range(d_diag)]
    return Cohort([f"T{i}" for i in range(n)], diag, names, base, None, np.r_[np.ones(n // 3), np.zeros(n - n // 3)])


class TestAlignment:
    def test_identity(self):
        al = align_vocabulary(["a", "b"], ["a", "b"])
        assert al.coverage == 1.0 and al.dropped == []

    def test_partial(self):
        al = align_vocabulary(["a", "b", "c"], ["a", "b", "x"])
        assert al.mapping == {"a": 0, "b": 1}
        assert al.dropped == ["x"]
        assert al.coverage == pytest.approx(2 / 3)

    def test_floor(self):
        with pytest.raises(VocabularyMismatchError, match="vocabulary mismatch"):
            align_vocabulary(["a"], ["a", "x", "y"], min_coverage=0.5)


class TestBaseline:
    def test_hand_column(self):
        out, pre = preprocess_baseline(np.array([[1.0], [np.nan], [3.0]]))
        np.testing.assert_allclose(out[0].ravel(), [0.0, 0.5, 1.0])
        assert pre.median[0] == 2.0

    def test_constant_column(self):
        out, _ = preprocess_baseline(np.array([[4.0, 1.0], [4.0, 2.0], [np.nan, 3.0]]))
        np.testing.assert_array_equal(out[0][:, 0], 0.0)

    def test_fit_data_in_unit_interval(self, rng):
        X = rng.normal(size=(50, 7))
        X[rng.random(X.shape) < 0.2] = np.nan
        X[0] = 0.0
        out = BaselinePreprocessor().fit_transform(X)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_all_missing_column(self):
        with pytest.raises(ValueError, match="all-missing"):
            preprocess_baseline(np.array([[1.0, np.nan], [2.0, np.nan]]))

    def test_sentinel_poisoning_does_not_leak(self, rng):
        cohort = make_cohort(rng, n=40, d_b=5)
        rep = extract_and_concat(cohort, "from_scratch")
        tr, te = np.arange(30), np.arange(30, 40)
        clean_tr, _ = rep.fold(tr, te)
        poisoned = rep.subset(np.arange(40))
        poisoned.baseline = poisoned.baseline.copy()
        poisoned.baseline[te] = 1e12
        fitted = BaselinePreprocessor().fit(poisoned.baseline[tr]).to_dict()
        assert fitted == BaselinePreprocessor().fit(rep.baseline[tr]).to_dict()
        pois_tr, pois_te = poisoned.fold(tr, te)
        np.testing.assert_array_equal(pois_tr, clean_tr)
        assert pois_te[:, :5].max() > 1e6  # the sentinels only show up on the test side


class TestExtract:
    def test_pretrained_width(self, rng):
        cohort = make_cohort(rng)
        state = EncoderState(EncoderConfig(layers=1), 10, seed=0, node_labels=cohort.diagnostic_names)
        rep = extract_and_concat(cohort, "supervised", state)
        Xtr, _ = rep.fold(np.arange(20), np.arange(20, 30))
        assert Xtr.shape[1] == 85
        assert rep.columns[:2] == ["b_0", "b_1"] and rep.columns[53] == "z_0"

    def test_from_scratch_width(self, rng):
        cohort = make_cohort(rng)
        rep = extract_and_concat(cohort, "from_scratch")
        assert rep.fold(np.arange(20), np.arange(20, 30))[0].shape[1] == 53 + 10

    def test_identical_diagnoses_patient_context(self, rng):
        cohort = make_cohort(rng)
        cohort.diagnostic[5] = cohort.diagnostic[2]
        state = EncoderState(EncoderConfig(d_hi=8, heads=2, layers=1), 10, seed=1,
                             node_labels=cohort.diagnostic_names)
        al = align_vocabulary(state.node_labels, cohort.diagnostic_names)
        z, _ = embed_patients(state, cohort, al, context="patient")
        np.testing.assert_array_equal(z[5], z[2])

    def test_empty_aligned_row_is_zero_and_flagged(self, rng):
        names = [f"dx_{j}" for j in range(10)]
        cohort = make_cohort(rng, names=names[:8] + ["tx_0", "tx_1"])
        cohort.diagnostic[3] = 0
        cohort.diagnostic[3, 8] = 1  # only an unmatched feature
        state = EncoderState(EncoderConfig(d_hi=8, heads=2, layers=1), 10, seed=1, node_labels=names)
        rep = extract_and_concat(cohort, "unsupervised", state)
        np.testing.assert_array_equal(rep.features[3], 0.0)
        assert rep.empty_rows == ["T3"]

    def test_encoder_frozen_during_downstream_training(self, rng):
        cohort = make_cohort(rng)
        state = EncoderState(EncoderConfig(d_hi=8, heads=2, layers=1), 10, seed=2,
                             node_labels=cohort.diagnostic_names)
        first = extract_and_concat(cohort, "supervised", state)
        Xtr, _ = first.fold(np.arange(30), np.arange(30))
        lr_fit(Xtr, cohort.labels)
        second = extract_and_concat(cohort, "supervised", state)
        assert first.features.tobytes() == second.features.tobytes()

    def test_missing_checkpoint(self, rng):
        with pytest.raises(ValueError, match="checkpoint"):
            extract_and_concat(make_cohort(rng), "supervised", None)

    def test_csv_roundtrip(self, tmp_path, rng):
        rep = extract_and_concat(make_cohort(rng, d_b=4), "from_scratch")
        write_representation(tmp_path / "e.csv", rep)
        header = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
        assert header[0] == "patient_id" and header[1] == "b_0" and header[-1] == "label"
        back = read_representation(tmp_path / "e.csv", "from_scratch")
        np.testing.assert_array_equal(np.isnan(back.baseline), np.isnan(rep.baseline))
        np.testing.assert_array_equal(np.nan_to_num(back.baseline), np.nan_to_num(rep.baseline))
        np.testing.assert_array_equal(back.features, rep.features)
        np.testing.assert_array_equal(back.labels, rep.labels)
