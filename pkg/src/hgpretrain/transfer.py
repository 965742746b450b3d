"""Frozen-encoder transfer to a target cohort.

The target's diagnostic columns are matched by exact name to the encoder's
node vocabulary, every patient becomes a hyperedge over the matched nodes,
and the encoder's final hyperedge embedding is that patient's transfer
embedding.  Baseline features are median-imputed and min-max scaled with a
transform fitted on training rows only; the downstream representation is
``baseline ⊕ embedding`` (or ``baseline ⊕ raw diagnostics`` from scratch).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import Cohort
from .encoder import EncoderState, encode_edges
from .hypergraph import Hypergraph

MODES = ("from_scratch", "supervised", "unsupervised")


class VocabularyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class VocabularyAlignment:
    mapping: dict[str, int]
    dropped: list[str]
    coverage: float

    def to_dict(self) -> dict:
        return {"mapping": self.mapping, "dropped": self.dropped, "coverage": self.coverage,
                "matched": len(self.mapping)}


def align_vocabulary(pretrain_labels, target_names, min_coverage: float = 0.5) -> VocabularyAlignment:
    """Exact-name intersection of the target columns with the encoder's nodes."""
    node_of = {}
    for i, name in enumerate(pretrain_labels):
        if name in node_of:
            raise ValueError(f"duplicate pre-training feature name {name!r}")
        node_of[name] = i
    target_names = list(target_names)
    if len(set(target_names)) != len(target_names):
        raise ValueError("duplicate target feature names")
    mapping = {n: node_of[n] for n in target_names if n in node_of}
    dropped = [n for n in target_names if n not in node_of]
    coverage = len(mapping) / len(target_names) if target_names else 0.0
    if coverage < min_coverage:
        raise VocabularyMismatchError(
            f"vocabulary mismatch: coverage {coverage:.3f} below floor {min_coverage}")
    return VocabularyAlignment(mapping, dropped, coverage)


class BaselinePreprocessor:
    """Per-column median imputation followed by min-max scaling.

    Statistics come from ``fit`` rows only; ``transform`` replays them, so
    values outside the fitted range land outside [0, 1].  Constant columns
    map to 0.
    """

    def __init__(self):
        self.median = self.low = self.span = None

    def fit(self, X) -> "BaselinePreprocessor":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError("baseline matrix must be two-dimensional")
        observed = ~np.isnan(X)
        empty = np.flatnonzero(~observed.any(axis=0))
        if empty.size:
            raise ValueError(f"all-missing baseline column(s) in the fit split: {empty.tolist()}")
        self.median = np.nanmedian(X, axis=0)
        filled = np.where(observed, X, self.median)
        self.low = filled.min(axis=0)
        self.span = filled.max(axis=0) - self.low
        return self

    def transform(self, X) -> np.ndarray:
        if self.median is None:
            raise RuntimeError("preprocessor is not fitted")
        X = np.asarray(X, dtype=np.float64)
        filled = np.where(np.isnan(X), self.median, X)
        safe = np.where(self.span > 0, self.span, 1.0)
        return np.where(self.span > 0, (filled - self.low) / safe, 0.0)

    def fit_transform(self, X) -> np.ndarray:
        return self.fit(X).transform(X)

    def to_dict(self) -> dict:
        return {"median": self.median.tolist(), "low": self.low.tolist(), "span": self.span.tolist()}


def preprocess_baseline(train, *others) -> tuple[list[np.ndarray], BaselinePreprocessor]:
    """Fit on ``train`` and transform it together with ``others``."""
    pre = BaselinePreprocessor().fit(train)
    return [pre.transform(train)] + [pre.transform(o) for o in others], pre


def target_hypergraph(cohort: Cohort, alignment: VocabularyAlignment, node_count: int,
                      node_labels=None) -> tuple[Hypergraph, np.ndarray]:
    """Hyperedges over the encoder's node ids; returns it and the empty-row flags.

    Patients whose aligned diagnostic vector is all zero get no hyperedge.
    """
    cols = np.array([cohort.diagnostic_names.index(n) for n in alignment.mapping], dtype=np.int64)
    nodes = np.array(list(alignment.mapping.values()), dtype=np.int64)
    sub = cohort.diagnostic[:, cols] if cols.size else np.zeros((cohort.n, 0), dtype=np.int8)
    empty = ~sub.any(axis=1)
    keep = np.flatnonzero(~empty)
    rows, c = np.nonzero(sub[keep])
    hg = Hypergraph(node_count, rows, nodes[c], node_labels, [cohort.patient_ids[i] for i in keep],
                    edge_count=keep.size)
    return hg, empty


def embed_patients(state: EncoderState, cohort: Cohort, alignment: VocabularyAlignment,
                   context: str = "cohort", batch_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Transfer embeddings ``(n, d_hi)`` and the boolean empty-row flags.

    ``context="cohort"`` runs the encoder once over the whole target
    hypergraph (diagnoses only, no labels), matching how it saw hyperedges
    in pre-training.  ``context="patient"`` encodes each patient as a
    one-edge hypergraph, making every embedding independent of the rest of
    the cohort.  Empty rows embed as zero vectors.
    """
    if context not in ("cohort", "patient"):
        raise ValueError("context must be 'cohort' or 'patient'")
    hg, empty = target_hypergraph(cohort, alignment, state.node_count, state.node_labels)
    out = np.zeros((cohort.n, state.config.d_hi))
    rows = np.flatnonzero(~empty)
    if rows.size == 0:
        return out, empty
    if context == "cohort":
        out[rows] = encode_edges(hg, state, batch_size)
    else:
        for k, r in enumerate(rows):
            out[r] = encode_edges(hg.subgraph_edges(np.array([k])), state)[0]
    return out, empty


@dataclass
class Representation:
    """Raw per-patient inputs; ``fold`` produces leakage-free design matrices."""

    mode: str
    patient_ids: list[str]
    baseline: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    baseline_names: list[str]
    feature_names: list[str]
    empty_rows: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def columns(self) -> list[str]:
        return self.baseline_names + self.feature_names

    def fold(self, train_idx, test_idx) -> tuple[np.ndarray, np.ndarray]:
        (btr, bte), _ = preprocess_baseline(self.baseline[train_idx], self.baseline[test_idx])
        return (np.hstack([btr, self.features[train_idx]]), np.hstack([bte, self.features[test_idx]]))

    def subset(self, idx) -> "Representation":
        idx = np.asarray(idx)
        return Representation(self.mode, [self.patient_ids[i] for i in idx], self.baseline[idx],
                              self.features[idx], self.labels[idx], self.baseline_names, self.feature_names,
                              self.empty_rows)


def extract_and_concat(cohort: Cohort, mode: str, state: EncoderState | None = None,
                       alignment: VocabularyAlignment | None = None, context: str = "cohort",
                       min_coverage: float = 0.5) -> Representation:
    """Build the downstream representation for ``mode``.

    ``from_scratch`` uses the raw diagnostic columns; the pre-trained modes
    use the frozen encoder's embedding of the aligned diagnoses.
    """
    if cohort.baseline is None or cohort.labels is None:
        raise ValueError("target cohort needs baseline features and labels")
    base_names = [f"b_{j}" for j in range(cohort.baseline.shape[1])]
    if mode == "from_scratch":
        feats = cohort.diagnostic.astype(np.float64)
        names = [f"d_{n}" for n in cohort.diagnostic_names]
        empty = []
    elif mode in ("supervised", "unsupervised"):
        if state is None:
            raise ValueError(f"mode {mode} needs a pre-trained encoder checkpoint")
        if alignment is None:
            alignment = align_vocabulary(state.node_labels, cohort.diagnostic_names, min_coverage)
        feats, flags = embed_patients(state, cohort, alignment, context)
        names = [f"z_{j}" for j in range(feats.shape[1])]
        empty = [cohort.patient_ids[i] for i in np.flatnonzero(flags)]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Representation(mode, list(cohort.patient_ids), cohort.baseline, feats, cohort.labels,
                          base_names, names, empty)


def write_representation(path, rep: Representation) -> None:
    """``patient_id,b_*,<features>,label``; baseline cells are raw (empty = missing)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + rep.columns + ["label"])
        for i, pid in enumerate(rep.patient_ids):
            base = ["" if np.isnan(v) else repr(float(v)) for v in rep.baseline[i]]
            w.writerow([pid] + base + [repr(float(v)) for v in rep.features[i]] + [int(rep.labels[i])])


def read_representation(path, mode: str) -> Representation:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if header[0] != "patient_id" or header[-1] != "label":
        raise ValueError(f"{path}: expected patient_id first and label last")
    cols = header[1:-1]
    nb = sum(1 for c in cols if c.startswith("b_"))
    if cols[:nb] != [c for c in cols if c.startswith("b_")]:
        raise ValueError(f"{path}: baseline columns must come first")
    vals = np.array([[float("nan") if c == "" else float(c) for c in r[1:-1]] for r in rows]).reshape(len(rows), len(cols))
    return Representation(mode, [r[0] for r in rows], vals[:, :nb], vals[:, nb:],
                          np.array([int(r[-1]) for r in rows], dtype=np.int64), cols[:nb], cols[nb:])


def alignment_report(alignment: VocabularyAlignment, empty_rows: list[str]) -> str:
    return json.dumps({**alignment.to_dict(), "empty_patients": empty_rows}, indent=2, sort_keys=True)
