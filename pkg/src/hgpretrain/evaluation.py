"""Nested cross-validation, training-size ablation and the method comparison grid."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifiers import DEFAULTS, FAMILIES, fit_family
from .metrics import all_metrics, auroc
from .rng import child_seed
from .splits import holdout_split, stratified_kfold, stratified_subsample
from .transfer import Representation

METRICS = ("auroc", "accuracy", "f1", "pr_auc")
FAMILY_LABELS = {"lr": "LR", "rf": "RF", "gb": "GB"}
MODE_LABELS = {"from_scratch": "From Scratch", "supervised": "Supervised", "unsupervised": "Unsupervised"}

DEFAULT_GRIDS = {
    "lr": [{"l2": 0.1}, {"l2": 1.0}, {"l2": 10.0}],
    "rf": [{"max_depth": 4}, {"max_depth": 8}],
    "gb": [{"learning_rate": 0.05}, {"learning_rate": 0.1}],
}


class FoldDegeneracyError(ValueError):
    pass


def expand_grid(spec: dict[str, list]) -> list[dict]:
    """``{"a": [1, 2], "b": [3]}`` -> ``[{"a": 1, "b": 3}, {"a": 2, "b": 3}]``."""
    keys = sorted(spec)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(spec[k] for k in keys))]


def aggregate(per_fold: list[dict[str, float]]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and sample standard deviation (ddof=1) per metric."""
    mean, sd = {}, {}
    for m in METRICS:
        v = np.array([f[m] for f in per_fold])
        mean[m] = float(v.mean())
        sd[m] = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return mean, sd


@dataclass
class EvalReport:
    mode: str
    family: str
    seed: int
    per_fold: list[dict[str, float]]
    selected: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    mean: dict[str, float] = field(default_factory=dict)
    sd: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            self.mean, self.sd = aggregate(self.per_fold)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _scores(family, params, seed, Xtr, ytr, Xte):
    model = fit_family(family, Xtr, ytr, params, seed)
    return model.predict_proba(Xte)


def nested_cv(rep: Representation, family: str, grid: list[dict] | None = None, k_outer: int = 5,
              k_inner: int = 3, seed: int = 0, return_predictions: bool = False):
    """Outer folds estimate performance; inner folds pick hyperparameters by AUROC.

    Baseline preprocessing is refitted on every training split, so no
    test-fold value ever reaches a fitted transform.  A grid of one entry
    skips the inner loop.  With ``return_predictions`` the out-of-fold
    test probabilities come back too, as ``(report, probabilities)``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown classifier family {family!r}")
    grid = [{}] if grid is None else list(grid)
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    y = rep.labels
    outer = stratified_kfold(y, k_outer, child_seed(seed, "eval.outer"))
    per_fold, selected = [], []
    oof = np.full(y.size, np.nan)
    for f, (tr, te) in enumerate(outer):
        best = grid[0]
        if len(grid) > 1:
            try:
                inner = stratified_kfold(y[tr], k_inner, child_seed(seed, f"eval.inner.{f}"))
            except ValueError as exc:
                raise FoldDegeneracyError(f"outer fold {f}: {exc}") from None
            means = []
            for params in grid:
                vals = []
                for g, (itr, ite) in enumerate(inner):
                    a, b = tr[itr], tr[ite]
                    if np.unique(y[a]).size < 2 or np.unique(y[b]).size < 2:
                        raise FoldDegeneracyError(f"outer fold {f}, inner fold {g}: single-class split")
                    Xa, Xb = rep.fold(a, b)
                    vals.append(auroc(_scores(family, params, child_seed(seed, f"clf.{f}.{g}"), Xa, y[a], Xb),
                                      y[b]))
                means.append(float(np.mean(vals)))
            best = grid[int(np.argmax(means))]
        Xtr, Xte = rep.fold(tr, te)
        probs = _scores(family, best, child_seed(seed, f"clf.{f}"), Xtr, y[tr], Xte)
        oof[te] = probs
        per_fold.append(all_metrics(probs, y[te]))
        selected.append({**DEFAULTS[family], **best})
    report = EvalReport(rep.mode, family, seed, per_fold, selected,
                        {"k_outer": k_outer, "k_inner": k_inner, "grid": grid})
    return (report, oof) if return_predictions else report


TRAIN_FRACTIONS = (0.2, 0.4, 0.6, 0.8)


def ablate_size(rep: Representation, family: str, fractions=TRAIN_FRACTIONS, test_fraction: float = 0.2,
                seed: int = 0, params: dict | None = None) -> dict[float, dict[str, float]]:
    """Test metrics after training on ``fraction * n`` patients.

    One stratified ``test_fraction`` holdout is drawn per seed and kept
    fixed; each training set is a stratified subsample of the remaining
    patients, so 0.8 with a 0.2 test uses all of them.
    """
    y = rep.labels
    n = y.size
    pool, test = holdout_split(y, test_fraction, child_seed(seed, "ablate.test"))
    out = {}
    for frac in fractions:
        size = int(round(frac * n))
        if size > pool.size:
            raise ValueError(f"training fraction {frac} needs {size} patients, only {pool.size} outside the test set")
        tr = stratified_subsample(y, pool, size, child_seed(seed, f"ablate.train.{frac}"))
        Xtr, Xte = rep.fold(tr, test)
        probs = _scores(family, params or {}, child_seed(seed, f"ablate.clf.{frac}"), Xtr, y[tr], Xte)
        out[float(frac)] = all_metrics(probs, y[test])
    return out


def compare(reps: dict[str, Representation], families=FAMILIES, grids: dict | None = None, k_outer: int = 5,
            k_inner: int = 3, seed: int = 0) -> list[EvalReport]:
    """Every (embedding mode, classifier) cell of the comparison grid, mode-major."""
    grids = grids or {}
    return [nested_cv(reps[mode], fam, grids.get(fam), k_outer, k_inner, seed)
            for mode in reps for fam in families]


def render_table(reports: list[EvalReport], digits: int = 3) -> str:
    """Aligned text table: method, model, then mean±sd for each metric."""
    head = ["Method", "Model", "AUROC", "Accuracy", "F1", "PR-AUC"]
    rows = []
    for r in reports:
        cells = [f"{r.mean[m]:.{digits}f}±{r.sd[m]:.{digits}f}" for m in METRICS]
        rows.append([MODE_LABELS.get(r.mode, r.mode), FAMILY_LABELS.get(r.family, r.family)] + cells)
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"
