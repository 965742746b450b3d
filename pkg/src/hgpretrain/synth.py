"""Seeded generator of paired pre-training / target cohorts.

Each patient has independent standard-normal latent factors.  Every
diagnostic feature loads on (at most) one factor and fires with probability
``sigmoid(loading * z + bias)``; the bias is calibrated so that the feature's
marginal prevalence equals ``feature_prevalence``.  The first
``shared_latent`` factors are common to both cohorts: on the shared
vocabulary they keep the same feature assignment and loading, so what a
model learns about them from one cohort carries over to the other.

Labels come from a noisy linear score over a few factors, thresholded at the
top ``round(prevalence * n)`` patients so prevalence is met exactly.  The
pre-training label uses factors ``0..pretrain.label_factors-1`` and the
target label a rule over ``0..target.label_factors-1`` with the same signs
but independently drawn magnitudes;
with ``shared_latent >= target.label_factors`` the target's label factors are
a shared subset of the pre-training ones.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import brentq
from scipy.special import expit, logit

from .cohort import Cohort
from .rng import substream


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int
    d_diag: int = 800
    d_baseline: int = 53
    n_latent: int = 8
    loading: float = 2.0
    loading_density: float = 1.0
    label_factors: int = 2
    label_noise: float = 0.5
    prevalence: float = 0.21
    feature_prevalence: float = 0.05
    overlap: float = 0.977
    missingness: float = 0.0
    baseline_signal: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap must lie in (0, 1]")
        if self.d_diag < self.n_latent:
            raise ValueError("d_diag must be at least n_latent")
        if not 1 <= self.label_factors <= self.n_latent:
            raise ValueError("label_factors must lie in [1, n_latent]")
        if not 0.0 < self.feature_prevalence < 1.0:
            raise ValueError("feature_prevalence must lie in (0, 1)")
        if not 0.0 <= self.loading_density <= 1.0:
            raise ValueError("loading_density must lie in [0, 1]")
        if not 0.0 <= self.missingness < 1.0:
            raise ValueError("missingness must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCohort:
    cohort: Cohort
    latent: np.ndarray
    label_coefficients: np.ndarray


@dataclass
class GenerationManifest:
    pretrain_spec: dict
    target_spec: dict
    shared_latent: int
    seed: int
    realized_prevalence: dict
    overlap: list[str]
    coverage: float
    feature_prevalence: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def calibrate_bias(loading: float, prevalence: float, nodes: int = 64) -> float:
    """Solve ``E_z[sigmoid(loading * z + b)] = prevalence`` for ``z ~ N(0, 1)``."""
    if loading == 0.0:
        return float(logit(prevalence))
    x, w = hermegauss(nodes)
    w = w / w.sum()

    def gap(b):
        return float(np.dot(w, expit(loading * x + b)) - prevalence)

    return float(brentq(gap, -60.0, 60.0, xtol=1e-12))


def top_k_labels(score: np.ndarray, prevalence: float) -> np.ndarray:
    n = score.size
    k = int(round(prevalence * n))
    if k == 0 or k == n:
        raise InfeasibleSpecError(f"prevalence {prevalence} gives {k} positives out of {n}")
    order = np.argsort(-score, kind="stable")
    y = np.zeros(n, dtype=np.int64)
    y[order[:k]] = 1
    return y


def inject_missingness(matrix, rate: float, seed) -> np.ndarray:
    """Blank each cell independently with probability ``rate`` (NaN).

    A column that would lose every value has its mask redrawn.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    out = np.array(matrix, dtype=np.float64)
    if rate == 0.0 or out.size == 0:
        return out
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = rng.random(out.shape) < rate
    for j in range(out.shape[1]):
        while mask[:, j].all():
            mask[:, j] = rng.random(out.shape[0]) < rate
    out[mask] = np.nan
    return out


def _features(z, assign, loadings, prevalence, rng):
    """Bernoulli draws; ``assign[f]`` is the factor of feature f (-1 for none)."""
    n = z.shape[0]
    logits = np.empty((n, assign.size))
    for f_load in np.unique(loadings):
        cols = np.flatnonzero(loadings == f_load)
        b = calibrate_bias(float(f_load), prevalence)
        zs = np.where(assign[cols] >= 0, z[:, np.maximum(assign[cols], 0)], 0.0)
        logits[:, cols] = f_load * zs + b
    return (rng.random(logits.shape) < expit(logits)).astype(np.int8)


def _balanced(d: int, density: float, factors: np.ndarray, rng) -> np.ndarray:
    """Assign ``round(density * d)`` random features round-robin to ``factors``; the rest get -1."""
    out = np.full(d, -1, dtype=np.int64)
    m = int(round(density * d))
    out[rng.permutation(d)[:m]] = factors[np.arange(m) % factors.size]
    return out


def _label_rule(spec: CohortSpec, z, signs, rng):
    beta = np.zeros(spec.n_latent)
    beta[:spec.label_factors] = rng.uniform(0.5, 1.5, spec.label_factors) * signs[:spec.label_factors]
    beta /= np.linalg.norm(beta)
    score = z @ beta + spec.label_noise * rng.standard_normal(z.shape[0])
    return top_k_labels(score, spec.prevalence), beta


def _baseline(spec: CohortSpec, z, y, rng):
    if spec.d_baseline == 0:
        return None
    x = rng.standard_normal((z.shape[0], spec.d_baseline))
    if spec.baseline_signal:
        x[:, 0] += spec.baseline_signal * (y - y.mean())
    # a few count-like columns, as clinical baselines mix scales
    n_int = spec.d_baseline // 4
    x[:, :n_int] = np.round(np.abs(x[:, :n_int]) * 10.0)
    return inject_missingness(x, spec.missingness, rng)


def generate_pair(pretrain_spec: CohortSpec, target_spec: CohortSpec, shared_latent: int,
                  seed: int = 0) -> tuple[SynthCohort, SynthCohort, GenerationManifest]:
    """Draw a pre-training and a target cohort sharing ``shared_latent`` factors."""
    if not 0 <= shared_latent <= min(pretrain_spec.n_latent, target_spec.n_latent):
        raise ValueError("shared_latent must not exceed either cohort's n_latent")
    pa, pb = pretrain_spec, target_spec
    vocab_rng = substream(seed, "synth.vocabulary")
    n_shared = int(round(pb.overlap * pb.d_diag))
    if n_shared > pa.d_diag:
        raise InfeasibleSpecError("target overlap exceeds the pre-training vocabulary size")
    names_a = [f"dx_{i:04d}" for i in range(pa.d_diag)]
    shared_cols_a = np.sort(vocab_rng.choice(pa.d_diag, n_shared, replace=False))
    names_b = [names_a[i] for i in shared_cols_a] + [f"tx_{i:04d}" for i in range(pb.d_diag - n_shared)]
    order_b = vocab_rng.permutation(pb.d_diag)
    names_b = [names_b[i] for i in order_b]

    # factor assignments are balanced (round-robin over a random order) so every
    # factor drives about the same number of features; shared factors keep
    # their features on the shared vocabulary
    assign_a = _balanced(pa.d_diag, pa.loading_density, np.arange(pa.n_latent), vocab_rng)
    idx_a = {nm: i for i, nm in enumerate(names_a)}
    inherited = np.array([assign_a[idx_a[nm]] if nm in idx_a and 0 <= assign_a[idx_a[nm]] < shared_latent
                          else -1 for nm in names_b])
    free = np.flatnonzero(inherited < 0)
    own = np.arange(shared_latent, pb.n_latent) if pb.n_latent > shared_latent else np.arange(pb.n_latent)
    assign_b = inherited.copy()
    assign_b[free] = _balanced(free.size, pb.loading_density, own, vocab_rng)
    load_a = np.where(assign_a >= 0, pa.loading, 0.0)
    load_b = np.where(assign_b >= 0, pb.loading, 0.0)

    # both rules push each factor the same way; only the magnitudes differ
    signs = substream(seed, "synth.label_signs").choice([-1.0, 1.0], max(pa.n_latent, pb.n_latent))
    cohorts = []
    for tag, spec, names, assign, loads in (("pretrain", pa, names_a, assign_a, load_a),
                                             ("target", pb, names_b, assign_b, load_b)):
        rng = substream(seed, f"synth.{tag}")
        z = rng.standard_normal((spec.n_patients, spec.n_latent))
        diag = _features(z, assign, loads, spec.feature_prevalence, rng)
        y, beta = _label_rule(spec, z, signs, substream(seed, f"synth.{tag}.label"))
        base = _baseline(spec, z, y, substream(seed, f"synth.{tag}.baseline"))
        prefix = "P" if tag == "pretrain" else "T"
        ids = [f"{prefix}{i:06d}" for i in range(spec.n_patients)]
        cohort = Cohort(ids, diag, list(names), base, None if base is None else [f"b_{j}" for j in range(base.shape[1])],
                        y)
        cohorts.append(SynthCohort(cohort, z, beta))
    a, b = cohorts
    overlap = sorted(set(names_a) & set(names_b))
    manifest = GenerationManifest(
        pretrain_spec=pa.to_dict(), target_spec=pb.to_dict(), shared_latent=shared_latent, seed=seed,
        realized_prevalence={"pretrain": float(a.cohort.labels.mean()), "target": float(b.cohort.labels.mean())},
        overlap=overlap, coverage=len(overlap) / pb.d_diag,
        feature_prevalence={"pretrain": float(a.cohort.diagnostic.mean()), "target": float(b.cohort.diagnostic.mean())},
    )
    return a, b, manifest
