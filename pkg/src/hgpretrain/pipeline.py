"""End-to-end helpers shared by the command line and the experiment scripts.

Configuration is one flat dict with dotted keys (``"sup.epochs"``); every
function here takes that dict, so a run is fully described by it plus the
root seed.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np

from .augment import MaskingPolicy
from .cohort import Cohort
from .contrastive import ContrastiveConfig, fit_unsupervised
from .encoder import EncoderConfig, EncoderState, save_encoder
from .evaluation import DEFAULT_GRIDS
from .hypergraph import Hypergraph, from_matrix
from .supervised import SupervisedConfig, TrainRun, fit_supervised
from .synth import CohortSpec, generate_pair
from .transfer import Representation, extract_and_concat

DEFAULTS: dict[str, object] = {
    # synthetic cohorts
    "synth.pretrain_n": 4000,
    "synth.target_n": 400,
    "synth.d_diag": 800,
    "synth.d_baseline": 53,
    "synth.n_latent": 16,
    "synth.shared_latent": 2,
    "synth.loading": 1.0,
    "synth.label_noise": 0.5,
    "synth.pretrain_label_factors": 2,
    "synth.target_label_factors": 2,
    "synth.pretrain_prevalence": 0.21,
    "synth.target_prevalence": 0.21,
    "synth.feature_prevalence": 0.05,
    "synth.overlap": 0.977,
    "synth.missingness": 0.1,
    # encoder
    "encoder.d_hi": 32,
    "encoder.heads": 4,
    "encoder.layers": 1,
    "encoder.dropout": 0.0,
    # supervised pre-training
    "sup.epochs": 4,
    "sup.lr": 3e-3,
    "sup.optimizer": "adam",
    "sup.batch_size": 64,
    "sup.val_fraction": 0.1,
    "sup.patience": 20,
    # self-supervised pre-training
    "unsup.epochs": 12,
    "unsup.lr": 1e-2,
    "unsup.optimizer": "adam",
    "unsup.batch_size": 64,
    "unsup.tau_level": 0.5,
    "unsup.tau_g": 1.0,
    "unsup.p_node": 0.3,
    "unsup.p_tau": 0.7,
    "unsup.p_inside": 0.3,
    "unsup.mask_direction": "formula",
    "unsup.learn_augmentor": False,
    # transfer and evaluation
    "transfer.context": "cohort",
    "transfer.min_coverage": 0.5,
    "eval.k_outer": 5,
    "eval.k_inner": 3,
    "eval.tune": True,
    "eval.families": "lr,rf,gb",
    "ablate.fractions": "0.2,0.4,0.6,0.8",
    "ablate.test_fraction": 0.2,
}


def resolve_config(*layers: dict) -> dict:
    """Merge flat dotted-key dicts left to right over the defaults.

    Unknown keys are rejected and values are coerced to the default's type,
    so ``"sup.epochs": "8"`` from a command line becomes the integer 8.
    """
    cfg = copy.deepcopy(DEFAULTS)
    for layer in layers:
        for key, value in (layer or {}).items():
            if key not in DEFAULTS:
                raise KeyError(f"unknown config key {key!r}")
            cfg[key] = _coerce(DEFAULTS[key], value, key)
    return dict(sorted(cfg.items()))


def _coerce(default, value, key):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes"):
            return True
        if str(value).lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def cohort_specs(cfg: dict, seed: int) -> tuple[CohortSpec, CohortSpec]:
    common = dict(d_diag=cfg["synth.d_diag"], n_latent=cfg["synth.n_latent"], loading=cfg["synth.loading"],
                  label_noise=cfg["synth.label_noise"], feature_prevalence=cfg["synth.feature_prevalence"],
                  seed=seed)
    pre = CohortSpec(cfg["synth.pretrain_n"], d_baseline=0, label_factors=cfg["synth.pretrain_label_factors"],
                     prevalence=cfg["synth.pretrain_prevalence"], **common)
    tgt = CohortSpec(cfg["synth.target_n"], d_baseline=cfg["synth.d_baseline"],
                     label_factors=cfg["synth.target_label_factors"], prevalence=cfg["synth.target_prevalence"],
                     overlap=cfg["synth.overlap"], missingness=cfg["synth.missingness"], **common)
    return pre, tgt


def synthesize(cfg: dict, seed: int):
    pre, tgt = cohort_specs(cfg, seed)
    return generate_pair(pre, tgt, cfg["synth.shared_latent"], seed)


def encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(d_hi=cfg["encoder.d_hi"], heads=cfg["encoder.heads"], layers=cfg["encoder.layers"],
                         dropout=cfg["encoder.dropout"])


def cohort_hypergraph(cohort: Cohort) -> tuple[Hypergraph, np.ndarray]:
    """Pre-training hypergraph (empty patients dropped) and the kept row indices."""
    hg = from_matrix(cohort.diagnostic, cohort.patient_ids, cohort.diagnostic_names, on_empty="drop")
    dropped = set(hg.dropped_patients)
    keep = np.array([i for i, p in enumerate(cohort.patient_ids) if p not in dropped], dtype=np.int64)
    return hg, keep


def pretrain(mode: str, cohort: Cohort, cfg: dict, seed: int) -> tuple[EncoderState, TrainRun]:
    hg, keep = cohort_hypergraph(cohort)
    enc = encoder_config(cfg)
    if mode == "supervised":
        if cohort.labels is None:
            raise ValueError("supervised pre-training needs a labels file")
        sc = SupervisedConfig(encoder=enc, epochs=cfg["sup.epochs"], lr=cfg["sup.lr"],
                              optimizer=cfg["sup.optimizer"], batch_size=cfg["sup.batch_size"],
                              val_fraction=cfg["sup.val_fraction"], patience=cfg["sup.patience"], seed=seed)
        state, _, run = fit_supervised(hg, cohort.labels[keep], sc)
        return state, run
    if mode == "unsupervised":
        policy = MaskingPolicy(cfg["unsup.p_node"], cfg["unsup.p_tau"], cfg["unsup.p_inside"],
                               cfg["unsup.mask_direction"])
        uc = ContrastiveConfig(encoder=enc, policy=policy, tau_level=cfg["unsup.tau_level"],
                               tau_g=cfg["unsup.tau_g"], epochs=cfg["unsup.epochs"], lr=cfg["unsup.lr"],
                               optimizer=cfg["unsup.optimizer"], batch_size=cfg["unsup.batch_size"],
                               learn_augmentor=cfg["unsup.learn_augmentor"], seed=seed)
        return fit_unsupervised(hg, uc)
    raise ValueError(f"cannot pre-train in mode {mode!r}")


def save_pretrained(path, state: EncoderState, mode: str, run: TrainRun) -> Path:
    return save_encoder(path, state, {"pretrain_mode": mode, "epochs_run": run.epochs,
                                      "best_epoch": run.best_epoch})


def represent(cohort: Cohort, mode: str, cfg: dict, state: EncoderState | None = None) -> Representation:
    return extract_and_concat(cohort, mode, state, context=cfg["transfer.context"],
                              min_coverage=cfg["transfer.min_coverage"])


def families(cfg: dict) -> list[str]:
    return [f.strip() for f in str(cfg["eval.families"]).split(",") if f.strip()]


def grids(cfg: dict) -> dict:
    return DEFAULT_GRIDS if cfg["eval.tune"] else {}


def fractions(cfg: dict) -> list[float]:
    return [float(x) for x in str(cfg["ablate.fractions"]).split(",")]
