"""Small end-to-end run: synthesize paired cohorts, pre-train both ways, compare.

Uses a reduced configuration so it finishes in about a minute.  Pass
``--full`` for the default sizes (4000 / 400 patients, 800 features).

    python demos/transfer_walkthrough.py [--full] [--seed N]
"""

import argparse
import time

from hgpretrain import pipeline
from hgpretrain.evaluation import compare, render_table

SMALL = {"synth.pretrain_n": 1500, "synth.target_n": 300, "synth.d_diag": 300}

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

cfg = pipeline.resolve_config({} if args.full else SMALL)
pretrain_pair, target_pair, gen = pipeline.synthesize(cfg, args.seed)
source, target = pretrain_pair.cohort, target_pair.cohort
print(f"pre-training cohort: {len(source.patient_ids)} patients x {source.diagnostic.shape[1]} features, "
      f"prevalence {source.labels.mean():.3f}")
print(f"target cohort: {len(target.patient_ids)} patients, {target.baseline.shape[1]} baseline columns, "
      f"vocabulary coverage {gen.coverage:.3f}")

reps = {"from_scratch": pipeline.represent(target, "from_scratch", cfg)}
for mode in ("supervised", "unsupervised"):
    t = time.perf_counter()
    state, run = pipeline.pretrain(mode, source, cfg, args.seed)
    print(f"{mode} pre-training: {run.epochs} epochs, final loss {run.loss_trace[-1]:.4f}, "
          f"{time.perf_counter() - t:.1f}s")
    reps[mode] = pipeline.represent(target, mode, cfg, state)

reports = compare(reps, pipeline.families(cfg), {}, seed=args.seed)
print()
print(render_table(reports))
