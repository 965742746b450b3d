"""Command line: ``hgpretrain <command> [flags]``.

Every command writes its outputs plus ``manifest.json`` (resolved config,
seed, input and output hashes) into ``--out``.  ``--replay manifest.json``
reruns the recorded command with the recorded settings.  Failures print one
JSON line ``{"error": ..., "message": ...}`` on stderr and exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import pipeline
from .cohort import SchemaError, file_sha256, read_cohort, tree_sha256, write_cohort
from .encoder import load_encoder
from .evaluation import METRICS, ablate_size, compare, nested_cv, render_table
from .transfer import MODES, align_vocabulary, alignment_report, write_representation

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "hgpretrain-manifest/1"
COMMANDS = ("synth", "pretrain-sup", "pretrain-unsup", "embed", "evaluate", "ablate-size", "compare")


class CliError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hgpretrain", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", help="JSON file of flat dotted keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out")
    p.add_argument("--pretrain-data")
    p.add_argument("--target-data")
    p.add_argument("--checkpoint", action="append", default=[],
                   help="encoder checkpoint; for compare give MODE=PATH once per pre-trained mode")
    p.add_argument("--replay", help="manifest of an earlier run to reproduce")
    return p


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _resolve(args) -> tuple[dict, dict]:
    """Return (run record, resolved config)."""
    if args.replay:
        rec = _load_json(args.replay)
        if rec.get("format") != MANIFEST_FORMAT:
            raise CliError(f"{args.replay}: not a run manifest")
        run = dict(rec["run"])
        if args.out:
            run["out"] = args.out
        return run, pipeline.resolve_config(rec["config"])
    if not args.command:
        raise CliError("a command or --replay is required")
    file_cfg = _load_json(args.config) if args.config else {}
    try:
        cfg = pipeline.resolve_config(file_cfg, _overrides(args.set))
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc).strip("'\"")) from None
    if not args.out:
        raise CliError("--out is required")
    run = {"command": args.command, "seed": 0 if args.seed is None else args.seed, "mode": args.mode,
           "out": args.out, "pretrain_data": args.pretrain_data, "target_data": args.target_data,
           "checkpoint": list(args.checkpoint)}
    return run, cfg


def _need(run, key, flag):
    if not run.get(key):
        raise CliError(f"{run['command']} needs {flag}")
    return run[key]


def _input_hashes(run) -> dict:
    out = {}
    for key in ("pretrain_data", "target_data"):
        if run.get(key):
            for name, h in tree_sha256(run[key]).items():
                if name.endswith(".csv"):
                    out[f"{key}/{name}"] = h
    for ck in run.get("checkpoint") or []:
        path = Path(ck.split("=", 1)[-1])
        out[f"checkpoint/{path.name}"] = file_sha256(path)
        blob = path.with_suffix(".bin")
        if blob.exists():
            out[f"checkpoint/{blob.name}"] = file_sha256(blob)
    return out


def _checkpoint(run, mode) -> Path:
    """The checkpoint path for ``mode`` from ``--checkpoint`` (plain or MODE=PATH)."""
    plain = [c for c in run["checkpoint"] if "=" not in c]
    keyed = dict(c.split("=", 1) for c in run["checkpoint"] if "=" in c)
    path = keyed.get(mode) or (plain[0] if len(plain) == 1 else None)
    if path is None:
        raise CliError(f"mode {mode} needs --checkpoint (missing checkpoint)")
    if not Path(path).exists():
        raise CliError(f"missing checkpoint: {path}")
    return Path(path)


def _state_for(run, mode):
    if mode == "from_scratch":
        return None
    return load_encoder(_checkpoint(run, mode))


def _target(run):
    path = _need(run, "target_data", "--target-data")
    return read_cohort(path, require_labels=True, require_baseline=True)


def _mode(run):
    if not run.get("mode"):
        raise CliError(f"{run['command']} needs --mode")
    return run["mode"]


def _write_predictions(path, ids, probs, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "probability", "label"])
        for pid, p, y in zip(ids, probs, labels):
            w.writerow([pid, repr(float(p)), int(y)])


def cmd_synth(run, cfg, out: Path) -> None:
    a, b, manifest = pipeline.synthesize(cfg, run["seed"])
    write_cohort(out / "pretrain", a.cohort)
    write_cohort(out / "target", b.cohort)
    (out / "generation.json").write_text(manifest.to_json())


def cmd_pretrain(run, cfg, out: Path, mode: str) -> None:
    cohort = read_cohort(_need(run, "pretrain_data", "--pretrain-data"), require_labels=(mode == "supervised"))
    state, trace = pipeline.pretrain(mode, cohort, cfg, run["seed"])
    pipeline.save_pretrained(out / "encoder.json", state, mode, trace)
    (out / "train_run.json").write_text(json.dumps(trace.to_dict(), indent=2, sort_keys=True, default=str))


def cmd_embed(run, cfg, out: Path) -> None:
    mode = _mode(run)
    cohort = _target(run)
    state = _state_for(run, mode)
    rep = pipeline.represent(cohort, mode, cfg, state)
    write_representation(out / "embeddings.csv", rep)
    if state is not None:
        al = align_vocabulary(state.node_labels, cohort.diagnostic_names, cfg["transfer.min_coverage"])
        (out / "alignment.json").write_text(alignment_report(al, rep.empty_rows))


def cmd_evaluate(run, cfg, out: Path) -> None:
    mode = _mode(run)
    cohort = _target(run)
    rep = pipeline.represent(cohort, mode, cfg, _state_for(run, mode))
    reports = []
    grids = pipeline.grids(cfg)
    for fam in pipeline.families(cfg):
        report, oof = nested_cv(rep, fam, grids.get(fam), cfg["eval.k_outer"], cfg["eval.k_inner"],
                                run["seed"], return_predictions=True)
        reports.append(report)
        _write_predictions(out / f"predictions_{fam}.csv", rep.patient_ids, oof, rep.labels)
    (out / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    (out / "table.txt").write_text(render_table(reports))


def cmd_ablate(run, cfg, out: Path) -> None:
    mode = _mode(run)
    cohort = _target(run)
    rep = pipeline.represent(cohort, mode, cfg, _state_for(run, mode))
    rows = []
    result = {}
    for fam in pipeline.families(cfg):
        res = ablate_size(rep, fam, pipeline.fractions(cfg), cfg["ablate.test_fraction"], run["seed"])
        result[fam] = {f"{k:g}": v for k, v in res.items()}
        rows += [[mode, fam, f"{k:g}"] + [f"{v[m]:.6f}" for m in METRICS] for k, v in res.items()]
    (out / "ablation.json").write_text(json.dumps({"mode": mode, "test_fraction": cfg["ablate.test_fraction"],
                                                   "results": result}, indent=2, sort_keys=True))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "model", "train_fraction"] + list(METRICS))
        w.writerows(rows)


def cmd_compare(run, cfg, out: Path) -> None:
    cohort = _target(run)
    reps = {mode: pipeline.represent(cohort, mode, cfg, _state_for(run, mode)) for mode in MODES}
    reports = compare(reps, pipeline.families(cfg), pipeline.grids(cfg), cfg["eval.k_outer"],
                      cfg["eval.k_inner"], run["seed"])
    (out / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    (out / "table.txt").write_text(render_table(reports))


def execute(run: dict, cfg: dict) -> Path:
    out = Path(run["out"])
    out.mkdir(parents=True, exist_ok=True)
    cmd = run["command"]
    if cmd == "synth":
        cmd_synth(run, cfg, out)
    elif cmd == "pretrain-sup":
        cmd_pretrain(run, cfg, out, "supervised")
    elif cmd == "pretrain-unsup":
        cmd_pretrain(run, cfg, out, "unsupervised")
    elif cmd == "embed":
        cmd_embed(run, cfg, out)
    elif cmd == "evaluate":
        cmd_evaluate(run, cfg, out)
    elif cmd == "ablate-size":
        cmd_ablate(run, cfg, out)
    elif cmd == "compare":
        cmd_compare(run, cfg, out)
    else:
        raise CliError(f"unknown command {cmd!r}")
    outputs = {k: v for k, v in tree_sha256(out).items() if k != MANIFEST}
    record = {"format": MANIFEST_FORMAT, "run": run, "config": cfg, "inputs": _input_hashes(run),
              "outputs": outputs}
    (out / MANIFEST).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run, cfg = _resolve(args)
        execute(run, cfg)
    except (CliError, SchemaError, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": " ".join(msg.split())}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
