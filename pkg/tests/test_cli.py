import csv
import json

import pytest

from hgpretrain.cli import main
from hgpretrain.cohort import tree_sha256

SMALL = {
    "synth.pretrain_n": 150, "synth.target_n": 100, "synth.d_diag": 60, "synth.d_baseline": 5,
    "encoder.d_hi": 8, "encoder.heads": 2, "sup.epochs": 1, "unsup.epochs": 1, "unsup.batch_size": 32,
    "eval.tune": False,
}


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    err = capsys.readouterr().err.strip()
    return code, err


def parse_error(err):
    lines = err.splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    c = ["--config", cfg]
    assert main([str(a) for a in ["synth", *c, "--seed", 3, "--out", root / "data"]]) == 0
    for cmd, name in (("pretrain-sup", "sup"), ("pretrain-unsup", "unsup")):
        assert main([str(a) for a in [cmd, *c, "--seed", 3, "--pretrain-data", root / "data" / "pretrain",
                                      "--out", root / name]]) == 0
    return root


def common(ws):
    return ["--config", ws / "small.json", "--seed", 3, "--target-data", ws / "data" / "target"]


class TestCommands:
    def test_synth_outputs(self, workspace):
        names = set(tree_sha256(workspace / "data"))
        assert {"pretrain/diagnostic.csv", "target/baseline.csv", "target/labels.csv", "generation.json",
                "manifest.json"} <= names

    def test_manifest_records_resolved_config(self, workspace):
        m = json.loads((workspace / "sup" / "manifest.json").read_text())
        assert m["config"]["sup.epochs"] == 1 and m["config"]["encoder.d_hi"] == 8
        assert m["config"]["unsup.tau_level"] == 0.5  # defaults are filled in
        assert "encoder.json" in m["outputs"] and m["inputs"]

    def test_embed(self, workspace, tmp_path, capsys):
        code, _ = run_cli(capsys, "embed", *common(workspace), "--mode", "unsupervised",
                          "--checkpoint", workspace / "unsup" / "encoder.json", "--out", tmp_path)
        assert code == 0
        header = (tmp_path / "embeddings.csv").read_text().splitlines()[0].split(",")
        assert len(header) == 1 + 5 + 8 + 1
        assert json.loads((tmp_path / "alignment.json").read_text())["coverage"] > 0.9

    def test_evaluate(self, workspace, tmp_path, capsys):
        code, _ = run_cli(capsys, "evaluate", *common(workspace), "--mode", "from_scratch", "--out", tmp_path)
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert [r["family"] for r in report] == ["lr", "rf", "gb"]
        assert all(len(r["per_fold"]) == 5 for r in report)
        with open(tmp_path / "predictions_lr.csv") as fh:
            assert len(list(csv.reader(fh))) == 101

    def test_ablate_size(self, workspace, tmp_path, capsys):
        code, _ = run_cli(capsys, "ablate-size", *common(workspace), "--mode", "supervised",
                          "--checkpoint", workspace / "sup" / "encoder.json", "--set", "eval.families=lr",
                          "--out", tmp_path)
        assert code == 0
        data = json.loads((tmp_path / "ablation.json").read_text())
        assert data["test_fraction"] == 0.2
        assert list(data["results"]["lr"]) == ["0.2", "0.4", "0.6", "0.8"]

    def test_compare_grid_and_replay(self, workspace, tmp_path, capsys):
        out = tmp_path / "a"
        code, _ = run_cli(capsys, "compare", *common(workspace), "--out", out,
                          "--checkpoint", f"supervised={workspace / 'sup' / 'encoder.json'}",
                          "--checkpoint", f"unsupervised={workspace / 'unsup' / 'encoder.json'}")
        assert code == 0
        rows = (out / "table.txt").read_text().splitlines()[2:]
        assert len(rows) == 9
        assert all(r.count("±") == 4 for r in rows)
        assert {r.split()[0] for r in rows} == {"From", "Supervised", "Unsupervised"}

        code, _ = run_cli(capsys, "--replay", out / "manifest.json", "--out", tmp_path / "b")
        assert code == 0
        first = json.loads((out / "manifest.json").read_text())
        second = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert first["outputs"] == second["outputs"]
        assert (out / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()

    def test_set_overrides_config_file(self, workspace, tmp_path, capsys):
        code, _ = run_cli(capsys, "evaluate", *common(workspace), "--mode", "from_scratch",
                          "--set", "eval.families=lr", "--set", "eval.k_outer=3", "--out", tmp_path)
        assert code == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert len(report) == 1 and len(report[0]["per_fold"]) == 3


class TestErrors:
    def test_missing_checkpoint(self, workspace, tmp_path, capsys):
        code, err = run_cli(capsys, "embed", *common(workspace), "--mode", "supervised",
                            "--checkpoint", tmp_path / "nope.json", "--out", tmp_path / "o")
        assert code == 2
        assert "missing checkpoint" in parse_error(err)["message"]

    def test_no_checkpoint_given(self, workspace, tmp_path, capsys):
        code, err = run_cli(capsys, "evaluate", *common(workspace), "--mode", "unsupervised", "--out", tmp_path)
        assert code == 2 and "checkpoint" in parse_error(err)["message"]

    def test_schema_mismatch_reports_column_diff(self, workspace, tmp_path, capsys):
        bad = tmp_path / "target"
        bad.mkdir()
        for name in ("diagnostic.csv", "baseline.csv"):
            (bad / name).write_bytes((workspace / "data" / "target" / name).read_bytes())
        text = (workspace / "data" / "target" / "labels.csv").read_text()
        (bad / "labels.csv").write_text(text.replace("patient_id,label", "patient_id,outcome", 1))
        code, err = run_cli(capsys, "evaluate", "--config", workspace / "small.json", "--target-data", bad,
                            "--mode", "from_scratch", "--out", tmp_path / "o")
        assert code == 2
        e = parse_error(err)
        assert e["error"] == "SchemaError"
        assert "missing=['label']" in e["message"] and "unexpected=['outcome']" in e["message"]

    def test_unknown_set_key(self, tmp_path, capsys):
        code, err = run_cli(capsys, "synth", "--set", "synth.bogus=1", "--out", tmp_path)
        assert code == 2 and "synth.bogus" in parse_error(err)["message"]

    def test_missing_out(self, capsys):
        code, err = run_cli(capsys, "synth")
        assert code == 2 and "--out" in parse_error(err)["message"]

    def test_bad_replay(self, tmp_path, capsys):
        (tmp_path / "m.json").write_text("{}")
        code, err = run_cli(capsys, "--replay", tmp_path / "m.json")
        assert code == 2 and "manifest" in parse_error(err)["message"]
