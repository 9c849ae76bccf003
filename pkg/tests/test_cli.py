import json
import math

import pytest
from pydantic import ValidationError

import run
from ledger import RunLedger


@pytest.fixture
def config_file(tmp_path, tiny_config):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config.resolved()))
    return path


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestParsing:
    def test_empty_seed_list(self, tiny_config):
        with pytest.raises(ValidationError, match="seeds must not be empty"):
            tiny_config.with_seeds([])
        assert tiny_config.with_seeds(range(3)).seeds == [0, 1, 2]

    def test_unknown_subcommand(self, capsys):
        assert run.main(["trian"]) == 2
        assert "did you mean 'train'" in capsys.readouterr().err

    def test_missing_required_flag(self):
        assert run.main(["distill"]) == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert run.main(["gen-data", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 2
        assert "usage-error" in capsys.readouterr().err

    def test_options_collected(self):
        inv = run.parse_invocation(["curves", "--alpha", "0.2", "--seed", "4", "-vv"])
        assert inv.subcommand == "curves"
        assert inv.seed == 4 and inv.verbosity == 2
        assert inv.options["alpha"] == 0.2 and inv.options["steps"] == 200


class TestCurves:
    def test_rows_and_minimum(self, tmp_path):
        out = tmp_path / "curve"
        assert run.main(["curves", "--alpha", "0.1", "--zmin", "-10", "--zmax", "10", "--steps", "200",
                         "--out", str(out)]) == 0
        lines = (out / "curve.csv").read_text().splitlines()
        assert lines[0] == "alpha,z,loss"
        assert len(lines) == 201
        minimum = json.loads((out / "curve_minimum.json").read_text())
        assert minimum["z_min"] == pytest.approx(math.log(9.0))
        names = {f["path"] for f in _manifest(out)["files"]}
        assert {"curve.csv", "curve_minimum.json"} <= names

    def test_invalid_alpha(self, tmp_path, capsys):
        assert run.main(["curves", "--alpha", "1.2", "--out", str(tmp_path / "bad")]) == 1
        assert "invalid-coefficient" in capsys.readouterr().err

    def test_bad_grid(self, tmp_path):
        assert run.main(["curves", "--alpha", "0.1", "--steps", "1", "--out", str(tmp_path / "g")]) == 2


class TestTrainingCommands:
    def test_gen_data(self, tmp_path, config_file):
        out = tmp_path / "data"
        assert run.main(["gen-data", "--config", str(config_file), "--out", str(out)]) == 0
        assert len((out / "dataset.csv").read_text().splitlines()) == 4 * 30 + 1
        assert (out / "dataset.spec.json").exists()

    def test_train_distill_evaluate_metrics_geometry(self, tmp_path, config_file, capsys):
        teach = tmp_path / "teach"
        assert run.main(["train", "--config", str(config_file), "--out", str(teach)]) == 0
        for name in ("teacher_a0.1.ckpt", "teacher_a0.1_epochs.csv", "teacher_a0.1_probs.csv",
                     "teacher_a0.1_stability.json", "teacher_a0_geometry.json"):
            assert (teach / name).exists()
        manifest = _manifest(teach)
        flags = {f["path"]: f["deterministic"] for f in manifest["files"]}
        assert flags["timings.json"] is False and flags["teacher_a0.1.ckpt"] is True
        assert len(manifest["config_hash"]) == 64

        ckpt = str(teach / "teacher_a0.1.ckpt")
        dist = tmp_path / "dist"
        assert run.main(["distill", "--config", str(config_file), "--teacher", ckpt, "--out", str(dist)]) == 0
        assert (dist / "student_lam0.5_T1_epochs.csv").exists()

        ev = tmp_path / "eval"
        assert run.main(["evaluate", "--config", str(config_file), "--checkpoint", ckpt,
                         "--topk", "1", "2", "--out", str(ev)]) == 0
        acc = json.loads((ev / "evaluation.json").read_text())["accuracy"]
        assert 0.0 <= acc["top1"] <= acc["top2"] <= 1.0

        met = tmp_path / "met"
        assert run.main(["metrics", "--probs", str(teach / "teacher_a0.1_probs.csv"), "--ddof", "0",
                         "--out", str(met)]) == 0
        report = json.loads((met / "stability_report.json").read_text())
        assert len(report["per_class"]) == 4

        geo = tmp_path / "geo"
        capsys.readouterr()
        assert run.main(["geometry", "--config", str(config_file), "--checkpoint", ckpt, "--out", str(geo)]) == 0
        assert capsys.readouterr().out.startswith("D_c full=")
        assert (geo / "points.csv").exists() and (geo / "scatter.svg").exists()

    def test_evaluate_topk_too_large(self, tmp_path, config_file, capsys):
        teach = tmp_path / "teach"
        assert run.main(["train", "--config", str(config_file), "--out", str(teach)]) == 0
        assert run.main(["evaluate", "--config", str(config_file), "--checkpoint", str(teach / "teacher_a0.ckpt"),
                         "--topk", "9", "--out", str(tmp_path / "ev")]) == 1
        assert "spec-error" in capsys.readouterr().err


class TestMatrixCommands:
    def test_matrix_and_report(self, tmp_path, config_file):
        out = tmp_path / "matrix"
        assert run.main(["matrix", "--config", str(config_file), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["cells"] == 8 and summary["failed"] == []
        assert len(list((out / "cells").iterdir())) == 8
        assert len(list((out / "teachers").iterdir())) == 4
        assert (out / "summary.txt").read_text().startswith("experiment: tiny")

        ledger = RunLedger.in_dir(out)
        try:
            with ledger.engine.connect() as conn:
                n = conn.exec_driver_sql("SELECT COUNT(*) FROM cells").scalar()
        finally:
            ledger.close()
        assert n == 8

        rep = tmp_path / "report"
        assert run.main(["report", "--run", str(out), "--out", str(rep)]) == 0
        assert (rep / "report.docx").exists()
        assert "alpha=0.1 lam0.5_T1 (n=2)" in (rep / "report.txt").read_text()

    def test_seed_override(self, tmp_path, config_file):
        out = tmp_path / "one"
        assert run.main(["matrix", "--config", str(config_file), "--seed", "5", "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["cells"] == 4
        assert all(p.name.startswith("s005_") for p in (out / "cells").iterdir())

    def test_report_without_summary(self, tmp_path):
        assert run.main(["report", "--run", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 2

    def test_seeds_flag_reaches_manifest(self, tmp_path, config_file):
        out = tmp_path / "first"
        assert run.main(["matrix", "--config", str(config_file), "--seeds", "1", "--out", str(out)]) == 0
        assert json.loads((out / "summary.json").read_text())["cells"] == 4
        config = _manifest(out)["config"]
        assert config["seeds"] == [0]
        assert config["command"] == {"subcommand": "matrix"}

    def test_zero_seeds_rejected(self, tmp_path, config_file, capsys):
        assert run.main(["matrix", "--config", str(config_file), "--seeds", "0", "--out", str(tmp_path / "z")]) == 1
        assert "spec-error" in capsys.readouterr().err

    def test_outputs_identical_across_worker_counts(self, tmp_path, config_file):
        runs = []
        for workers in ("1", "2"):
            out = tmp_path / f"w{workers}"
            assert run.main(["matrix", "--config", str(config_file), "--workers", workers, "--out", str(out)]) == 0
            runs.append((out, _manifest(out)))
        (a, ma), (b, mb) = runs
        assert ma["config_hash"] == mb["config_hash"]
        compared = sorted(f["path"] for f in ma["files"] if f["deterministic"])
        assert compared == sorted(f["path"] for f in mb["files"] if f["deterministic"])
        assert any(p.endswith("_epochs.csv") for p in compared)
        assert any(p.endswith(".ckpt") for p in compared)
        for rel in compared:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestManifestConfig:
    def test_subcommand_flags_change_hash(self, tmp_path):
        hashes = []
        for alpha in ("0.1", "0.3"):
            out = tmp_path / f"curve{alpha}"
            assert run.main(["curves", "--alpha", alpha, "--out", str(out)]) == 0
            manifest = _manifest(out)
            assert manifest["config"]["command"]["alpha"] == float(alpha)
            hashes.append(manifest["config_hash"])
        assert hashes[0] != hashes[1]

    def test_input_files_are_identified_by_content(self, tmp_path):
        probs = tmp_path / "p.csv"
        probs.write_text("example_id,label,p_0,p_1\n0,0,0.9,0.1\n1,1,0.2,0.8\n")
        assert run.main(["metrics", "--probs", str(probs), "--out", str(tmp_path / "m")]) == 0
        recorded = _manifest(tmp_path / "m")["config"]["command"]["probs"]
        assert recorded["path"] == str(probs)
        assert len(recorded["sha256"]) == 64


class TestInputErrors:
    def test_labels_outside_class_range(self, tmp_path, capsys):
        probs = tmp_path / "p.csv"
        probs.write_text("example_id,label,p_0,p_1\n0,0,0.9,0.1\n1,1,0.2,0.8\n2,7,0.5,0.5\n"
                         "3,-1,0.5,0.5\n4,0,0.6,0.4\n")
        assert run.main(["metrics", "--probs", str(probs), "--out", str(tmp_path / "m")]) == 1
        assert "invalid-input" in capsys.readouterr().err

    def test_zero_row_in_dump(self, tmp_path, capsys):
        probs = tmp_path / "p.csv"
        probs.write_text("example_id,label,p_0,p_1\n0,0,0.9,0.1\n1,1,0.0,0.0\n")
        assert run.main(["metrics", "--probs", str(probs), "--out", str(tmp_path / "m")]) == 1
        assert "invalid-input" in capsys.readouterr().err

    def test_missing_probs_file(self, tmp_path, capsys):
        assert run.main(["metrics", "--probs", str(tmp_path / "absent.csv"), "--out", str(tmp_path / "m")]) == 1
        assert capsys.readouterr().err.startswith("error[invalid-input]")

    def test_missing_checkpoint(self, tmp_path, config_file, capsys):
        assert run.main(["evaluate", "--config", str(config_file), "--checkpoint", str(tmp_path / "absent.ckpt"),
                         "--out", str(tmp_path / "ev")]) == 1
        assert capsys.readouterr().err.startswith("error[invalid-input]")
