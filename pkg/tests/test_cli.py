import json
import os

import numpy as np
import pandas as pd
import pytest

from scripts.cli import run
from scripts.io import load_checkpoint, read_atnt, write_atnt
from scripts.telemetry import dump_session_log

SIM = {"n_slides": 4, "readers_per_expertise": 2, "feature_dim": 4, "feature_grids": ["10x"], "seed": 3}


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f)
    return str(path)


@pytest.fixture
def simulated(tmp_path):
    cfg = _write_json(tmp_path / "sim.json", SIM)
    out = tmp_path / "cohort"
    assert run(["simulate", "--config", cfg, "--out", str(out), "-q"]) == 0
    return out


def _error_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestUsage:

    def test_unknown_subcommand(self):
        assert run(["frobnicate"]) == 2

    def test_missing_subcommand(self):
        assert run([]) == 2

    def test_bad_grid_argument(self, tmp_path):
        assert run(["heatmap", "--session", "x.jsonl", "--out", str(tmp_path / "h.atnt"), "--grid", "fifty"]) == 2

    def test_help(self):
        assert run(["--help"]) == 0


class TestSimulateAgree:

    def test_simulate_layout(self, simulated):
        meta = json.loads((simulated / "cohort.json").read_text())
        assert meta["n_sessions"] == 4 * 6
        assert "created" not in meta
        assert len(os.listdir(simulated / "sessions")) == 24
        assert read_atnt(str(simulated / "features" / "10x" / "wsi000.atnt")).shape == (50, 50, 4)
        assert read_atnt(str(simulated / "masks" / "wsi000.atnt")).shape == (60, 60)

    def test_simulate_is_reproducible(self, tmp_path, simulated):
        cfg = _write_json(tmp_path / "sim2.json", {"simulate": SIM})
        again = tmp_path / "again"
        assert run(["simulate", "--config", cfg, "--out", str(again), "-q"]) == 0
        for name in sorted(os.listdir(simulated / "sessions")):
            assert (simulated / "sessions" / name).read_bytes() == (again / "sessions" / name).read_bytes()

    def test_ingest_and_agree(self, tmp_path, simulated):
        out = tmp_path / "run"
        assert run(["ingest", "--sessions", str(simulated / "sessions"), "--out", str(out)]) == 0
        summary = pd.read_csv(out / "cohort_summary.csv")
        assert summary.loc[0, "n_sessions"] == 24
        assert summary.loc[0, "n_pathologists"] == 6

        assert run(["agree", "--sessions", str(simulated / "sessions"), "--out", str(out), "--grid", "20x20"]) == 0
        points = pd.read_csv(out / "agreement_points.csv")
        groups = pd.read_csv(out / "agreement_groups.csv")
        assert len(points) == 4 * 3
        assert list(groups["expertise"]) == ["resident", "general", "specialist"]

    def test_report_is_byte_identical(self, tmp_path, simulated):
        out = tmp_path / "run"
        assert run(["agree", "--sessions", str(simulated / "sessions"), "--out", str(out), "--grid", "20x20"]) == 0
        assert run(["report", "--run", str(out)]) == 0
        first = (out / "agreement.svg").read_bytes()
        assert run(["report", "--run", str(out)]) == 0
        assert (out / "agreement.svg").read_bytes() == first
        assert (out / "report.md").read_text().startswith("# attnscope report")

    def test_agree_default_output_directory(self, tmp_path, simulated, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(["agree", "--sessions", str(simulated / "sessions"), "--grid", "10x10", "-q"]) == 0
        assert (tmp_path / "attnscope_out" / "agreement_groups.csv").exists()

    def test_agree_on_missing_directory(self, tmp_path, capsys):
        assert run(["agree", "--sessions", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 3
        assert _error_json(capsys)["error"] == "FileNotFoundError"


class TestHeatmapMetrics:

    def test_heatmap_then_metrics(self, tmp_path, simulated, capsys):
        session = str(simulated / "sessions" / "wsi000_spe00.jsonl")
        pred = str(tmp_path / "pred.atnt")
        svg = str(tmp_path / "pred.svg")
        assert run(["heatmap", "--session", session, "--grid", "20x20", "--out", pred, "--svg", svg, "-q"]) == 0
        assert read_atnt(pred).shape == (20, 20)
        assert os.path.exists(svg)

        capsys.readouterr()
        assert run(["metrics", "--pred", pred, "--gt", pred]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "cc,nss,kld"
        cc_value, nss_value, kld_value = (float(v) for v in lines[1].split(","))
        assert cc_value == pytest.approx(1.0)
        assert nss_value > 0
        assert kld_value == pytest.approx(0.0, abs=1e-6)

    def test_fixations_file(self, tmp_path, capsys):
        write_atnt(str(tmp_path / "p.atnt"), np.array([[1.0, 3.0], [5.0, 7.0]], dtype=np.float32))
        write_atnt(str(tmp_path / "g.atnt"), np.array([[0.0, 1.0], [1.0, 2.0]], dtype=np.float32))
        (tmp_path / "fix.csv").write_text("row,col\n1,1\n")
        args = ["metrics", "--pred", str(tmp_path / "p.atnt"), "--gt", str(tmp_path / "g.atnt"),
                "--fixations", str(tmp_path / "fix.csv")]
        assert run(args) == 0
        row = capsys.readouterr().out.strip().splitlines()[1].split(",")
        assert float(row[1]) == pytest.approx(3.0 / np.sqrt(5.0), rel=1e-6)

    def test_constant_map_metrics_are_nan(self, tmp_path, capsys):
        write_atnt(str(tmp_path / "flat.atnt"), np.ones((3, 3), dtype=np.float32))
        assert run(["metrics", "--pred", str(tmp_path / "flat.atnt"), "--gt", str(tmp_path / "flat.atnt"), "-q"]) == 0
        row = capsys.readouterr().out.strip().splitlines()[1].split(",")
        assert row[0] == "" and row[1] == ""

    def test_empty_filter_exit_code(self, tmp_path, simulated, capsys):
        session = str(simulated / "sessions" / "wsi000_spe00.jsonl")
        code = run(["heatmap", "--session", session, "--out", str(tmp_path / "h.atnt"), "--mag-bin", "100,200"])
        assert code == 4
        assert _error_json(capsys)["error"] == "EmptyAfterFilter"

    @pytest.mark.parametrize("extra", [["--fraction", "1.5"], ["--fraction", "0"], ["--mag-bin", "5,2"]])
    def test_invalid_options_exit_with_error_json(self, tmp_path, two_sample_session, capsys, extra):
        session = tmp_path / "s.jsonl"
        session.write_bytes(dump_session_log(two_sample_session))
        code = run(["heatmap", "--session", str(session), "--out", str(tmp_path / "h.atnt")] + extra)
        assert code == 3
        assert _error_json(capsys)["error"] == "ConfigError"

    def test_malformed_session_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"type": "sample"}\n')
        assert run(["heatmap", "--session", str(bad), "--out", str(tmp_path / "h.atnt")]) == 3
        assert _error_json(capsys)["error"] == "MalformedRecord"


class TestReport:

    def test_empty_run_directory(self, tmp_path, capsys):
        assert run(["report", "--run", str(tmp_path)]) == 3
        assert _error_json(capsys)["error"] == "MissingInputs"


@pytest.mark.slow
class TestTrainEval:

    def test_end_to_end(self, tmp_path, simulated):
        out = tmp_path / "run"
        cfg = _write_json(tmp_path / "exp.json", {
            "paths": {
                "sessions": str(simulated / "sessions"),
                "features": str(simulated / "features"),
                "masks": str(simulated / "masks"),
                "out": str(out),
            },
            "magnifications": ["10x"],
            "attention_model": {"dim": 4, "depth": 0, "n_heads": 1},
            "expertise_model": {"grid": "10x", "channels": 2, "pooled": 2},
            "hyper": {"epochs": 1, "batch_size": 4, "lr": 1e-3},
            "cohort": "all",
            "k": 2,
            "simulate": SIM,
        })
        assert run(["train", "--config", cfg, "--seed", "5", "-q"]) == 0
        for name in ("attention_table.csv", "expertise_table.csv", "expertise_folds.csv", "run.json"):
            assert (out / name).exists()
        manifest = json.loads((out / "run.json").read_text())
        assert manifest["seed"] == 5
        assert set(manifest["models"]) == {"prostattformer_10x", "expertisenet"}
        assert manifest["folds"]["prostattformer_10x"] == ["checkpoints/prostattformer_10x/fold0",
                                                           "checkpoints/prostattformer_10x/fold1"]
        assert set(manifest["folds"]) == {
            "prostattformer_10x", "linear_probe_10x", "expertisenet",
            "expertisenet_temporal_only", "expertisenet_magnification_only",
        }
        for paths in manifest["folds"].values():
            for path in paths:
                assert (out / path / "manifest.json").exists()
        fold = load_checkpoint(str(out / "checkpoints" / "expertisenet" / "fold1"))
        assert fold.config_hash == manifest["models"]["expertisenet"]["config_hash"]

        assert run(["eval", "--config", cfg, "-q"]) == 0
        cohort_models = pd.read_csv(out / "cohort_models.csv")
        assert list(cohort_models["cohort"]) == ["specialist", "non_specialist"]
        assert (out / "attention_eval.csv").exists()

        assert run(["report", "--run", str(out)]) == 0
        report = (out / "report.md").read_text()
        assert "Attention prediction (k-fold)" in report
        assert "Expertise classification (k-fold)" in report
