# tests/test_cli.py
from __future__ import annotations

import orjson
import pytest
from click.testing import CliRunner

from distgeo.cli import EXIT_RUNTIME, EXIT_USAGE, main
from distgeo.geometry import CoordinateTable, DistanceTable, pairwise_distances


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def slide_dir(runner, tmp_path, small_config_file):
    out = tmp_path / "slide"
    result = runner.invoke(main, ["synth", "--config", str(small_config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


# ---------- synth / reconstruct ----------

def test_synth_writes_slide(slide_dir):
    for name in ("coords.csv", "expression.csv", "domains.csv", "manifest.json"):
        assert (slide_dir / name).exists()


def test_seed_flag_reaches_manifest(runner, tmp_path, small_config_file):
    out = tmp_path / "seeded"
    result = runner.invoke(main, ["synth", "--config", str(small_config_file), "--out", str(out), "--seed", "7"])
    assert result.exit_code == 0, result.output
    assert set(orjson.loads((out / "manifest.json").read_bytes())["seeds"].values()) == {7}


def test_reconstruct_then_verify(runner, tmp_path, small_config_file, slide_dir):
    run = tmp_path / "run"
    result = runner.invoke(
        main,
        ["reconstruct", "--config", str(small_config_file), "--input", str(slide_dir), "--out", str(run),
         "--weighting", "uniform", "--threads", "2"],
    )
    assert result.exit_code == 0, result.output
    assert "patches" in result.output
    manifest = orjson.loads((run / "manifest.json").read_bytes())
    assert manifest["config"]["weighting"] == "uniform"
    assert manifest["config"]["threads"] == 2

    result = runner.invoke(main, ["verify", str(run)])
    assert result.exit_code == 0
    assert "ok" in result.output


def test_reconstruct_needs_input(runner, small_config_file, tmp_path):
    result = runner.invoke(main, ["reconstruct", "--config", str(small_config_file), "--out", str(tmp_path / "r")])
    assert result.exit_code == EXIT_USAGE
    assert "--input" in result.output


def test_reconstruct_missing_input_files(runner, small_config_file, tmp_path):
    result = runner.invoke(
        main, ["reconstruct", "--config", str(small_config_file), "--input", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]
    )
    assert result.exit_code == EXIT_USAGE


def test_stage_failure_exits_runtime(runner, small_config_file, slide_dir, tmp_path):
    result = runner.invoke(
        main,
        ["reconstruct", "--config", str(small_config_file), "--input", str(slide_dir), "--out", str(tmp_path / "r"),
         "--set", "stitch.tau_spread=1e-12"],
    )
    assert result.exit_code == EXIT_RUNTIME
    assert "stitch" in result.output


def test_invalid_config_exits_usage(runner, tmp_path):
    result = runner.invoke(main, ["synth", "--out", str(tmp_path), "--set", "synthetic.n_cells=0"])
    assert result.exit_code == EXIT_USAGE


def test_minisets_command(runner, small_config_file, slide_dir, tmp_path):
    out = tmp_path / "minisets"
    result = runner.invoke(
        main,
        ["minisets", "--config", str(small_config_file), "--input", str(slide_dir), "--out", str(out), "--count", "2",
         "--set", "minisets.n_min=20", "--set", "minisets.n_max=40", "--set", "minisets.min_overlap=10"],
    )
    assert result.exit_code == 0, result.output
    assert len(orjson.loads((out / "minisets.json").read_bytes())["pairs"]) == 2


# ---------- evaluate / report / verify ----------

def test_evaluate_ground_truth_against_itself(runner, small_config_file, slide_dir, tmp_path):
    gt = str(slide_dir / "coords.csv")
    out = tmp_path / "scores"
    result = runner.invoke(main, ["evaluate", "--config", str(small_config_file), "--pred", gt, "--gt", gt, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "spearman\t1" in result.output
    assert "stress1\t0" in result.output
    assert orjson.loads((out / "metrics.json").read_bytes())["trust_at_k"] == 1.0


def test_evaluate_id_mismatch_exits_usage(runner, slide_dir, tmp_path):
    pred = tmp_path / "pred.csv"
    pred.write_text("id,x,y\nq0,0,0\nq1,1,0\nq2,0,1\n")
    result = runner.invoke(
        main, ["evaluate", "--pred", str(pred), "--gt", str(slide_dir / "coords.csv"), "--out", str(tmp_path / "s")]
    )
    assert result.exit_code == EXIT_USAGE
    assert "missing in prediction" in result.output


def test_evaluate_bad_csv_reports_line(runner, slide_dir, tmp_path):
    pred = tmp_path / "pred.csv"
    pred.write_text("id,x,y\nq0,0,0\nq1,abc,0\n")
    result = runner.invoke(
        main, ["evaluate", "--pred", str(pred), "--gt", str(slide_dir / "coords.csv"), "--out", str(tmp_path / "s")]
    )
    assert result.exit_code == EXIT_USAGE
    assert ":3:" in result.output


def test_report_command(runner, small_config_file, slide_dir, tmp_path):
    gt = str(slide_dir / "coords.csv")
    for name in ("a", "b"):
        result = runner.invoke(
            main, ["evaluate", "--config", str(small_config_file), "--pred", gt, "--gt", gt, "--out", str(tmp_path / name)]
        )
        assert result.exit_code == 0, result.output
    out = tmp_path / "report"
    result = runner.invoke(
        main, ["report", str(tmp_path / "a" / "metrics.json"), str(tmp_path / "b" / "metrics.json"), "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    assert (out / "report.csv").exists()
    assert (out / "report.md").exists()


def test_report_rejects_non_report(runner, tmp_path):
    bogus = tmp_path / "bogus.json"
    bogus.write_bytes(b"{}")
    result = runner.invoke(main, ["report", str(bogus), "--out", str(tmp_path / "r")])
    assert result.exit_code == EXIT_USAGE


def test_verify_flags_tampered_file(runner, slide_dir):
    (slide_dir / "expression.csv").write_text("id\n")
    result = runner.invoke(main, ["verify", str(slide_dir)])
    assert result.exit_code == EXIT_RUNTIME
    assert "mismatch: expression.csv" in result.output


def test_evaluate_distance_matrix(runner, small_config_file, slide_dir, tmp_path):
    gt = CoordinateTable.read_csv(slide_dir / "coords.csv")
    pred = tmp_path / "D.csv"
    DistanceTable(ids=gt.ids, matrix=pairwise_distances(gt.coords)).to_csv(pred)
    out = tmp_path / "scores"
    result = runner.invoke(
        main,
        ["evaluate", "--config", str(small_config_file), "--pred", str(pred), "--gt", str(slide_dir / "coords.csv"),
         "--out", str(out), "--distances", "--distortion"],
    )
    assert result.exit_code == 0, result.output
    assert "spearman\t1" in result.output
    assert (out / "distortion.csv").exists()
