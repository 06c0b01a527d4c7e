# tests/test_pipeline.py
from __future__ import annotations

import asyncio

import numpy as np
import orjson
import pandas as pd
import pytest

from distgeo.errors import InvalidInputError, StageError, StoreError
from distgeo.metrics import evaluate
from distgeo.pipeline import (
    STAGES,
    Reconstructor,
    build_report,
    evaluate_run,
    rank_column,
    reconstruct_run,
    report_run,
    synth_run,
    verify_run,
)
from distgeo.synthetic import OraclePredictor, generate_slide


@pytest.fixture()
def slide(small_config):
    return generate_slide(small_config.synthetic)


@pytest.fixture()
def oracle(slide, small_config):
    return OraclePredictor(slide.coords, small_config.oracle)


def _metrics_doc(**values):
    doc = {
        "spearman": 0.9, "pearson": 0.9, "stress1": 0.2, "local_stress": 0.15, "scale_err": 0.05,
        "edge_roc_auc": 0.9, "bap": 0.8,
        "shell_f1_macro": 0.7, "trust_at_k": 0.95, "cont_at_k": 0.95, "swd": 0.05,
        "w1_knn": 0.01, "cal_err": 0.1, "lrmse": {"10": 0.3, "20": 0.4},
    }
    doc.update(values)
    return doc


def _write_metrics(path, **values):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(_metrics_doc(**values)))
    return path


# ---------- reconstructor ----------

def test_reconstructor_runs_every_stage(small_config, slide, oracle):
    recon = Reconstructor(small_config, oracle).run(slide.expression, slide.coords.ids)
    assert recon.coords.ids == slide.coords.ids
    assert np.all(np.isfinite(recon.coords.coords))
    assert set(STAGES) <= set(recon.timings)
    assert recon.timings["predict_patch"]["calls"] == len(recon.cover)
    assert sum(recon.timings[s]["share"] for s in STAGES) == pytest.approx(1.0)
    assert recon.stitched.graph.n_edges > 0

    report, _ = evaluate(recon.coords, slide.coords, small_config.metrics)
    assert report.trust_at_k > 0.8


def test_reconstructor_is_deterministic_across_threads(small_config, slide, oracle):
    a = Reconstructor(small_config, oracle).run(slide.expression, slide.coords.ids)
    b = Reconstructor(small_config.model_copy(update={"threads": 4}), oracle).run(slide.expression, slide.coords.ids)
    assert np.array_equal(a.coords.coords, b.coords.coords)


def test_reconstructor_async(small_config, slide, oracle):
    recon = asyncio.run(Reconstructor(small_config, oracle).arun(slide.expression, slide.coords.ids))
    assert len(recon.coords) == len(slide.coords)


def test_failing_predictor_names_the_stage(small_config, slide):
    def broken(patch, cells):
        raise ValueError("no model")

    with pytest.raises(StageError) as exc:
        Reconstructor(small_config, broken).run(slide.expression, slide.coords.ids)
    assert exc.value.stage == "predict"
    assert "no model" in str(exc.value)


def test_empty_stitched_graph_fails_in_stitch(small_config, slide, oracle):
    cfg = small_config.model_copy(update={"stitch": small_config.stitch.model_copy(update={"tau_spread": 1e-12})})
    with pytest.raises(StageError) as exc:
        Reconstructor(cfg, oracle).run(slide.expression, slide.coords.ids)
    assert exc.value.stage == "stitch"


def test_single_patch_when_patch_size_covers_the_slide(small_config, slide, oracle):
    cfg = small_config.model_copy(update={"patch": small_config.patch.model_copy(update={"n_patch": 300})})
    recon = Reconstructor(cfg, oracle).run(slide.expression, slide.coords.ids)
    assert len(recon.cover) == 1
    assert recon.stitched.disagreements == {}
    assert recon.stitched.graph.n_edges > 0


# ---------- run drivers ----------

def test_synth_reconstruct_evaluate_verify(tmp_path, small_config):
    data, run, scores = tmp_path / "slide", tmp_path / "run", tmp_path / "scores"
    synth_run(small_config, data)
    for name in ("coords.csv", "expression.csv", "domains.csv", "manifest.json"):
        assert (data / name).exists()

    recon = reconstruct_run(small_config, data, run)
    for name in ("X.csv", "stitched.csv", "locality.csv", "patches.json", "diagnostics.json"):
        assert (run / name).exists()
    manifest = orjson.loads((run / "manifest.json").read_bytes())
    assert manifest["command"] == "reconstruct"
    assert manifest["n_patches"] == len(recon.cover)
    assert manifest["seeds"]["solver"] == small_config.solver.seed
    assert verify_run(run) == []

    report, undefined = evaluate_run(small_config, run / "X.csv", data / "coords.csv", scores, distortion=True)
    assert (scores / "metrics.json").exists()
    assert (scores / "distortion.csv").exists()
    assert undefined == []
    assert report.trust_at_k > 0.8


def test_reconstruct_outputs_are_reproducible(tmp_path, small_config):
    data = tmp_path / "slide"
    synth_run(small_config, data)
    reconstruct_run(small_config, data, tmp_path / "a")
    reconstruct_run(small_config, data, tmp_path / "b")
    for name in ("X.csv", "stitched.csv", "patches.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_with_spots(tmp_path, small_config):
    cfg = small_config.model_copy(update={"spots": small_config.spots.model_copy(update={"enabled": True, "pitch": 0.2})})
    synth_run(cfg, tmp_path)
    assert (tmp_path / "spots" / "coords.csv").exists()
    assert orjson.loads((tmp_path / "manifest.json").read_bytes())["n_spots"] > 0


def test_verify_reports_tampering(tmp_path, small_config):
    synth_run(small_config, tmp_path)
    (tmp_path / "coords.csv").write_text("id,x,y\n")
    assert verify_run(tmp_path) == ["coords.csv"]


def test_verify_needs_a_directory(tmp_path):
    with pytest.raises(StoreError):
        verify_run(tmp_path / "absent")


# ---------- report ----------

def test_rank_column():
    assert rank_column([0.9, 0.8, float("nan")], higher=True) == [1, 2, None]
    assert rank_column([0.1, 0.1, 0.3], higher=False) == [1, 1, 3]


def test_build_report_labels_and_columns(tmp_path):
    a = _write_metrics(tmp_path / "runA" / "metrics.json")
    b = _write_metrics(tmp_path / "other.json", spearman=0.5)
    frame = build_report([a, b])
    assert frame["run"].tolist() == ["runA", "other"]
    assert "lrmse@10" in frame.columns
    assert frame["spearman"].tolist() == [0.9, 0.5]


def test_build_report_null_values_are_nan(tmp_path):
    path = _write_metrics(tmp_path / "x.json", cal_err=None)
    assert pd.isna(build_report([path])["cal_err"][0])


@pytest.mark.parametrize("content", [b"{not json", b"[]", orjson.dumps({"spearman": 1.0})])
def test_build_report_rejects_bad_files(tmp_path, content):
    path = tmp_path / "bad.json"
    path.write_bytes(content)
    with pytest.raises(InvalidInputError):
        build_report([path])


def test_build_report_rejects_schema_drift(tmp_path):
    a = _write_metrics(tmp_path / "a.json")
    b = _write_metrics(tmp_path / "b.json", lrmse={"10": 0.3})
    with pytest.raises(InvalidInputError):
        build_report([a, b])


def test_build_report_needs_paths():
    with pytest.raises(InvalidInputError):
        build_report([])


def test_report_run_marks_best(tmp_path):
    a = _write_metrics(tmp_path / "a.json", spearman=0.95, stress1=0.3, local_stress=0.05, scale_err=0.2)
    b = _write_metrics(tmp_path / "b.json", spearman=0.85, stress1=0.1, local_stress=0.08, scale_err=0.01)
    out = tmp_path / "report"
    report_run([a, b], out)
    ranked = pd.read_csv(out / "report.csv")
    assert ranked["spearman_rank"].tolist() == [1, 2]
    assert ranked["stress1_rank"].tolist() == [2, 1]
    assert ranked["local_stress_rank"].tolist() == [1, 2]
    assert ranked["scale_err_rank"].tolist() == [2, 1]
    md = (out / "report.md").read_text()
    assert "spearman ↑" in md and "stress1 ↓" in md and "scale_err ↓" in md
    assert "**0.9500**" in md
    assert "_0.3000_" in md
