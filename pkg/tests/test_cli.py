import json

import numpy as np
import pytest

from padl import dataio
from padl.cli import run, svg_line_chart
from padl.trainer import load_model, predict

SMALL_SCENE = [
    "--set", "scene.height=32", "--set", "scene.width=32",
    "--set", "scene.size_range=[5.0, 7.0]", "--set", "scene.jitter=2.0",
]
SMALL_MODEL = [
    "--set", "epochs=1", "--set", "batch_size=4", "--set", "lr0=0.003",
    "--set", "model.backbone.base_channels=4", "--set", "model.backbone.out_channels=8",
    "--set", "model.sem.sigma_features=4", "--set", "model.hpm.hidden_channels=4",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert run(["gen", "--out", str(data), "--set", "n_train=8", "--set", "n_test=2", *SMALL_SCENE]) == 0
    assert run(["train", "--data", str(data), "--out", str(run_dir), "--mode", "padl", *SMALL_MODEL]) == 0
    return root, data, run_dir


def test_gen_train_eval_pipeline(pipeline):
    root, data, run_dir = pipeline
    assert (data / "manifest.json").exists() and (data / "config.json").exists()
    assert json.loads((run_dir / "config.json").read_text())["model"]["mode"] == "padl"
    assert (run_dir / "loss_log.jsonl").exists() and (run_dir / "checkpoint.padl").exists()
    out = root / "eval"
    assert run(["eval", "--checkpoint", str(run_dir / "checkpoint.padl"), "--data", str(data),
                "--out", str(out), "--set", "dump_probs=true"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert {"average", "mean_voting", "per_annotator"} <= set(report)
    assert (out / "probs" / "0009_a3.pgm").exists() and (out / "config.json").exists()


def test_mimic_writes_quantized_head_map(pipeline):
    root, data, run_dir = pipeline
    out = root / "mimic"
    image = data / "images" / "0007.pgm"
    assert run(["mimic", "--checkpoint", str(run_dir / "checkpoint.padl"), "--annotator", "2",
                "--image", str(image), "--out", str(out)]) == 0
    written = dataio.read_pgm(out / "0007_a2.pgm")
    params, conf, ckpt = load_model(run_dir / "checkpoint.padl")
    norm = ckpt.header["normalization"]
    x = ((dataio.read_pgm(image).astype(np.float64) - norm["mean"]) / norm["std"]).astype(np.float32)
    expected = dataio.quantize_probability(predict(params, conf, x[None, None]).head_probs[1, 0, 0])
    np.testing.assert_array_equal(written, expected)
    assert run(["mimic", "--checkpoint", str(run_dir / "checkpoint.padl"), "--annotator", "4",
                "--image", str(image), "--out", str(out)]) == 1


def test_report_aggregates_and_plots(pipeline):
    root, data, run_dir = pipeline
    out = root / "report"
    assert run(["report", "--runs", str(run_dir), "--out", str(out)]) == 0
    svg = (out / "loss_curves.svg").read_text()
    assert svg.startswith("<svg") and "<polyline" in svg
    assert json.loads((out / "summary.json").read_text())[0]["run"] == "run"


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run(["frobnicate"]) == 1
    assert run(["gen", "--out", str(tmp_path), "--set", "scene.nope=3"]) == 1
    assert run(["gen"]) == 1
    assert not any(tmp_path.iterdir())


def test_data_errors_exit_2(tmp_path, pipeline):
    _, data, run_dir = pipeline
    assert run(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    bad = tmp_path / "bad.padl"
    bad.write_bytes(b"garbage!" * 4)
    assert run(["eval", "--checkpoint", str(bad), "--data", str(data), "--out", str(tmp_path / "e")]) == 2


def test_divergence_exits_3(tmp_path, pipeline):
    _, data, _ = pipeline
    with np.errstate(all="ignore"):
        code = run(["train", "--data", str(data), "--out", str(tmp_path / "r"), *SMALL_MODEL,
                    "--set", "lr0=1e30", "--set", "epochs=3"])
    assert code == 3


def test_svg_chart_handles_flat_series():
    svg = svg_line_chart({"a": [1.0, 1.0, 1.0]}, "flat")
    assert "nan" not in svg and svg.count("<polyline") == 1
