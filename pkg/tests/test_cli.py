import json
import stat

import numpy as np
import pytest
from click.testing import CliRunner

from exray import __version__
from exray.graph import MODEL_FILE, load_graph, save_graph
from exray.imgproc import save_pipeline_spec
from exray.main import cli
from exray.models import ValidationReport
from exray.monitor import read_trace
from exray.runtime import infer
from exray.synth import GraphBuilder, random_tensors, squash_graph, write_demo_assets
from exray.tensor import Tensor, save_tensor


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    return write_demo_assets(tmp_path_factory.mktemp("demo"), images=6, seed=3)


@pytest.fixture
def small(tmp_path, image_dir, pipeline):
    builder = GraphBuilder("small", (8, 8, 3), seed=9)
    builder.conv(4)
    builder.mean()
    builder.fc(3)
    save_graph(builder.build(), tmp_path / "model")
    save_pipeline_spec(tmp_path / "pipeline.json", pipeline)
    return {"model": str(tmp_path / "model"), "pipeline": str(tmp_path / "pipeline.json"), "images": str(image_dir)}


def _ok(result):
    assert result.exit_code == 0, result.stderr + result.stdout
    return json.loads(result.stdout)


def _run(runner, out, model, pipeline, images, *extra):
    args = ["run", "--model", model, "--pipeline", pipeline, "--inputs", images, "--out", str(out), *extra]
    return runner.invoke(cli, args)


def test_version(runner):
    result = runner.invoke(cli, ["--version"])
    assert __version__ in result.stdout


def test_run_records_trace(runner, tmp_path, small):
    payload = _ok(_run(runner, tmp_path / "edge", small["model"], small["pipeline"], small["images"]))
    assert payload["message"] == "Trace recorded"
    trace = read_trace(payload["trace"])
    assert len(trace.frame_ids()) == 3
    assert trace.manifest.faults == []


def test_run_records_faults(runner, tmp_path, small):
    payload = _ok(_run(
        runner, tmp_path / "edge", small["model"], small["pipeline"], small["images"],
        "--fault", "kernel=slow:3@0", "--kernels", "reference",
    ))
    manifest = read_trace(payload["trace"]).manifest
    assert manifest.resolver.value == "reference"
    assert [(f.target, f.mode.value, f.factor) for f in manifest.faults] == [(0, "SlowKernel", 3)]


def test_run_rejects_bad_fault(runner, tmp_path, small):
    result = _run(runner, tmp_path / "edge", small["model"], small["pipeline"], small["images"], "--fault", "kernel=fast@0")
    assert result.exit_code == 2
    assert "--fault" in result.stderr


def test_run_rejects_unknown_layer_type(runner, tmp_path, small):
    model = json.loads((tmp_path / "model" / MODEL_FILE).read_text())
    model["layers"][1]["type"] = "Conv3D"
    (tmp_path / "model" / MODEL_FILE).write_text(json.dumps(model))
    result = _run(runner, tmp_path / "edge", small["model"], small["pipeline"], small["images"])
    assert result.exit_code == 2
    assert "Error:" in result.stderr


def test_quantize_per_channel(runner, tmp_path, rng):
    save_graph(squash_graph(), tmp_path / "model")
    calib = tmp_path / "calib"
    calib.mkdir()
    for name, tensor in random_tensors((8, 8, 4), 3, rng).items():
        save_tensor(calib / f"{name}.ten", tensor)
    payload = _ok(runner.invoke(cli, [
        "quantize", "--model", str(tmp_path / "model"), "--calib", str(calib),
        "--scheme", "per_channel", "--out", str(tmp_path / "int8"),
    ]))
    assert payload["calibration_inputs"] == 3
    graph = load_graph(tmp_path / "int8")
    assert graph.is_quantized
    assert graph.layers[1].spec.output_quant.per_channel
    output = infer(graph, Tensor.f32(rng.uniform(-1, 1, (8, 8, 4)))).output.array
    assert np.any(output[..., 1] != 0)


def test_quantize_needs_calibration_data(runner, tmp_path):
    save_graph(squash_graph(), tmp_path / "model")
    (tmp_path / "calib").mkdir()
    result = runner.invoke(cli, [
        "quantize", "--model", str(tmp_path / "model"), "--calib", str(tmp_path / "calib"), "--out", str(tmp_path / "q"),
    ])
    assert result.exit_code == 2
    assert "Calibration" in result.stderr


def test_quantize_images_need_pipeline(runner, tmp_path, image_dir):
    save_graph(squash_graph(3), tmp_path / "model")
    result = runner.invoke(cli, [
        "quantize", "--model", str(tmp_path / "model"), "--calib", str(image_dir), "--out", str(tmp_path / "q"),
    ])
    assert result.exit_code == 2
    assert "--pipeline" in result.stderr


def test_clean_loop_exits_zero(runner, tmp_path, demo):
    _ok(_run(runner, tmp_path / "edge", demo["model"], demo["pipeline"], demo["images"], "--labels", demo["labels"], "--per-layer"))
    _ok(runner.invoke(cli, [
        "replay", "--edge", str(tmp_path / "edge"), "--model", demo["model"],
        "--pipeline", demo["pipeline"], "--per-layer", "--out", str(tmp_path / "ref"),
    ]))
    result = runner.invoke(cli, [
        "validate", "--edge", str(tmp_path / "edge"), "--ref", str(tmp_path / "ref"),
        "--labels", demo["labels"], "--report", str(tmp_path / "report.json"),
    ])
    assert result.exit_code == 0, result.stdout
    payload = json.loads(result.stdout)
    assert payload["success"] is True
    assert payload["agreement"] == 1.0
    report = ValidationReport.parse_file(tmp_path / "report.json")
    assert report.accuracy.edge_accuracy == 1.0
    assert all(v.verdict.value != "fail" for v in report.assertions)


def test_fault_loop_names_the_layer(runner, tmp_path, demo):
    _ok(runner.invoke(cli, [
        "quantize", "--model", demo["model"], "--calib", demo["images"], "--pipeline", demo["pipeline"],
        "--out", str(tmp_path / "int8"),
    ]))
    _ok(_run(
        runner, tmp_path / "edge", str(tmp_path / "int8"), demo["pipeline"], demo["images"],
        "--per-layer", "--fault", "accumulator=narrow@Conv2D",
    ))
    _ok(runner.invoke(cli, [
        "replay", "--edge", str(tmp_path / "edge"), "--model", demo["model"],
        "--pipeline", demo["pipeline"], "--per-layer", "--out", str(tmp_path / "ref"),
    ]))
    result = runner.invoke(cli, [
        "validate", "--edge", str(tmp_path / "edge"), "--ref", str(tmp_path / "ref"),
        "--force-layers", "--report", str(tmp_path / "report.json"),
    ])
    assert result.exit_code == 1, result.stdout
    report = ValidationReport.parse_file(tmp_path / "report.json")
    assert report.layers.divergence == 1
    assert report.summary["divergence_layer"] == "layer 1 (Conv2D)"


@pytest.mark.parametrize("capture", [[], ["--per-layer"]])
def test_channel_swap_is_reported(runner, tmp_path, demo, capture):
    _ok(_run(runner, tmp_path / "edge", demo["model"], demo["pipeline_ChannelSwap"], demo["images"], *capture))
    _ok(runner.invoke(cli, [
        "replay", "--edge", str(tmp_path / "edge"), "--model", demo["model"],
        "--pipeline", demo["pipeline"], "--out", str(tmp_path / "ref"), *capture,
    ]))
    result = runner.invoke(cli, [
        "validate", "--edge", str(tmp_path / "edge"), "--ref", str(tmp_path / "ref"), "--report", str(tmp_path / "r.json"),
    ])
    assert result.exit_code == 1
    payload = json.loads(result.stdout)
    assert payload["success"] is False
    assert payload["agreement"] < 1.0
    assert payload["divergence_layer"] == "preprocessing"
    assert "channel_order" in payload["failed_assertions"]


def test_external_assertion_in_report(runner, tmp_path, small):
    _ok(_run(runner, tmp_path / "edge", small["model"], small["pipeline"], small["images"]))
    _ok(runner.invoke(cli, [
        "replay", "--edge", str(tmp_path / "edge"), "--model", small["model"],
        "--pipeline", small["pipeline"], "--out", str(tmp_path / "ref"),
    ]))
    script = tmp_path / "lane_check"
    script.write_text("#!/bin/sh\ncat > /dev/null\necho '{\"verdict\": \"pass\", \"evidence\": {\"lanes\": 2}}'\n")
    script.chmod(script.stat().st_mode | stat.S_IXUSR)
    (tmp_path / "assertions.txt").write_text("# site checks\nlane_check\n")
    result = runner.invoke(cli, [
        "validate", "--edge", str(tmp_path / "edge"), "--ref", str(tmp_path / "ref"),
        "--assertions", str(tmp_path / "assertions.txt"), "--report", str(tmp_path / "report.json"),
    ])
    assert result.exit_code == 0, result.stdout
    report = ValidationReport.parse_file(tmp_path / "report.json")
    external = [v for v in report.assertions if v.name == "lane_check"]
    assert external[0].evidence == {"lanes": 2}


def test_inspect_and_layers(runner, tmp_path, small):
    _ok(_run(runner, tmp_path / "edge", small["model"], small["pipeline"], small["images"], "--per-layer"))
    _ok(runner.invoke(cli, [
        "replay", "--edge", str(tmp_path / "edge"), "--model", small["model"],
        "--pipeline", small["pipeline"], "--per-layer", "--out", str(tmp_path / "ref"),
    ]))
    stats = _ok(runner.invoke(cli, ["inspect", "--trace", str(tmp_path / "edge")]))
    assert stats["stats"]["frames"] == 3
    assert stats["manifest"]["capture"] == "PerLayer"

    payload = _ok(runner.invoke(cli, ["layers", "--ref", str(tmp_path / "ref"), "--candidate", str(tmp_path / "edge")]))
    series = payload["series"][str(tmp_path / "edge")]
    assert [row["layer_type"] for row in series] == ["model_input", "Conv2D", "Mean", "FullyConnected"]
    assert all(row["rmse_hat"] < 1e-5 for row in series)


def test_inspect_rejects_broken_trace(runner, tmp_path):
    (tmp_path / "trace").mkdir()
    result = runner.invoke(cli, ["inspect", "--trace", str(tmp_path / "trace")])
    assert result.exit_code == 2
    assert "manifest" in result.stderr


def test_demo_assets(runner, tmp_path):
    payload = _ok(runner.invoke(cli, ["demo-assets", "--out", str(tmp_path / "demo"), "--images", "3"]))
    assert (tmp_path / "demo" / "images" / "img_002.ppm").is_file()
    assert json.loads((tmp_path / "demo" / "pipeline_ChannelSwap.json").read_text())["channel_order"] == "BGR"
    assert payload["labels"].endswith("labels.txt")


@pytest.mark.parametrize(
    "command, flags",
    [
        ("run", ["--model", "--pipeline", "--inputs", "--labels", "--kernels", "--fault", "--per-layer", "--out"]),
        ("quantize", ["--model", "--calib", "--pipeline", "--scheme", "--out"]),
        ("replay", ["--edge", "--model", "--pipeline", "--per-layer", "--allow-int8", "--out"]),
        ("validate", ["--edge", "--ref", "--labels", "--assertions", "--jump-delta", "--report"]),
        ("layers", ["--ref", "--candidate"]),
        ("inspect", ["--trace"]),
        ("demo-assets", ["--out", "--images", "--seed"]),
    ],
)
def test_help_lists_flags(runner, command, flags):
    result = runner.invoke(cli, [command, "--help"])
    assert result.exit_code == 0
    for flag in flags:
        assert flag in result.stdout
