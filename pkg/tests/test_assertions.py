import os
import stat

import numpy as np
import pytest

from exray.align import align
from exray.assertions import (
    _verdict,
    assert_channel_order,
    assert_normalization,
    assert_quant_resolution,
    assert_resize,
    assert_rotation,
    channel_name,
    check_channel_order,
    check_normalization,
    check_resize,
    check_rotation,
    fold_verdicts,
    load_assertion_file,
    run_assertions,
    run_external,
)
from exray.errors import AssertionPluginError
from exray.imgproc import BugFamily, Image, image_to_tensor, inject_bug, run_pipeline
from exray.models import Capture, Resizer, ResolverKind, VerdictStatus
from exray.playback import playback_dataset, playback_tensors, replay
from exray.quantizer import quantize_graph
from exray.runtime import KernelResolver
from exray.synth import GraphBuilder, constant_image, random_tensors, textured_image
from exray.tensor import Tensor

PASS, FAIL, INAPPLICABLE = VerdictStatus.PASS, VerdictStatus.FAIL, VerdictStatus.INAPPLICABLE


@pytest.fixture
def square(pipeline):
    return pipeline.copy(update={"target_h": 8, "target_w": 8})


@pytest.fixture
def graph():
    builder = GraphBuilder("tiny", (8, 8, 3), seed=2)
    builder.conv(4, kernel=1)
    builder.mean()
    return builder.build()


@pytest.fixture
def traces(tmp_path, image_dir, graph, pipeline):
    edge = playback_dataset(image_dir, graph, pipeline, tmp_path / "edge")
    ref = replay(edge, graph, pipeline, tmp_path / "ref")
    return align(edge, ref)


def _buggy_traces(tmp_path, image_dir, graph, pipeline, family):
    edge = playback_dataset(image_dir, graph, inject_bug(pipeline, family), tmp_path / family.value)
    ref = replay(edge, graph, pipeline, tmp_path / f"{family.value}_ref")
    return align(edge, ref)


def _script(path, body):
    path.write_text("#!/bin/sh\n" + body + "\n")
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return path


### CHANNEL ORDER ###

def test_channel_order_identical_passes(rng):
    x = rng.uniform(-1, 1, (4, 4, 3))
    assert check_channel_order(x, x.copy()).verdict == PASS


def test_channel_order_names_the_swap(rng):
    ref = rng.uniform(-1, 1, (4, 4, 3))
    verdict = check_channel_order(ref[..., [2, 1, 0]], ref)
    assert verdict.verdict == FAIL
    assert verdict.cause == "BGR->RGB"
    assert verdict.evidence["permutation"] == [2, 1, 0]


def test_channel_order_noise_is_inapplicable(rng):
    ref = rng.uniform(-1, 1, (4, 4, 3))
    assert check_channel_order(ref + rng.normal(0, 0.1, ref.shape), ref).verdict == INAPPLICABLE


def test_channel_order_shape_mismatch_is_inapplicable(rng):
    assert check_channel_order(np.zeros((4, 4, 3)), np.zeros((3, 4, 3))).verdict == INAPPLICABLE


def test_channel_name():
    assert channel_name([2, 1, 0]) == "BGR->RGB"
    assert channel_name([1, 0, 2]) == "GRB->RGB"


### NORMALIZATION ###

def test_normalization_identical_passes(rng):
    x = rng.uniform(0, 1, (4, 4, 3))
    verdict = check_normalization(x, x.copy())
    assert verdict.verdict == PASS
    assert verdict.evidence["a"] == pytest.approx(1.0)
    assert verdict.evidence["b"] == pytest.approx(0.0, abs=1e-9)


def test_normalization_recovers_affine_map(rng):
    edge = rng.uniform(0, 1, (4, 4, 3))
    verdict = check_normalization(edge, 2 * edge - 1)
    assert verdict.verdict == FAIL
    assert verdict.evidence["a"] == pytest.approx(2.0)
    assert verdict.evidence["b"] == pytest.approx(-1.0)
    assert verdict.evidence["implied_edge_range"] == pytest.approx([0.0, 1.0], abs=0.05)


def test_normalization_channel_swap_is_not_affine(rng):
    ref = rng.uniform(-1, 1, (6, 6, 3))
    verdict = check_normalization(ref[..., [2, 1, 0]], ref)
    assert verdict.verdict == INAPPLICABLE
    assert verdict.cause == "not an affine map"


def test_normalization_constant_is_inapplicable():
    assert check_normalization(np.ones((2, 2, 3)), np.ones((2, 2, 3))).verdict == INAPPLICABLE


### RESIZE AND ROTATION ###

def test_resize_matching_resizer_passes(rng, pipeline):
    image = textured_image(16, 12, rng)
    edge = run_pipeline(image, pipeline).array
    assert check_resize(image_to_tensor(image), edge, pipeline, pipeline).verdict == PASS


def test_resize_names_the_edge_resizer(rng, pipeline):
    image = textured_image(16, 12, rng)
    bilinear = pipeline.copy(update={"resizer": Resizer.BILINEAR})
    verdict = check_resize(image_to_tensor(image), run_pipeline(image, bilinear).array, bilinear, pipeline)
    assert verdict.verdict == FAIL
    assert verdict.cause == "Bilinear"


def test_resize_constant_image_passes(pipeline):
    image = constant_image(16, 12, 90)
    bilinear = pipeline.copy(update={"resizer": Resizer.BILINEAR})
    verdict = check_resize(image_to_tensor(image), run_pipeline(image, bilinear).array, bilinear, pipeline)
    assert verdict.verdict == PASS
    assert set(verdict.evidence["matches"]) == {"Bilinear", "AreaAverage"}


def test_rotation_matching_passes(rng, square):
    image = textured_image(8, 8, rng)
    assert check_rotation(image_to_tensor(image), run_pipeline(image, square).array, square, square).verdict == PASS


def test_rotation_names_the_edge_rotation(rng, square):
    image = textured_image(8, 8, rng)
    rotated = square.copy(update={"rotation": 90})
    verdict = check_rotation(image_to_tensor(image), run_pipeline(image, rotated).array, rotated, square)
    assert verdict.verdict == FAIL
    assert verdict.cause == "90"


def test_rotation_of_symmetric_image_passes(rng, square):
    half = rng.integers(0, 128, (8, 8, 3))
    image = Image((half + half[::-1, ::-1]).astype(np.uint8))
    rotated = square.copy(update={"rotation": 180})
    verdict = check_rotation(image_to_tensor(image), run_pipeline(image, rotated).array, rotated, square)
    assert verdict.verdict == PASS
    assert 0 in verdict.evidence["matches"] and 180 in verdict.evidence["matches"]


### TRACE LEVEL ###

def test_clean_traces_pass_preprocessing(traces):
    for assertion in (assert_channel_order, assert_normalization, assert_resize, assert_rotation):
        assert assertion(traces).verdict == PASS
    assert assert_quant_resolution(traces).verdict == INAPPLICABLE


@pytest.mark.parametrize(
    "family, failing, cause",
    [
        (BugFamily.CHANNEL_SWAP, assert_channel_order, "BGR->RGB"),
        (BugFamily.NORMALIZATION_RANGE, assert_normalization, None),
        (BugFamily.RESIZER, assert_resize, "Bilinear"),
        (BugFamily.ROTATION, assert_rotation, "90"),
    ],
)
def test_injected_bug_is_named(tmp_path, image_dir, graph, pipeline, family, failing, cause):
    aligned = _buggy_traces(tmp_path, image_dir, graph, pipeline, family)
    verdict = failing(aligned)
    assert verdict.verdict == FAIL
    assert verdict.evidence["failed_frames"] == 3
    if cause is not None:
        assert verdict.cause == cause


def test_quant_resolution_passes_with_covering_calibration(tmp_path, rng):
    builder = GraphBuilder("identity", (4, 4, 2))
    builder.conv(2, kernel=1, weights=np.eye(2).reshape(2, 1, 1, 2), bias=np.zeros(2))
    graph = builder.build()
    frames = random_tensors((4, 4, 2), 4, rng)
    aligned = _quant_traces(tmp_path, graph, frames, list(frames.values()))
    verdict = assert_quant_resolution(aligned)
    assert verdict.verdict == PASS
    assert verdict.evidence["layers"][0]["steps"] >= 100


def test_quant_resolution_flags_outlier_calibration(tmp_path, rng):
    builder = GraphBuilder("identity", (4, 4, 2))
    builder.conv(2, kernel=1, weights=np.eye(2).reshape(2, 1, 1, 2), bias=np.zeros(2))
    graph = builder.build()
    frames = random_tensors((4, 4, 2), 4, rng)
    outlier = rng.uniform(-1, 1, (4, 4, 2))
    outlier[0, 0, 0] = 100.0
    aligned = _quant_traces(tmp_path, graph, frames, [Tensor.f32(outlier)])
    verdict = assert_quant_resolution(aligned)
    assert verdict.verdict == FAIL
    assert verdict.cause.startswith("resolution")
    assert verdict.evidence["failing_layers"] == [1]


def test_quant_resolution_flags_clipping(tmp_path, rng):
    builder = GraphBuilder("identity", (4, 4, 2))
    builder.conv(2, kernel=1, weights=np.eye(2).reshape(2, 1, 1, 2), bias=np.zeros(2))
    graph = builder.build()
    frames = random_tensors((4, 4, 2), 4, rng)
    narrow = list(random_tensors((4, 4, 2), 4, rng, lo=-0.5, hi=0.5).values())
    verdict = assert_quant_resolution(_quant_traces(tmp_path, graph, frames, narrow))
    assert verdict.verdict == FAIL
    assert "clipping" in verdict.cause
    assert verdict.evidence["layers"][0]["clipped_fraction"] > 0.1


def _quant_traces(tmp_path, graph, frames, calibration):
    quantized = quantize_graph(graph, calibration)
    resolver = KernelResolver(ResolverKind.REFERENCE)
    edge = playback_tensors(frames, quantized, tmp_path / "q_edge", resolver, Capture.PER_LAYER)
    ref = playback_tensors(frames, graph, tmp_path / "q_ref", resolver, Capture.PER_LAYER, run_kind="reference")
    return align(edge, ref)


### FOLDING ###

def test_fold_verdicts():
    ok = _verdict("x", PASS, [])
    skip = _verdict("x", INAPPLICABLE, [], "no data")
    bad = _verdict("x", FAIL, [], "broken", detail=1)
    failed = fold_verdicts("x", [], {"a": ok, "b": bad, "c": bad})
    assert failed.verdict == FAIL
    assert failed.cause == "broken"
    assert failed.evidence["failed_frames"] == 2
    assert failed.evidence["first_frame"] == "b"
    assert fold_verdicts("x", [], {"a": ok, "b": skip}).verdict == PASS
    assert fold_verdicts("x", [], {"a": skip}).cause == "no data"
    assert fold_verdicts("x", [], {}).verdict == INAPPLICABLE


### EXTERNAL ###

def test_external_assertion_verdict(tmp_path, traces):
    script = _script(tmp_path / "lane_check", 'cat > /dev/null\necho "{\\"verdict\\": \\"fail\\", \\"cause\\": \\"$1\\"}"')
    verdict = run_external(script, traces)
    assert verdict.name == "lane_check"
    assert verdict.verdict == FAIL
    assert verdict.cause == str(traces.edge.directory)


def test_external_assertion_receives_frames(tmp_path, traces):
    script = _script(tmp_path / "frames", 'grep -q img_002.ppm && echo \'{"name": "frames", "verdict": "pass"}\'')
    assert run_external(script, traces).verdict == PASS


@pytest.mark.parametrize("body", ["exit 3", "echo not json", 'echo \'{"verdict": "maybe"}\''])
def test_broken_external_assertion_is_inapplicable(tmp_path, traces, body):
    verdict = run_external(_script(tmp_path / "broken", body), traces)
    assert verdict.verdict == INAPPLICABLE
    assert verdict.name == "broken"
    assert "error" in verdict.evidence


def test_run_assertions_appends_external(tmp_path, traces):
    script = _script(tmp_path / "always", "echo '{\"verdict\": \"pass\"}'")
    verdicts = run_assertions(traces, [script])
    assert [v.name for v in verdicts] == [
        "channel_order", "normalization", "resize", "rotation", "quant_resolution", "always",
    ]


def test_load_assertion_file(tmp_path):
    _script(tmp_path / "one", "exit 0")
    second = _script(tmp_path / "two", "exit 0")
    listing = tmp_path / "assertions.txt"
    listing.write_text(f"# checks\none\n\n{second}\n")
    assert load_assertion_file(listing) == [tmp_path / "one", second]


def test_load_assertion_file_rejects_non_executables(tmp_path):
    (tmp_path / "plain").write_text("not a script")
    os.chmod(tmp_path / "plain", 0o644)
    listing = tmp_path / "assertions.txt"
    listing.write_text("plain\n")
    with pytest.raises(AssertionPluginError) as excinfo:
        load_assertion_file(listing)
    assert "line 1" in excinfo.value.detail
    with pytest.raises(AssertionPluginError):
        load_assertion_file(tmp_path / "missing.txt")
