"""Test suite for run manifests and CLI responses."""

import io
import json
import os

import numpy as np

from genanalysis.config import PipelineConfig
from genanalysis.manifest import RunManifest, sha256_text, write_json_atomic
from genanalysis.utils.responses import (
    EXIT_FAILURE,
    error_response,
    metrics_summary,
    success_response,
    to_jsonable,
)


def test_manifest_hashes_inputs():
    """Test spec and config hashes"""
    config = PipelineConfig()
    manifest = RunManifest.start("extract", "{}", config, spec="two_box", sizes=np.array([1, 2]))
    assert manifest.spec_sha256 == sha256_text("{}")
    assert manifest.config_sha256 == sha256_text(config.canonical_json())
    assert manifest.config["runtime"]["seed"] == 0
    assert manifest.parameters == {"spec": "two_box", "sizes": [1, 2]}


def test_config_hash_changes_with_values():
    """Test that any config change changes the hash"""
    a = RunManifest.start("x", config=PipelineConfig())
    b = RunManifest.start("x", config=PipelineConfig.model_validate({"runtime": {"seed": 1}}))
    assert a.config_sha256 != b.config_sha256


def test_stage_timing_and_write(tmp_path):
    """Test stage records, outputs, metrics and the atomic write"""
    manifest = RunManifest.start("coseg")
    with manifest.stage("cluster"):
        pass
    manifest.add_output(str(tmp_path / "labels.json"))
    manifest.add_metrics({"mean_iou": np.float64(0.123456789), "clusters": np.int64(3)})
    path = manifest.write(str(tmp_path / "run" / "manifest.json"))

    data = json.loads(open(path, encoding="utf-8").read())
    assert [s["name"] for s in data["stages"]] == ["cluster"]
    assert data["stages"][0]["seconds"] >= 0
    assert data["metrics"] == {"mean_iou": 0.123457, "clusters": 3}
    assert data["outputs"] == [os.path.abspath(str(tmp_path / "labels.json"))]
    assert [f for f in os.listdir(tmp_path / "run") if f.startswith(".manifest-")] == []


def test_stage_recorded_on_failure():
    """Test that a failing stage is still timed"""
    manifest = RunManifest.start("path")
    try:
        with manifest.stage("optimize"):
            raise RuntimeError("boom")
    except RuntimeError:
        pass
    assert manifest.stages[0].name == "optimize"


def test_write_json_atomic(tmp_path):
    """Test numpy-aware JSON output"""
    path = write_json_atomic({"a": np.arange(3), 1: np.float32(0.5)}, str(tmp_path / "out.json"))
    assert json.loads(open(path, encoding="utf-8").read()) == {"a": [0, 1, 2], "1": 0.5}


def test_responses():
    """Test success and error documents"""
    out = io.StringIO()
    assert success_response({"b": np.int64(2), "a": 1}, stream=out) == 0
    assert out.getvalue() == '{"a": 1, "b": 2}\n'

    err = io.StringIO()
    code = error_response("bad index", EXIT_FAILURE, {"index": 9}, "ContractViolation", stream=err)
    assert code == 1
    payload = json.loads(err.getvalue())
    assert payload == {"error": "bad index", "type": "ContractViolation", "exit_code": 1, "details": {"index": 9}}


def test_jsonable_and_summary():
    """Test conversion helpers"""
    assert to_jsonable((np.int32(1), [np.bool_(True)])) == [1, [True]]
    assert metrics_summary({"x": 1.23456789, "y": "z"}) == {"x": 1.234568, "y": "z"}
