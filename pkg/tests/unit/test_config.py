"""Test suite for pipeline configuration."""

import json

import pytest

from genanalysis.config import (
    CONFIG_ENV,
    PipelineConfig,
    apply_overrides,
    field_provenance,
    load_config,
    save_config,
)
from genanalysis.errors import ConfigError


def test_defaults():
    """Test default values come from the module constants"""
    config = PipelineConfig()
    assert config.version == 1
    assert config.aaap.model == "aaap"
    assert config.pathopt.mode == "robust"
    assert config.coseg.cluster_range == (2, 10)
    assert config.runtime.workers == 1


def test_save_and_load(tmp_path):
    """Test that a saved config loads back equal"""
    config = apply_overrides(PipelineConfig(), ["coseg.balance=3.5", "aaap.model=acap"])
    path = save_config(config, str(tmp_path / "cfg" / "config.json"))
    loaded = load_config(path)
    assert loaded == config
    assert loaded.canonical_json() == config.canonical_json()


def test_load_toml(tmp_path):
    """Test TOML config files"""
    path = tmp_path / "config.toml"
    path.write_text('[meshing]\nresolution = 40\n\n[coseg]\ncluster_range = [3, 5]\n')
    config = load_config(str(path))
    assert config.meshing.resolution == 40
    assert config.coseg.cluster_range == (3, 5)


def test_env_var_selects_file(tmp_path, monkeypatch):
    """Test that GENANALYSIS_CONFIG is used when no path is given"""
    path = tmp_path / "env.json"
    path.write_text(json.dumps({"runtime": {"seed": 42}}))
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert load_config().runtime.seed == 42
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config().runtime.seed == 0


def test_load_errors(tmp_path):
    """Test missing, malformed and invalid files"""
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="Could not parse"):
        load_config(str(broken))
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"meshing": {"resolution": 2}}))
    with pytest.raises(ConfigError, match="Invalid configuration") as info:
        load_config(str(invalid))
    assert info.value.details["errors"]
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"meshing": {"resolutoin": 40}}))
    with pytest.raises(ConfigError):
        load_config(str(unknown))


def test_overrides_parse_values():
    """Test JSON parsing of override values"""
    config = apply_overrides(PipelineConfig(), [
        "pathopt.intermediates=7",
        "coseg.cluster_range=[2,4]",
        "aaap.normalize_regularization=false",
        "variation.weighting=exclude",
    ])
    assert config.pathopt.intermediates == 7
    assert config.coseg.cluster_range == (2, 4)
    assert config.aaap.normalize_regularization is False
    assert config.variation.weighting == "exclude"


@pytest.mark.parametrize("override,message", [
    ("resolution=3", "section.key=value"),
    ("meshing.resolution", "section.key=value"),
    ("mesh.resolution=3", "Unknown config section"),
    ("meshing.size=3", "Unknown config key"),
    ("meshing.resolution=2", "Invalid configuration"),
    ("aaap.model=arap", "Invalid configuration"),
    ("coseg.cluster_range=[5,2]", "Invalid configuration"),
    ("pathopt.mode=l1", "Invalid configuration"),
])
def test_bad_overrides(override, message):
    """Test override errors"""
    with pytest.raises(ConfigError, match=message):
        apply_overrides(PipelineConfig(), [override])


def test_config_is_frozen():
    """Test that sections cannot be mutated in place"""
    config = PipelineConfig()
    with pytest.raises(Exception):
        config.meshing.resolution = 10


def test_field_provenance():
    """Test that every field carries a provenance tag"""
    tags = field_provenance()
    assert tags["aaap.mu_r"] == "method"
    assert tags["runtime.workers"] == "artifact"
    assert set(tags.values()) <= {"method", "artifact"}
    assert "coseg.balance" in tags
