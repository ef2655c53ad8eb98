"""Test suite for family spec parsing."""

import json

import numpy as np
import pytest

from genanalysis.errors import ContractViolation, SpecParseError
from genanalysis.family import build_family, parse_family
from tests.fixtures.sample_families import BAD_SPECS, CAPSULE_PAIR, KNOB, SAMPLED


@pytest.mark.parametrize("name", ["two_box", "rigid", "bend", "chair"])
def test_bundled_families_build(name):
    """Test that every bundled family parses and has instances"""
    family = build_family(name)
    assert family.name == name
    assert len(family) > 0
    assert family.latents.shape == (len(family), family.generator.q)


def test_build_from_path_and_text(tmp_path):
    """Test the three accepted sources"""
    path = tmp_path / "pair.json"
    path.write_text(CAPSULE_PAIR)
    from_path = build_family(str(path))
    from_text = build_family(CAPSULE_PAIR)
    assert [i.id for i in from_path] == [i.id for i in from_text]
    assert from_text.source_text == CAPSULE_PAIR


def test_latent_axes_accumulate():
    """Test that axis coefficients land in the part's latent map"""
    family = build_family(CAPSULE_PAIR)
    right = family.generator.parts[1]
    assert right.latent_map.shape == (2, 12)
    assert right.latent_map[0, 10] == pytest.approx(0.3)
    assert right.latent_map[1, 4] == pytest.approx(0.4)
    assert family.generator.parts[0].latent_map is None


def test_sampling_is_deterministic():
    """Test seeded instance sampling"""
    a = build_family(SAMPLED)
    b = build_family(SAMPLED)
    assert len(a) == 5
    assert np.array_equal(a.latents, b.latents)
    assert np.all((a.latents[:, 0] >= -1.0) & (a.latents[:, 0] <= 1.0))
    assert np.all((a.latents[:, 1] >= 0.0) & (a.latents[:, 1] <= 0.5))
    assert a[0].id == "sampled_000"


@pytest.mark.parametrize("text,expected", BAD_SPECS)
def test_bad_specs_report_reason(text, expected):
    """Test that malformed specs raise SpecParseError with a line number"""
    with pytest.raises(SpecParseError, match=expected) as info:
        parse_family(text)
    assert info.value.line >= 1
    assert info.value.message.startswith(f"line {info.value.line}:")


def test_unknown_part_in_axis():
    """Test latent axis referencing a missing part"""
    spec = json.loads(KNOB)
    spec["latent_axes"][0]["part"] = "handle"
    with pytest.raises(SpecParseError, match="unknown part 'handle'"):
        parse_family(json.dumps(spec, indent=2))


def test_norm_cap_violation_becomes_parse_error():
    """Test that generator contract failures surface as parse errors"""
    spec = json.loads(KNOB)
    spec["operator_norm_cap"] = 0.5
    with pytest.raises(SpecParseError, match="operator norm"):
        build_family(json.dumps(spec))


def test_missing_spec():
    """Test a source that is neither a file, a bundled name nor JSON"""
    with pytest.raises(SpecParseError, match="family spec not found"):
        build_family("no_such_family")


def test_index_out_of_range():
    """Test family indexing"""
    family = build_family(KNOB)
    assert family[-1].id == "knob_gone"
    with pytest.raises(ContractViolation, match="out of range"):
        family[2]


def test_summary():
    """Test the info summary"""
    summary = build_family(KNOB).summary()
    assert summary["q"] == 1
    assert summary["labels"] == ["body", "knob"]
    assert summary["instances"] == ["knob_full", "knob_gone"]
