"""Pipeline configuration: pydantic sections, file loading and CLI overrides."""

import json
import os
import tomllib
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from genanalysis.aaap import AAAP_DEFAULTS
from genanalysis.coseg import COSEG_DEFAULTS
from genanalysis.errors import ConfigError
from genanalysis.generator import GENERATOR_TOLERANCES
from genanalysis.matching import MATCHING_DEFAULTS
from genanalysis.meshing import MESHING_DEFAULTS
from genanalysis.pathopt import PATH_MODES, PATHOPT_DEFAULTS
from genanalysis.variation import VARIATION_DEFAULTS
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

load_dotenv()

CONFIG_VERSION = 1
CONFIG_ENV = "GENANALYSIS_CONFIG"


def _field(default: Any, description: str, provenance: str = "artifact", **kwargs) -> Any:
    return Field(default, description=description, json_schema_extra={"provenance": provenance}, **kwargs)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GeneratorSection(_Section):
    surface_tolerance: float = _field(GENERATOR_TOLERANCES["surface"], "|g| accepted as on-surface by the oracle", gt=0)
    tie_tolerance: float = _field(1e-6, "Part-value gap below which the oracle reports a tie", gt=0)
    interface_band_edges: float = _field(2.0, "Oracle interface band in mean edge lengths", ge=0)


class MeshingSection(_Section):
    resolution: int = _field(MESHING_DEFAULTS["resolution"], "Marching cubes grid resolution per axis", ge=8)
    bounds: float = _field(MESHING_DEFAULTS["bounds"], "Half width of the sampling box", gt=0)
    target_vertices: int = _field(MESHING_DEFAULTS["target_vertices"], "Approximate vertex count after decimation", "method", ge=4)
    projection_tolerance: float = _field(MESHING_DEFAULTS["projection_tolerance"], "Newton projection stop on |g|", gt=0)


class AAAPSection(_Section):
    mu_r: float = _field(AAAP_DEFAULTS["mu_r"], "Scale regularization weight", "method", ge=0)
    mu_s: float = _field(AAAP_DEFAULTS["mu_s"], "Anisotropic regularization weight", "method", ge=0)
    reference_scale: float = _field(AAAP_DEFAULTS["reference_scale"], "Regularization unit in squared mean edge lengths", gt=0)
    normalize_regularization: bool = _field(True, "Scale regularization by the mean edge length")
    mu_rel: float = _field(AAAP_DEFAULTS["mu_rel"], "KKT diagonal shift relative to mean diag(L)", ge=0)
    robust_delta: float = _field(AAAP_DEFAULTS["robust_delta"], "Smoothing of the robust edge norm", gt=0)
    directions: int = _field(AAAP_DEFAULTS["directions"], "Sphere directions for the regularizer estimate", ge=1)
    model: str = _field("aaap", "Deformation model: aaap or acap")

    @model_validator(mode="after")
    def _check_model(self):
        if self.model not in ("aaap", "acap"):
            raise ValueError(f"model must be 'aaap' or 'acap', got '{self.model}'")
        return self


class PathOptSection(_Section):
    intermediates: int = _field(PATHOPT_DEFAULTS["intermediates"], "Intermediate shapes K", "method", ge=1)
    mode: str = _field("robust", "Pair energy: l2 or robust", "method")
    max_iterations: int = _field(PATHOPT_DEFAULTS["max_iterations"], "Outer iteration cap", ge=1)
    tolerance: float = _field(PATHOPT_DEFAULTS["tolerance"], "Relative energy decrease that stops the loop", gt=0)
    irls_eps: float = _field(PATHOPT_DEFAULTS["irls_eps"], "IRLS residual floor", gt=0)
    backtracking: int = _field(PATHOPT_DEFAULTS["backtracking"], "Step halvings before giving up", ge=0)
    base_weight: float = _field(PATHOPT_DEFAULTS["base_weight"], "Weight floor for pairs far from the shape of interest", "method", ge=0, le=1)

    @model_validator(mode="after")
    def _check_mode(self):
        if self.mode not in PATH_MODES:
            raise ValueError(f"mode must be one of {PATH_MODES}, got '{self.mode}'")
        return self


class VariationSection(_Section):
    modes: int = _field(VARIATION_DEFAULTS["modes"], "Number of smallest modes", "method", ge=1)
    weighting: str = _field(VARIATION_DEFAULTS["weighting"], "Eigenvalue handling: floor or exclude")
    eigen_floor: float = _field(VARIATION_DEFAULTS["eigen_floor"], "Relative eigenvalue floor", gt=0)

    @model_validator(mode="after")
    def _check_weighting(self):
        if self.weighting not in ("floor", "exclude"):
            raise ValueError(f"weighting must be 'floor' or 'exclude', got '{self.weighting}'")
        return self


class MatchingSection(_Section):
    intermediates: int = _field(MATCHING_DEFAULTS["intermediates"], "Propagation steps K", "method", ge=1)
    projection_iterations: int = _field(MATCHING_DEFAULTS["projection_iterations"], "Projection iterations per step", ge=1)
    unmatched_fraction: float = _field(MATCHING_DEFAULTS["unmatched_fraction"], "Unmatched threshold on |g| in bbox diagonals", gt=0)
    pck_thresholds: Tuple[float, ...] = _field(MATCHING_DEFAULTS["pck_thresholds"], "Keypoint PCK thresholds", "method")


class CosegSection(_Section):
    over_segments: int = _field(COSEG_DEFAULTS["over_segments"], "Over-segments per shape m", "method", ge=1)
    neighbors: int = _field(COSEG_DEFAULTS["neighbors"], "Similarity-graph neighbours per shape", "method", ge=1)
    candidates: int = _field(COSEG_DEFAULTS["candidates"], "Latent-space candidates per shape", ge=1)
    balance: float = _field(COSEG_DEFAULTS["balance"], "Correspondence block weight lambda", "method", ge=0)
    embedding_dim: int = _field(COSEG_DEFAULTS["embedding_dim"], "Spectral embedding dimension L", "method", ge=1)
    cluster_range: Tuple[int, int] = _field(COSEG_DEFAULTS["cluster_range"], "Inclusive range of cluster counts")
    scaling: str = _field(COSEG_DEFAULTS["scaling"], "Embedding column scaling: all or last")
    radius: str = _field(COSEG_DEFAULTS["radius"], "FPS radius definition: covering or diameter")

    @model_validator(mode="after")
    def _check_choices(self):
        if self.cluster_range[0] < 2 or self.cluster_range[1] < self.cluster_range[0]:
            raise ValueError(f"cluster_range must satisfy 2 <= min <= max, got {self.cluster_range}")
        if self.scaling not in ("all", "last"):
            raise ValueError(f"scaling must be 'all' or 'last', got '{self.scaling}'")
        if self.radius not in ("covering", "diameter"):
            raise ValueError(f"radius must be 'covering' or 'diameter', got '{self.radius}'")
        return self


class RuntimeSection(_Section):
    workers: int = _field(1, "Worker threads for per-shape and per-pair stages", ge=1)
    seed: int = _field(0, "Seed for every randomized step")
    cache_size: int = _field(32, "Per-shape analyses kept in memory", ge=1)


class PipelineConfig(_Section):
    version: int = _field(CONFIG_VERSION, "Configuration format version")
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    meshing: MeshingSection = Field(default_factory=MeshingSection)
    aaap: AAAPSection = Field(default_factory=AAAPSection)
    pathopt: PathOptSection = Field(default_factory=PathOptSection)
    variation: VariationSection = Field(default_factory=VariationSection)
    matching: MatchingSection = Field(default_factory=MatchingSection)
    coseg: CosegSection = Field(default_factory=CosegSection)
    runtime: RuntimeSection = Field(default_factory=RuntimeSection)

    @model_validator(mode="after")
    def _check_version(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"Unsupported config version {self.version}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def _validate(data: Dict[str, Any], source: str) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in {source}", {"errors": e.errors(include_url=False)}) from e


def load_config(path: Optional[str] = None) -> PipelineConfig:
    """
    Load a JSON or TOML config.

    With no path, GENANALYSIS_CONFIG is consulted; with neither, defaults are used.
    """
    path = path or os.getenv(CONFIG_ENV)
    if not path:
        return PipelineConfig()
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.endswith(".toml"):
            with open(path, "rb") as f:
                data = tomllib.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Could not parse config {path}: {e}") from e
    logger.debug(f"Loaded config from {path}")
    return _validate(data, path)


def save_config(config: PipelineConfig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.canonical_json())
    return path


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: PipelineConfig, overrides: List[str]) -> PipelineConfig:
    """Apply `section.key=value` overrides; values are parsed as JSON when possible."""
    data = config.model_dump(mode="json")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"Override must look like section.key=value, got '{item}'")
        if section not in data or not isinstance(data[section], dict):
            raise ConfigError(f"Unknown config section '{section}'")
        if name not in data[section]:
            raise ConfigError(f"Unknown config key '{section}.{name}'")
        data[section][name] = _parse_value(raw.strip())
    return _validate(data, "overrides")


def field_provenance() -> Dict[str, str]:
    """Map section.key to its provenance tag."""
    tags = {}
    for section, info in PipelineConfig.model_fields.items():
        model = info.annotation
        if not isinstance(model, type) or not issubclass(model, BaseModel):
            continue
        for name, sub in model.model_fields.items():
            extra = sub.json_schema_extra or {}
            tags[f"{section}.{name}"] = extra.get("provenance", "artifact")
    return tags
