"""Shape family specs: JSON documents describing a generator and its instances."""

import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from genanalysis.errors import ContractViolation, SpecParseError
from genanalysis.generator import ImplicitGenerator, PartSpec, quaternion_to_matrix
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

SPEC_VERSION = 1
FAMILIES_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "families")


class PartModel(BaseModel):
    name: str
    kind: str
    half_extents: List[float] = Field(min_length=3, max_length=3)
    rotation: List[float] = Field(default=[1.0, 0.0, 0.0, 0.0], min_length=4, max_length=4)
    translation: List[float] = Field(default=[0.0, 0.0, 0.0], min_length=3, max_length=3)
    label: Optional[str] = None

    @field_validator("kind")
    @classmethod
    def known_kind(cls, v: str) -> str:
        if v not in ("box", "capsule", "cylinder"):
            raise ValueError(f"unknown primitive kind '{v}'")
        return v

    @field_validator("half_extents")
    @classmethod
    def positive_extents(cls, v: List[float]) -> List[float]:
        if any(h <= 0 for h in v):
            raise ValueError("half_extents must be positive")
        return v


class LatentAxisModel(BaseModel):
    part: Union[str, int]
    axis: int = Field(ge=0)
    coefficients: List[float] = Field(min_length=12, max_length=12)


class InstanceModel(BaseModel):
    id: str
    latent: List[float]


class SamplingModel(BaseModel):
    count: int = Field(ge=1)
    seed: int = 0
    ranges: List[List[float]]


class FamilySpecModel(BaseModel):
    version: int
    name: str
    q: int = Field(ge=1)
    blend_radius: float = Field(default=0.02, ge=0.0)
    operator_norm_cap: float = Field(default=2.0, gt=0.0)
    parts: List[PartModel] = Field(min_length=1)
    latent_axes: List[LatentAxisModel] = []
    instances: List[InstanceModel] = []
    sampling: Optional[SamplingModel] = None

    @field_validator("version")
    @classmethod
    def supported_version(cls, v: int) -> int:
        if v != SPEC_VERSION:
            raise ValueError(f"unsupported spec version {v}")
        return v

    @model_validator(mode="after")
    def consistent(self) -> "FamilySpecModel":
        names = [p.name for p in self.parts]
        if len(set(names)) != len(names):
            raise ValueError("part names must be unique")
        for axis in self.latent_axes:
            if isinstance(axis.part, str) and axis.part not in names:
                raise ValueError(f"latent axis refers to unknown part '{axis.part}'")
            if isinstance(axis.part, int) and not 0 <= axis.part < len(names):
                raise ValueError(f"latent axis part index {axis.part} out of range")
            if axis.axis >= self.q:
                raise ValueError(f"latent axis {axis.axis} out of range for q={self.q}")
        for inst in self.instances:
            if len(inst.latent) != self.q:
                raise ValueError(f"instance '{inst.id}' latent has length {len(inst.latent)}, expected {self.q}")
        if not self.instances and self.sampling is None:
            raise ValueError("spec needs either instances or a sampling block")
        if self.sampling is not None and len(self.sampling.ranges) != self.q:
            raise ValueError("sampling ranges must have one [lo, hi] pair per latent axis")
        return self


@dataclass(frozen=True)
class ShapeInstance:
    """One shape of a family: a latent code of the shared generator."""
    id: str
    generator: ImplicitGenerator
    latent: np.ndarray


@dataclass(frozen=True)
class ShapeFamily:
    name: str
    generator: ImplicitGenerator
    instances: Tuple[ShapeInstance, ...]
    source_text: str = ""

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def __getitem__(self, i: int) -> ShapeInstance:
        if not -len(self.instances) <= i < len(self.instances):
            raise ContractViolation(
                f"Shape index {i} out of range for family of {len(self.instances)}", {"index": i}
            )
        return self.instances[i]

    @property
    def latents(self) -> np.ndarray:
        return np.stack([inst.latent for inst in self.instances])

    def summary(self) -> Dict[str, Any]:
        gen = self.generator
        return {
            "name": self.name,
            "q": gen.q,
            "blend_radius": gen.blend_radius,
            "parts": [{"name": p.name, "kind": p.kind, "label": p.label} for p in gen.parts],
            "labels": gen.label_names,
            "instances": [inst.id for inst in self.instances],
        }


def _locate_line(text: str, loc: Sequence[Any]) -> int:
    """Best-effort line number of a validation error location."""
    pos = 0
    for key in loc:
        if isinstance(key, str):
            idx = text.find(f'"{key}"', pos)
            if idx >= 0:
                pos = idx
    return text.count("\n", 0, pos) + 1


def parse_family(text: str) -> FamilySpecModel:
    """
    Parse and validate a family spec document.

    Raises:
        SpecParseError: On malformed JSON or schema violations, with a line number
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecParseError(e.msg, line=e.lineno)
    if not isinstance(raw, dict):
        raise SpecParseError("spec must be a JSON object", line=1)
    try:
        return FamilySpecModel.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        loc = [str(part) if not isinstance(part, int) else part for part in first["loc"]]
        message = f"{'.'.join(str(p) for p in loc) or 'spec'}: {first['msg']}"
        raise SpecParseError(message, line=_locate_line(text, loc), details={"errors": len(e.errors())})


def _build_generator(model: FamilySpecModel) -> ImplicitGenerator:
    names = [p.name for p in model.parts]
    maps = {name: np.zeros((model.q, 12)) for name in names}
    touched = set()
    for axis in model.latent_axes:
        name = axis.part if isinstance(axis.part, str) else names[axis.part]
        maps[name][axis.axis] += np.asarray(axis.coefficients, dtype=float)
        touched.add(name)

    parts = []
    for p in model.parts:
        parts.append(PartSpec(
            name=p.name,
            kind=p.kind,
            half_extents=np.asarray(p.half_extents, dtype=float),
            rotation=quaternion_to_matrix(p.rotation),
            translation=np.asarray(p.translation, dtype=float),
            latent_map=maps[p.name] if p.name in touched else None,
            label=p.label or p.name,
        ))
    return ImplicitGenerator(
        parts=tuple(parts),
        q=model.q,
        blend_radius=model.blend_radius,
        operator_norm_cap=model.operator_norm_cap,
    )


def build_family(source: str) -> ShapeFamily:
    """
    Build a shape family from a spec file path, a bundled family name, or raw JSON text.

    Args:
        source: Path to a spec file, name of a file in families/, or the JSON document itself

    Returns:
        ShapeFamily sharing one generator across its instances

    Raises:
        SpecParseError: If the family spec is malformed
    """
    text = _read_source(source)
    model = parse_family(text)
    try:
        gen = _build_generator(model)
    except ContractViolation as e:
        raise SpecParseError(e.message, line=_locate_line(text, ["parts"]), details=e.details)

    instances = [
        ShapeInstance(inst.id, gen, np.asarray(inst.latent, dtype=float)) for inst in model.instances
    ]
    if model.sampling is not None:
        rng = np.random.default_rng(model.sampling.seed)
        ranges = np.asarray(model.sampling.ranges, dtype=float)
        for k in range(model.sampling.count):
            z = rng.uniform(ranges[:, 0], ranges[:, 1])
            instances.append(ShapeInstance(f"{model.name}_{k:03d}", gen, z))

    logger.info(f"Built family '{model.name}': {len(gen.parts)} parts, q={gen.q}, {len(instances)} instances")
    return ShapeFamily(model.name, gen, tuple(instances), text)


def _read_source(source: str) -> str:
    if source.lstrip().startswith("{"):
        return source
    if os.path.exists(source):
        with open(source, "r", encoding="utf-8") as f:
            return f.read()
    bundled = os.path.join(FAMILIES_DIR, source if source.endswith(".json") else f"{source}.json")
    if os.path.exists(bundled):
        with open(bundled, "r", encoding="utf-8") as f:
            return f.read()
    raise SpecParseError(f"family spec not found: {source}", line=0)
