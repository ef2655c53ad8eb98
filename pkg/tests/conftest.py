"""Pytest configuration and shared fixtures."""

import os
import sys
from dataclasses import dataclass

import numpy as np
import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(__file__))
sys.path.insert(0, PROJECT_ROOT)

from genanalysis.config import PipelineConfig
from genanalysis.family import build_family
from genanalysis.generator import FieldSample
from genanalysis.meshing import extract_mesh
from tests.fixtures.sample_families import BLOB_PAIR, CAPSULE_PAIR


@dataclass(frozen=True)
class SphereField:
    """Sphere whose radius grows with the single latent: r(z) = r0 + rate * z."""
    r0: float = 0.5
    rate: float = 0.2
    q: int = 1

    def radius(self, z) -> float:
        return self.r0 + self.rate * float(np.asarray(z).reshape(-1)[0])

    def evaluate(self, points, z) -> FieldSample:
        x = np.atleast_2d(np.asarray(points, dtype=float))
        norm = np.linalg.norm(x, axis=1)
        safe = np.where(norm > 1e-12, norm, 1.0)
        values = norm - self.radius(z)
        grad_x = x / safe[:, None]
        grad_z = np.full((x.shape[0], 1), -self.rate)
        degenerate = norm <= 1e-12
        owner = np.zeros(x.shape[0], dtype=int)
        return FieldSample(values, grad_x, grad_z, degenerate, owner, values[:, None])


@pytest.fixture(scope="session")
def sphere_field() -> SphereField:
    return SphereField()


@pytest.fixture(scope="session")
def sphere_mesh(sphere_field):
    """Coarse mesh of the radius 0.5 sphere."""
    return extract_mesh(sphere_field, np.zeros(1), resolution=24, target_vertices=300, bounds=1.0)


@pytest.fixture(scope="session")
def two_box_family():
    return build_family("two_box")


@pytest.fixture(scope="session")
def capsule_family():
    return build_family(CAPSULE_PAIR)


@pytest.fixture(scope="session")
def capsule_mesh(capsule_family):
    return extract_mesh(
        capsule_family.generator, capsule_family[0].latent, resolution=32, target_vertices=400, bounds=0.8
    )


@pytest.fixture(scope="session")
def blob_family():
    return build_family(BLOB_PAIR)


@pytest.fixture(scope="session")
def blob_mesh(blob_family):
    return extract_mesh(
        blob_family.generator, blob_family[0].latent, resolution=40, target_vertices=600, bounds=0.7
    )


@pytest.fixture
def small_config() -> PipelineConfig:
    """Coarse settings that keep family-level runs fast."""
    return PipelineConfig.model_validate({
        "meshing": {"resolution": 32, "target_vertices": 250, "bounds": 0.8},
        "matching": {"intermediates": 2},
        "pathopt": {"intermediates": 2, "max_iterations": 5, "mode": "l2"},
        "variation": {"modes": 2},
        "coseg": {
            "over_segments": 8,
            "neighbors": 2,
            "candidates": 3,
            "embedding_dim": 3,
            "cluster_range": [2, 2],
        },
        "runtime": {"workers": 2, "seed": 0, "cache_size": 8},
    })
