"""Test suite for interpolation-path optimization."""

import numpy as np
import pytest

from genanalysis.errors import ContractViolation, ExtractionError
from genanalysis.family import build_family
from genanalysis.generator import ground_truth_correspondence
from genanalysis.meshing import extract_mesh
from genanalysis.pathopt import (
    PATH_MODES,
    InterpolationPath,
    PathOptimizer,
    WeightScheme,
    optimize_path,
    pair_energy,
    path_weights,
    weight_at,
)


def test_weight_scheme_from_latents():
    """Test c1 as the median nearest-neighbour latent distance"""
    test = np.array([[0.0, 0.0], [2.0, 0.0], [5.0, 0.0]])
    train = np.array([[0.0, 0.0], [0.0, 1.0], [2.5, 0.0], [7.0, 0.0]])
    scheme = WeightScheme.from_latents(test, train)
    # nearest distinct codes: 1.0, 0.5, 2.0
    assert scheme.c1 == pytest.approx(1.0)
    assert scheme.c2 == pytest.approx(1.0 / 3.0)


def test_weight_scheme_validation():
    """Test invalid radii and identical codes"""
    with pytest.raises(ContractViolation, match="must be positive"):
        WeightScheme(0.0)
    with pytest.raises(ContractViolation, match="distinct latent codes"):
        WeightScheme.from_latents(np.zeros((1, 2)), np.zeros((2, 2)))


def test_weight_profile():
    """Test the weight at, near and beyond c1"""
    scheme = WeightScheme(0.9, base_weight=0.1)
    z0 = np.zeros(2)
    assert weight_at(scheme, z0, z0) == 1.0
    assert weight_at(scheme, np.array([0.3, 0.0]), z0) == pytest.approx(np.exp(-0.3 / (2 * 0.09)))
    assert weight_at(scheme, np.array([1.0, 0.0]), z0) == 0.0

    latents = np.array([[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.5, 0.0]])
    w = path_weights(scheme, latents)
    assert w.shape == (3,)
    assert w[0] == 1.0
    assert w[2] == 0.1


def test_path_argument_validation(sphere_field, sphere_mesh):
    """Test K, mode and weight checks"""
    z_s, z_t = np.zeros(1), np.ones(1)
    with pytest.raises(ContractViolation, match="at least one intermediate"):
        optimize_path(sphere_field, sphere_mesh, z_s, z_t, intermediates=0)
    with pytest.raises(ContractViolation, match="Unknown path mode"):
        optimize_path(sphere_field, sphere_mesh, z_s, z_t, intermediates=1, mode="l1")
    with pytest.raises(ContractViolation, match="Need 2 finite positive"):
        optimize_path(sphere_field, sphere_mesh, z_s, z_t, intermediates=1, weights=[1.0, 0.0])
    with pytest.raises(ContractViolation, match="Need 2 finite positive"):
        optimize_path(sphere_field, sphere_mesh, z_s, z_t, intermediates=1, weights=[1.0])


def test_extraction_failure_names_step(sphere_field, sphere_mesh):
    """Test that a vanishing level set is reported at the right state"""
    with pytest.raises(ExtractionError) as info:
        optimize_path(sphere_field, sphere_mesh, np.zeros(1), np.array([-3.0]), intermediates=1)
    assert info.value.step == 2
    assert info.value.details["step"] == 2


def test_zero_pair_energy_for_rigid_motion(sphere_mesh):
    """Test that translated states cost nothing"""
    start = np.array(sphere_mesh.vertices)
    end = start + np.array([0.1, 0.2, -0.3])
    assert pair_energy(sphere_mesh, start, end, "l2", 1.0, 1.0, 1e-6, 1e-4) < 1e-12
    assert pair_energy(sphere_mesh, start, end, "robust", 1.0, 1.0, 1e-6, 1e-4) < 1e-6


@pytest.mark.parametrize("mode", ["l2", "robust"])
def test_sphere_path_energy_does_not_increase(sphere_field, sphere_mesh, mode):
    """Test monotone energy and states on their level sets"""
    path = optimize_path(
        sphere_field, sphere_mesh, np.zeros(1), np.array([1.0]),
        intermediates=2, mode=mode, max_iterations=4,
    )
    totals = [float(np.dot(path.weights, h)) for h in path.history]
    assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))
    assert path.energy == pytest.approx(totals[-1])
    assert len(path.states) == 4
    for k, state in enumerate(path.states):
        radius = 0.5 + 0.2 * path.latents[k, 0]
        assert np.allclose(np.linalg.norm(state, axis=1), radius, atol=1e-4)


def test_path_manifest_fields():
    """Test the serialized path summary"""
    path = InterpolationPath(
        latents=np.zeros((3, 1)), states=[np.zeros((2, 3))] * 3, weights=np.array([1.0, 2.0]),
        mode="l2", pair_energies=np.array([0.5, 0.25]), history=[[0.5, 0.25]], iterations=1, converged=True,
    )
    manifest = path.to_manifest()
    assert manifest["energy"] == pytest.approx(1.0)
    assert manifest["weights"] == [1.0, 2.0]
    assert manifest["converged"] is True


def test_settings_reach_path_energy(sphere_field, sphere_mesh):
    """Test that regularization scaling and the model reach the pair energies"""
    z_s, z_t = np.zeros(1), np.array([1.0])
    scaled = optimize_path(sphere_field, sphere_mesh, z_s, z_t, intermediates=1, mode="l2", max_iterations=1)
    absolute = optimize_path(
        sphere_field, sphere_mesh, z_s, z_t, intermediates=1, mode="l2", max_iterations=1,
        normalize_regularization=False,
    )
    assert absolute.energy > 10 * scaled.energy
    with pytest.raises(ContractViolation, match="Unknown deformation model"):
        optimize_path(sphere_field, sphere_mesh, z_s, z_t, intermediates=1, model="arap")


def test_edge_residuals_match_l2_energy(sphere_field, sphere_mesh):
    """Test per-edge residuals against the L2 pair energies"""
    path = optimize_path(
        sphere_field, sphere_mesh, np.zeros(1), np.array([1.0]), intermediates=1, mode="l2", max_iterations=1
    )
    optimizer = PathOptimizer(sphere_field, sphere_mesh, path.latents, path.weights, "l2")
    r = optimizer.edge_residuals(path.states)
    assert r.shape == (2, sphere_mesh.edges.shape[0])
    assert np.all(np.sum(r ** 2, axis=1) <= optimizer.pair_energies(path.states) + 1e-12)


def _edge_deviation(gen, mesh, path) -> np.ndarray:
    """|(x_i - x_j) - (t_i - t_j)| at the intermediate states against the per-part affine path."""
    heads, tails = mesh.edges[:, 0], mesh.edges[:, 1]
    deviations = []
    for z, state in zip(path.latents[1:-1], path.states[1:-1]):
        truth = ground_truth_correspondence(gen, mesh.vertices, path.latents[0], z)
        keep = ~(truth.hidden[heads] | truth.hidden[tails])
        diff = (state[heads] - state[tails]) - (truth.points[heads] - truth.points[tails])
        deviations.append(np.linalg.norm(diff, axis=1)[keep])
    return np.concatenate(deviations)


@pytest.mark.slow
def test_robust_path_keeps_parts_affine(two_box_family):
    """Test that the robust path follows the per-part affine motion and cuts at the interface"""
    gen = two_box_family.generator
    z_s, z_t = two_box_family[0].latent, two_box_family[3].latent
    mesh = extract_mesh(gen, z_s, resolution=48, target_vertices=800, bounds=0.8)
    paths = {
        mode: optimize_path(gen, mesh, z_s, z_t, intermediates=2, mode=mode, max_iterations=10)
        for mode in PATH_MODES
    }
    l2 = np.median(_edge_deviation(gen, mesh, paths["l2"]))
    robust = np.median(_edge_deviation(gen, mesh, paths["robust"]))
    assert robust < 0.5 * l2

    path = paths["robust"]
    optimizer = PathOptimizer(gen, mesh, path.latents, path.weights, "robust")
    mass = optimizer.edge_residuals(path.states).sum(axis=0)
    band = ground_truth_correspondence(
        gen, mesh.vertices, z_s, z_s, interface_band=2.0 * mesh.mean_edge_length
    ).blend_zone
    assert mass[band[mesh.edges[:, 0]]].sum() >= 0.8 * mass.sum()


@pytest.mark.slow
def test_pair_weights_favor_first_pair():
    """Test that up-weighting the first pair lowers its non-affine residual"""
    family = build_family("bend")
    gen = family.generator
    z_s, z_t = family[0].latent, family[2].latent
    mesh = extract_mesh(gen, z_s, resolution=48, target_vertices=600, bounds=0.8)
    uniform = optimize_path(gen, mesh, z_s, z_t, intermediates=2, mode="l2", max_iterations=10)
    weighted = optimize_path(
        gen, mesh, z_s, z_t, intermediates=2, mode="l2", weights=[1.0, 0.1, 0.1], max_iterations=10
    )
    assert weighted.pair_energies[0] < uniform.pair_energies[0]
