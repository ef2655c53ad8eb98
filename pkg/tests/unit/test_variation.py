"""Test suite for variation modes, local affine fits and the distance matrix."""

import numpy as np
import pytest
from scipy import sparse
from sklearn.metrics import rand_score

from genanalysis.aaap import DisplacementSolver, assemble_system, constraint_matrices
from genanalysis.coseg import over_segment
from genanalysis.errors import ContractViolation, GenAnalysisError
from genanalysis.meshing import extract_mesh
from genanalysis.variation import (
    DistanceMatrix,
    VariationModes,
    compute_modes,
    distance_matrix,
    fit_all,
    local_affine_fit,
    read_matrix,
    write_matrix,
)


def _affine_field(mesh, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    b = rng.normal(size=3)
    return mesh.vertices @ A.T + b, A, b


def test_modes_sorted_and_weighted():
    """Test eigen-decomposition of M^T L M"""
    rng = np.random.default_rng(0)
    M = rng.normal(size=(30, 3))
    modes = compute_modes(M, sparse.identity(30, format="csr"), n_modes=3)
    assert np.all(np.diff(modes.eigenvalues) >= 0)
    assert np.allclose(modes.eigenvalues, np.linalg.eigvalsh(M.T @ M))
    assert modes.weights[0] == pytest.approx(1.0)
    assert np.all(np.diff(modes.weights) <= 0)
    assert np.allclose(modes.eigenvectors.T @ modes.eigenvectors, np.eye(3))
    assert np.allclose(modes.fields, M @ modes.eigenvectors)


def test_modes_clamped_to_latent_dimension():
    """Test that asking for more modes than q keeps q"""
    M = np.random.default_rng(1).normal(size=(12, 2))
    assert compute_modes(M, np.eye(12), n_modes=5).count == 2


def test_null_mode_floor_and_exclude():
    """Test the two handlings of a vanishing eigenvalue"""
    rng = np.random.default_rng(2)
    M = np.hstack([rng.normal(size=(20, 2)), np.zeros((20, 1))])
    floored = compute_modes(M, np.eye(20), n_modes=3, weighting="floor", eigen_floor=1e-6)
    assert floored.count == 3
    assert np.all(np.isfinite(floored.weights))
    assert floored.weights[0] == pytest.approx(1.0)
    excluded = compute_modes(M, np.eye(20), n_modes=3, weighting="exclude", eigen_floor=1e-6)
    assert excluded.count == 2
    assert excluded.eigenvalues[0] > 0


def test_modes_validation():
    """Test weighting and all-null checks"""
    with pytest.raises(ContractViolation, match="Unknown mode weighting"):
        compute_modes(np.ones((3, 1)), np.eye(3), weighting="drop")
    with pytest.raises(GenAnalysisError, match="below the eigenvalue floor"):
        compute_modes(np.zeros((3, 1)), np.eye(3), weighting="exclude")


def test_fit_all_recovers_affine_field(sphere_mesh):
    """Test exact affine fits on every stencil"""
    u, A, b = _affine_field(sphere_mesh)
    fits = fit_all(sphere_mesh, u)
    assert not fits.flagged.any()
    assert np.allclose(fits.A, A, atol=1e-6)
    assert np.allclose(fits.b, b, atol=1e-6)


def test_batched_fit_matches_single_stencil(sphere_mesh):
    """Test fit_all against local_affine_fit"""
    rng = np.random.default_rng(3)
    u = rng.normal(size=sphere_mesh.vertices.shape)
    fits = fit_all(sphere_mesh, u)
    for i in (0, 17, sphere_mesh.n_vertices - 1):
        A, b, flagged = local_affine_fit(sphere_mesh, u, i)
        assert not flagged
        assert np.allclose(fits.A[i], A, atol=1e-8)
        assert np.allclose(fits.b[i], b, atol=1e-8)
    with pytest.raises(ContractViolation, match="out of range"):
        local_affine_fit(sphere_mesh, u, sphere_mesh.n_vertices)


def test_distance_matrix_properties(sphere_mesh):
    """Test symmetry, zero diagonal and nonnegativity"""
    rng = np.random.default_rng(4)
    fields = rng.normal(scale=0.01, size=(3 * sphere_mesh.n_vertices, 2))
    modes = VariationModes(np.array([1.0, 2.0]), np.eye(2), fields, np.array([1.0, 0.5]))
    D = distance_matrix(sphere_mesh, modes, chunk_rows=50).D
    assert np.allclose(D, D.T)
    assert np.all(np.diag(D) == 0.0)
    assert np.all(D >= 0)


def test_affine_modes_give_zero_distance(sphere_mesh):
    """Test that globally affine modes are predicted everywhere"""
    u, _, _ = _affine_field(sphere_mesh, seed=5)
    modes = VariationModes(np.array([1.0]), np.eye(1), u.reshape(-1, 1), np.array([1.0]))
    assert np.max(distance_matrix(sphere_mesh, modes).D) < 1e-6


def test_distance_separates_parts(capsule_family, capsule_mesh):
    """Test that vertices of differently moving parts are far apart"""
    gen = capsule_family.generator
    z = capsule_family[0].latent
    system = assemble_system(capsule_mesh)
    solver = DisplacementSolver(system, constraint_matrices(gen, capsule_mesh, z), z)
    modes = compute_modes(solver.M, system.L, n_modes=2)
    D = distance_matrix(capsule_mesh, modes).D

    sample = gen.evaluate(capsule_mesh.vertices, z)
    gap = np.abs(sample.part_values[:, 0] - sample.part_values[:, 1])
    owner = sample.owner
    core = gap > 0.05
    left = np.flatnonzero(core & (owner == 0))
    right = np.flatnonzero(core & (owner == 1))
    within = 0.5 * (D[np.ix_(left, left)].mean() + D[np.ix_(right, right)].mean())
    across = D[np.ix_(left, right)].mean()
    assert across > 3.0 * within


def test_matrix_file_roundtrip(tmp_path):
    """Test the binary matrix format"""
    D = np.arange(9.0).reshape(3, 3)
    path = DistanceMatrix(D).save(str(tmp_path / "d.gad"))
    assert np.array_equal(DistanceMatrix.load(path).D, D)
    with open(path, "rb") as f:
        assert f.read(4) == b"GAD1"


def test_matrix_file_errors(tmp_path):
    """Test malformed matrix files"""
    with pytest.raises(ContractViolation, match="square matrix"):
        write_matrix(np.zeros((2, 3)), str(tmp_path / "bad.gad"))
    bad = tmp_path / "magic.gad"
    bad.write_bytes(b"NOPE\x00\x00\x00\x00")
    with pytest.raises(GenAnalysisError, match="not a distance matrix"):
        read_matrix(str(bad))
    path = write_matrix(np.eye(3), str(tmp_path / "short.gad"))
    with open(path, "rb") as f:
        data = f.read()
    with open(path, "wb") as f:
        f.write(data[:-8])
    with pytest.raises(GenAnalysisError, match="expected 9 values"):
        read_matrix(path)


def test_normalized_cut_recovers_parts(capsule_family):
    """Test that a two-way cut of D matches the ground-truth parts"""
    gen = capsule_family.generator
    z = capsule_family[0].latent
    mesh = extract_mesh(gen, z, resolution=40, target_vertices=800, bounds=0.8)
    system = assemble_system(mesh)
    solver = DisplacementSolver(system, constraint_matrices(gen, mesh, z), z)
    D = distance_matrix(mesh, compute_modes(solver.M, system.L, n_modes=2))
    cut = over_segment(D, mesh, m=2)
    truth = gen.evaluate(mesh.vertices, z).owner
    assert rand_score(truth, cut.labels) >= 0.95
