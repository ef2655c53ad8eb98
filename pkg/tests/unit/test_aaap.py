"""Test suite for the AAAP deformation system and constrained solves."""

import numpy as np
import pytest

from genanalysis.aaap import (
    ANISOTROPIC,
    CONFORMAL_BASIS,
    AffineParams,
    DisplacementSolver,
    KKTSolver,
    assemble,
    assemble_system,
    constraint_matrices,
    evaluate_regularizer,
    fit_local_transforms,
    invert_blocks,
    robust_energy,
    robust_norm,
    schur,
    solve_displacement,
    sphere_directions,
    unvec,
)
from genanalysis.errors import ContractViolation, FactorizationError


def test_conformal_basis_structure():
    """Test the scale, rotation and anisotropic columns of J"""
    J = CONFORMAL_BASIS
    assert np.allclose(unvec(J[:, 0]), np.eye(3))
    for k in range(1, 4):
        M = unvec(J[:, k])
        assert np.allclose(M, -M.T)
    aniso = J[:, ANISOTROPIC]
    assert np.allclose(aniso.T @ aniso, np.eye(5))
    for k in range(5):
        M = unvec(aniso[:, k])
        assert np.allclose(M, M.T)
        assert np.trace(M) == pytest.approx(0.0, abs=1e-12)
    assert np.linalg.matrix_rank(J) == 9


def test_diagonal_candidate_not_traceless():
    """Test that diag(1/sqrt2, 0, -1/sqrt6) is rejected as an anisotropic direction"""
    candidate = np.diag([1 / np.sqrt(2.0), 0.0, -1 / np.sqrt(6.0)]).ravel(order="F")
    assert abs(candidate @ CONFORMAL_BASIS[:, 0]) > 0.1
    assert np.allclose(CONFORMAL_BASIS[:, ANISOTROPIC].T @ CONFORMAL_BASIS[:, 0], 0.0)


def test_affine_params_decode():
    """Test decoding y into matrices"""
    y = np.zeros((1, 9))
    y[0, 0] = 2.0
    y[0, 3] = 1.0
    A = AffineParams(y).matrices()[0]
    assert np.allclose(A, 2.0 * np.eye(3) + unvec(CONFORMAL_BASIS[:, 3]))
    assert AffineParams(y).s[0] == 2.0


def test_rigid_motion_has_zero_energy(sphere_mesh):
    """Test that infinitesimal rigid motions cost nothing"""
    system = assemble_system(sphere_mesh)
    p = sphere_mesh.vertices
    d = np.cross(np.array([0.3, -0.2, 0.5]), p) + np.array([0.1, 0.0, -0.4])
    assert system.energy(d) <= 1e-10 * np.sum(d ** 2)


def test_energy_matrix_symmetric_psd(sphere_mesh):
    """Test that L is symmetric positive semidefinite"""
    L = assemble_system(sphere_mesh).L.toarray()
    assert np.allclose(L, L.T)
    eig = np.linalg.eigvalsh(L)
    assert eig[0] >= -1e-9 * eig[-1]


def test_elimination_matches_joint_objective(sphere_mesh):
    """Test d^T L d equals the joint objective at y* = B d, and y* is optimal"""
    system = assemble_system(sphere_mesh)
    rng = np.random.default_rng(0)
    d = rng.normal(scale=0.01, size=3 * system.n)
    params = system.recover_transforms(d)
    assert system.joint_objective(d, params) == pytest.approx(system.energy(d), rel=1e-8)
    perturbed = AffineParams(params.y + rng.normal(scale=1e-3, size=params.y.shape))
    assert system.joint_objective(d, perturbed) > system.energy(d)


def test_schur_reproduces_system(sphere_mesh):
    """Test the standalone elimination"""
    system = assemble_system(sphere_mesh)
    L, B = schur(*assemble(sphere_mesh))
    assert abs(L - system.L).max() < 1e-10
    assert abs(B - system.B).max() < 1e-10


def test_acap_energy_not_below_aaap(sphere_mesh):
    """Test that freezing the anisotropic part can only raise the energy"""
    aaap = assemble_system(sphere_mesh, model="aaap")
    acap = assemble_system(sphere_mesh, model="acap")
    rng = np.random.default_rng(1)
    for _ in range(3):
        d = rng.normal(scale=0.01, size=3 * aaap.n)
        assert acap.energy(d) >= aaap.energy(d) - 1e-12


def test_assembly_validation(sphere_mesh):
    """Test parameter checks"""
    with pytest.raises(ContractViolation, match="must be positive"):
        assemble_system(sphere_mesh, mu_r=0.0)
    with pytest.raises(ContractViolation, match="Unknown deformation model"):
        assemble_system(sphere_mesh, model="arap")
    with pytest.raises(ContractViolation, match="Edge weights"):
        assemble_system(sphere_mesh, edge_weights=np.ones(3))
    with pytest.raises(ContractViolation, match="Displacement has length"):
        assemble_system(sphere_mesh).energy(np.zeros(5))


def test_invert_blocks_names_vertex():
    """Test that a singular block is reported by vertex"""
    blocks = np.tile(np.eye(9), (4, 1, 1))
    blocks[2] = 0.0
    with pytest.raises(FactorizationError) as info:
        invert_blocks(blocks)
    assert info.value.vertex == 2


def test_sphere_growth_is_radial(sphere_field, sphere_mesh):
    """Test that growing the radius moves vertices along the normal by 0.2 per unit"""
    z = np.zeros(1)
    system = assemble_system(sphere_mesh)
    solver = DisplacementSolver(system, constraint_matrices(sphere_field, sphere_mesh, z), z)
    d = solver.solve(np.array([1.0])).per_vertex
    normals = sphere_mesh.vertices / np.linalg.norm(sphere_mesh.vertices, axis=1, keepdims=True)
    radial = np.einsum("nd,nd->n", d, normals)
    tangential = d - radial[:, None] * normals
    assert np.allclose(radial, 0.2, atol=1e-6)
    assert np.max(np.linalg.norm(tangential, axis=1)) < 0.02
    assert np.allclose(solver.M[:, 0], d.reshape(-1))


def test_constraints_are_satisfied(capsule_family, capsule_mesh):
    """Test C d = -F v for a two-dimensional latent"""
    gen = capsule_family.generator
    z = capsule_family[0].latent
    system = assemble_system(capsule_mesh)
    constraints = constraint_matrices(gen, capsule_mesh, z)
    v = np.array([0.3, -0.7])
    field = solve_displacement(system, constraints, v, z)
    assert np.allclose(constraints.C @ field.d, -constraints.F @ v, atol=1e-8)


def test_solver_checks_shapes(sphere_field, sphere_mesh, capsule_mesh):
    """Test dimension checks of the solvers"""
    z = np.zeros(1)
    system = assemble_system(sphere_mesh)
    solver = DisplacementSolver(system, constraint_matrices(sphere_field, sphere_mesh, z), z)
    with pytest.raises(ContractViolation, match="dimension 2, expected 1"):
        solver.solve(np.zeros(2))
    with pytest.raises(ContractViolation, match="different vertex counts"):
        KKTSolver(system, constraint_matrices(sphere_field, capsule_mesh, z))


def test_regularizer_prefers_aaap_for_stretch(capsule_family, capsule_mesh):
    """Test that an anisotropic stretch is cheaper under AAAP than ACAP"""
    gen = capsule_family.generator
    z = capsule_family[0].latent
    stretch = np.array([[0.0, 1.0]])
    aaap = evaluate_regularizer(gen, capsule_mesh, z, model="aaap", directions=stretch)
    acap = evaluate_regularizer(gen, capsule_mesh, z, model="acap", directions=stretch)
    assert aaap.value < acap.value
    assert aaap.edge_residuals.shape == (capsule_mesh.edges.shape[0],)


def test_regularizer_validation(sphere_field, sphere_mesh):
    """Test regularizer argument checks"""
    with pytest.raises(ContractViolation, match="alpha must be 1 or 2"):
        evaluate_regularizer(sphere_field, sphere_mesh, np.zeros(1), alpha=3)
    with pytest.raises(ContractViolation, match="at least one direction"):
        evaluate_regularizer(sphere_field, sphere_mesh, np.zeros(1), n_directions=0)


def test_sphere_directions_unit():
    """Test direction sampling"""
    v = sphere_directions(4, 32, seed=5)
    assert v.shape == (32, 4)
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
    assert np.allclose(v, sphere_directions(4, 32, seed=5))


def test_robust_norm():
    """Test the smoothed norm"""
    r = np.array([0.0, 1e-3, 2.0])
    out = robust_norm(r, delta=1e-6)
    assert out[0] == 0.0
    assert out[2] == pytest.approx(2.0, abs=1e-5)
    assert np.all(np.diff(out) > 0)


def test_fit_local_transforms_exact():
    """Test exact recovery of per-vertex affine maps"""
    rng = np.random.default_rng(4)
    truth = rng.normal(size=(2, 3, 3))
    heads = np.repeat([0, 1], 6)
    offsets = rng.normal(size=(12, 3))
    targets = np.einsum("kab,kb->ka", truth[heads], offsets)
    params, residual = fit_local_transforms(offsets, targets, heads, 2, np.zeros((2, 9, 9)))
    assert np.allclose(params.matrices(), truth, atol=1e-8)
    assert np.max(residual) < 1e-8


def _rigid_basis(vertices: np.ndarray) -> np.ndarray:
    fields = []
    for k in range(3):
        t = np.zeros(3)
        t[k] = 1.0
        fields.append(np.tile(t, (vertices.shape[0], 1)).reshape(-1))
        fields.append(np.cross(t, vertices).reshape(-1))
    q, _ = np.linalg.qr(np.stack(fields, axis=1))
    return q


def test_nullspace_is_rigid_motions(sphere_mesh):
    """Test that only translations and infinitesimal rotations are free"""
    L = assemble_system(sphere_mesh).L.toarray()
    lam_max = np.linalg.eigvalsh(L)[-1]
    basis = _rigid_basis(sphere_mesh.vertices)
    for k in range(basis.shape[1]):
        d = basis[:, k]
        assert d @ L @ d < 1e-10 * (d @ d) * lam_max

    rng = np.random.default_rng(2)
    for _ in range(100):
        d = rng.normal(size=L.shape[0])
        d -= basis @ (basis.T @ d)
        assert d @ L @ d > 1e-4 * (d @ d) * lam_max


def test_absolute_regularization_weights(sphere_mesh):
    """Test the energy of a traceless stretch under unscaled mu_r and mu_s"""
    p = sphere_mesh.vertices
    A = 0.05 * np.diag([1.0, -1.0, 0.0])
    d = (p @ A.T).reshape(-1)
    mu_r, mu_s = 0.5, 2e-3
    system = assemble_system(sphere_mesh, mu_r, mu_s, normalize_regularization=False)
    assert system.regularization_scale == 1.0
    params = system.recover_transforms(d)
    r = system.edge_residuals(d, params)
    expected = np.sum(r ** 2) + np.sum(mu_r * params.s ** 2) + np.sum(mu_s * np.sum(params.a ** 2, axis=1))
    energy = system.energy(d)
    assert energy == pytest.approx(expected, rel=1e-8)
    assert 0.0 < energy <= mu_s * system.n * np.sum(A ** 2) * (1 + 1e-9)

    scaled = assemble_system(sphere_mesh, mu_r, mu_s)
    assert scaled.regularization_scale == pytest.approx(
        1e-2 * np.mean(np.linalg.norm(p[scaled.edges[:, 0]] - p[scaled.edges[:, 1]], axis=1)) ** 2
    )
    assert scaled.energy(d) < energy


def test_robust_energy_reports_residuals(sphere_mesh):
    """Test the per-edge residuals and IRLS weights of the robust energy"""
    p = np.array(sphere_mesh.vertices)
    rigid = np.cross(np.array([0.0, 0.3, 0.1]), p) + 0.2
    energy, weights, r = robust_energy(sphere_mesh, p, rigid)
    assert energy < 1e-4
    assert r.shape == weights.shape == (sphere_mesh.edges.shape[0],)
    assert np.max(r) < 1e-6

    bump = np.exp(-np.sum((p - np.array([0.5, 0.0, 0.0])) ** 2, axis=1) / 0.01)
    d = 0.05 * bump[:, None] * np.array([1.0, 0.0, 0.0])
    bumped, _, r = robust_energy(sphere_mesh, p, d)
    assert bumped > 1e-4
    assert r[sphere_mesh.edges[:, 0] == np.argmax(bump)].max() > 10 * np.median(r)
