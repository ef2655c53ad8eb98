"""
Correspondences by propagation through intermediate shapes.

Samples are pushed from z_S to z_S' in K + 1 steps. Each step solves the
constrained AAAP displacement for the latent increment and then snaps the
samples onto the next level set with a joint projection.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from genanalysis.aaap import (
    AAAP_DEFAULTS,
    DisplacementSolver,
    KKTSolver,
    assemble_system,
    constraint_matrices,
    fit_local_transforms,
    regularization_blocks,
    regularization_scale,
)
from genanalysis.errors import ContractViolation
from genanalysis.generator import ImplicitField
from genanalysis.meshing import SurfaceMesh, project_to_surface
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

MATCHING_DEFAULTS = {
    "intermediates": 5,
    "projection_iterations": 2,
    "polish_tolerance": 1e-6,
    "unmatched_fraction": 0.1,   # of the source bounding-box diagonal
    "pck_thresholds": (0.01, 0.02),
}


@dataclass(frozen=True, eq=False)
class ProjectionResult:
    points: np.ndarray
    linear_residual: float       # max |grad^T d + g| after the last joint solve
    correction: np.ndarray       # (n, 3) total joint correction
    converged: np.ndarray        # (n,) |g| < polish tolerance after polish


@dataclass(frozen=True, eq=False)
class StepDistortion:
    e: np.ndarray                # (n,) mean fit residual over N_i
    transforms: np.ndarray       # (n, 3, 3) fitted step transforms
    rotations: np.ndarray        # (n, 3, 3) Kabsch rotations removed before the fit


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Source vertices mapped onto the target level set."""
    source_ids: np.ndarray
    targets: np.ndarray
    step_distortions: np.ndarray     # (K + 1, n)
    weights: np.ndarray
    matched: np.ndarray
    z_source: np.ndarray
    z_target: np.ndarray
    trajectory: List[np.ndarray] = field(default_factory=list)

    @property
    def distortion(self) -> np.ndarray:
        """e_i = sum_k e_ik."""
        return self.step_distortions.sum(axis=0)

    def to_records(self) -> List[Dict]:
        e = self.distortion
        return [
            {
                "source_id": int(i),
                "target_xyz": [float(c) for c in self.targets[k]],
                "e_i": float(e[k]),
                "weight": float(self.weights[k]),
                "matched": bool(self.matched[k]),
            }
            for k, i in enumerate(self.source_ids)
        ]


def project(
    gen: ImplicitField,
    mesh: SurfaceMesh,
    z: np.ndarray,
    points: np.ndarray,
    iterations: int = MATCHING_DEFAULTS["projection_iterations"],
    polish_tolerance: float = MATCHING_DEFAULTS["polish_tolerance"],
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    mu_rel: float = AAAP_DEFAULTS["mu_rel"],
    polish: bool = True,
    model: str = "aaap",
    normalize_regularization: bool = True,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
) -> ProjectionResult:
    """
    Snap points onto g(., z) = 0 jointly.

    Each iteration minimizes d^T L d on the current point geometry subject to
    grad_x(p_i)^T d_i = -g(p_i, z); a per-point Newton polish follows.

    Args:
        gen: Implicit field
        mesh: Connectivity shared by the points
        z: Target latent code
        points: (n, 3) points near the level set
        iterations: Joint linearized solves
        polish_tolerance: |g| reached by the Newton polish
        mu_r: Scale regularization
        mu_s: Anisotropic regularization
        mu_rel: KKT diagonal shift
        polish: Run the per-point Newton polish
        model: "aaap" or "acap"
        normalize_regularization: See assemble_system
        reference_scale: Regularization unit in squared mean edge lengths

    Returns:
        ProjectionResult
    """
    p = np.array(points, dtype=float)
    if p.shape != mesh.vertices.shape:
        raise ContractViolation(f"Points have shape {p.shape}, mesh has {mesh.vertices.shape}")
    start = p.copy()
    linear_residual = 0.0

    for _ in range(iterations):
        constraints = constraint_matrices(gen, mesh, z, positions=p)
        if np.max(np.abs(constraints.values), initial=0.0) < 1e-12:
            break
        system = assemble_system(
            mesh, mu_r, mu_s, model=model, positions=p,
            normalize_regularization=normalize_regularization, reference_scale=reference_scale,
        )
        d = KKTSolver(system, constraints, mu_rel).solve(-constraints.values)
        linear_residual = float(np.max(np.abs(constraints.C @ d + constraints.values), initial=0.0))
        p += d.reshape(-1, 3)

    if polish:
        p, converged = project_to_surface(gen, z, p, tolerance=polish_tolerance)
    else:
        converged = np.abs(gen.evaluate(p, z).values) < polish_tolerance
    if not np.all(converged):
        logger.warning(f"Projection polish left {int((~converged).sum())} points above |g| = {polish_tolerance:g}")
    return ProjectionResult(p, linear_residual, p - start, converged)


def _kabsch(source: np.ndarray, target: np.ndarray, heads: np.ndarray, n: int) -> np.ndarray:
    """Per-vertex rotation R_i minimizing sum |R s - t| over the vertex's edges."""
    H = np.zeros((n, 3, 3))
    np.add.at(H, heads, np.einsum("ka,kb->kab", source, target))
    U, _, Vt = np.linalg.svd(H)
    det = np.linalg.det(np.einsum("nba,ncb->nac", Vt, U))
    fix = np.tile(np.eye(3), (n, 1, 1))
    fix[:, 2, 2] = np.sign(np.where(det == 0, 1.0, det))
    return np.einsum("nba,nbc,ndc->nad", Vt, fix, U)


def step_distortion(
    prev_points: np.ndarray,
    next_points: np.ndarray,
    mesh: SurfaceMesh,
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_c: float = AAAP_DEFAULTS["mu_s"],
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
    normalize_regularization: bool = True,
) -> StepDistortion:
    """
    Fit each vertex's step transform and measure how far the step is from it.

    A Kabsch rotation is removed first; the remaining deviation is fitted with
    the regularized conformal basis (penalty mu_r s^2 + mu_c |a|^2) and e_ik is
    the mean fit residual over N_i.

    Args:
        prev_points: (n, 3) positions before the step
        next_points: (n, 3) positions after the step
        mesh: Connectivity
        mu_r: Scale regularization
        mu_c: Anisotropic regularization
        reference_scale: Regularization unit in squared mean edge lengths
        normalize_regularization: Use mu_r, mu_c as absolute weights when False

    Returns:
        StepDistortion
    """
    prev = np.asarray(prev_points, dtype=float)
    nxt = np.asarray(next_points, dtype=float)
    if prev.shape != nxt.shape or prev.shape != mesh.vertices.shape:
        raise ContractViolation("Step point sets must match the mesh vertex count")
    n = prev.shape[0]
    edges = mesh.edges
    heads = edges[:, 0]

    src = prev[edges[:, 1]] - prev[heads]
    dst = nxt[edges[:, 1]] - nxt[heads]
    R = _kabsch(src, dst, heads, n)
    deviation = np.einsum("kba,kb->ka", R[heads], dst) - src

    scale = regularization_scale(src, normalize_regularization, reference_scale)
    params, residual = fit_local_transforms(src, deviation, heads, n, regularization_blocks(n, mu_r, mu_c, scale))
    counts = np.bincount(heads, minlength=n)
    e = np.bincount(heads, weights=residual, minlength=n) / np.maximum(counts, 1)

    A = params.matrices()
    transforms = np.einsum("nab,nbc->nac", R, np.eye(3) + A)
    return StepDistortion(e, transforms, R)


def similarity_weights(distortion: np.ndarray) -> np.ndarray:
    """w_i = exp(-e_i^2 / 2 sigma^2) with sigma the median distortion."""
    e = np.asarray(distortion, dtype=float)
    if e.size == 0 or not np.any(e > 0):
        return np.ones_like(e)
    sigma = float(np.median(e))
    if sigma <= 0:
        sigma = float(np.median(e[e > 0]))
    return np.exp(-(e ** 2) / (2.0 * sigma ** 2))


def propagate(
    gen: ImplicitField,
    mesh: SurfaceMesh,
    z_source: np.ndarray,
    z_target: np.ndarray,
    intermediates: int = MATCHING_DEFAULTS["intermediates"],
    projection_iterations: int = MATCHING_DEFAULTS["projection_iterations"],
    polish_tolerance: float = MATCHING_DEFAULTS["polish_tolerance"],
    unmatched_fraction: float = MATCHING_DEFAULTS["unmatched_fraction"],
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    mu_rel: float = AAAP_DEFAULTS["mu_rel"],
    model: str = "aaap",
    normalize_regularization: bool = True,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
) -> CorrespondenceSet:
    """
    Propagate mesh vertices from z_source to z_target through K intermediates.

    Args:
        gen: Implicit field
        mesh: Mesh of g(., z_source) = 0
        z_source: Source latent code
        z_target: Target latent code
        intermediates: K, number of intermediate shapes (0 = direct)
        projection_iterations: Joint projection solves per step
        polish_tolerance: |g| after the per-point polish
        unmatched_fraction: Points ending farther than this times the bbox
            diagonal from the target surface are unmatched
        mu_r: Scale regularization
        mu_s: Anisotropic regularization
        mu_rel: KKT diagonal shift
        model: "aaap" or "acap" for the step solves and projections
        normalize_regularization: See assemble_system
        reference_scale: Regularization unit in squared mean edge lengths

    Returns:
        CorrespondenceSet
    """
    if intermediates < 0:
        raise ContractViolation(f"Number of intermediate shapes must be >= 0, got {intermediates}")
    z_s = np.asarray(z_source, dtype=float)
    z_t = np.asarray(z_target, dtype=float)
    n = mesh.n_vertices
    points = np.array(mesh.vertices)
    trajectory = [points.copy()]

    if np.allclose(z_s, z_t):
        return CorrespondenceSet(
            np.arange(n), points, np.zeros((intermediates + 1, n)), np.ones(n),
            np.ones(n, dtype=bool), z_s, z_t, trajectory,
        )

    steps = intermediates + 1
    delta = (z_t - z_s) / steps
    distortions = np.zeros((steps, n))
    settings = {
        "model": model,
        "normalize_regularization": normalize_regularization,
        "reference_scale": reference_scale,
    }
    for k in range(steps):
        z_k = z_s + k * delta
        system = assemble_system(mesh, mu_r, mu_s, positions=points, **settings)
        solver = DisplacementSolver(system, constraint_matrices(gen, mesh, z_k, positions=points), z_k, mu_rel)
        predicted = points + solver.solve(delta).per_vertex
        projected = project(
            gen, mesh, z_k + delta, predicted, projection_iterations, polish_tolerance, mu_r, mu_s, mu_rel,
            **settings,
        ).points
        distortions[k] = step_distortion(
            points, projected, mesh, mu_r, mu_s, reference_scale, normalize_regularization
        ).e
        points = projected
        trajectory.append(points.copy())
        logger.debug(f"Propagation step {k + 1}/{steps}: mean step distortion {distortions[k].mean():.3e}")

    residual = np.abs(gen.evaluate(points, z_t).values)
    matched = np.isfinite(residual) & (residual < unmatched_fraction * mesh.bbox_diagonal)
    matched &= np.all(np.isfinite(points), axis=1)
    if not np.all(matched):
        logger.warning(f"{int((~matched).sum())} of {n} points diverged and are unmatched")

    weights = similarity_weights(distortions.sum(axis=0))
    return CorrespondenceSet(np.arange(n), points, distortions, weights, matched, z_s, z_t, trajectory)


def oracle_errors(
    corr: CorrespondenceSet, gen, source_points: np.ndarray, interface_band: float = 0.0
) -> Dict[str, np.ndarray]:
    """Distance of each correspondence to the generator's ground-truth map."""
    from genanalysis.generator import ground_truth_correspondence

    truth = ground_truth_correspondence(
        gen, source_points, corr.z_source, corr.z_target, interface_band=interface_band
    )
    return {
        "error": np.linalg.norm(corr.targets - truth.points, axis=1),
        "blend_zone": truth.blend_zone,
        "excluded": truth.excluded,
        "labels": truth.labels,
    }


def transfer_labels(
    corr: CorrespondenceSet,
    source_labels: np.ndarray,
    target_points: np.ndarray,
    k: int = 1,
) -> np.ndarray:
    """
    Label target points by their nearest matched correspondences.

    Args:
        corr: Correspondences from source samples
        source_labels: Label per source sample
        target_points: (t, 3) points to label (e.g. target mesh vertices)
        k: Nearest correspondences voting per target point

    Returns:
        (t,) labels
    """
    labels = np.asarray(source_labels)
    if labels.shape[0] != corr.source_ids.shape[0]:
        raise ContractViolation("One source label per correspondence is required")
    keep = corr.matched
    if not np.any(keep):
        raise ContractViolation("No matched correspondences to transfer labels from")
    tree = cKDTree(corr.targets[keep])
    kept_labels = labels[keep]
    k = min(k, int(keep.sum()))
    _, idx = tree.query(np.asarray(target_points, dtype=float), k=k)
    if k == 1:
        return kept_labels[idx]
    votes = kept_labels[idx]
    result = np.empty(votes.shape[0], dtype=kept_labels.dtype)
    for row, vote in enumerate(votes):
        values, counts = np.unique(vote, return_counts=True)
        result[row] = values[np.argmax(counts)]
    return result


@dataclass(frozen=True)
class KeypointTransfer:
    points: np.ndarray          # (k, 3) transferred keypoints
    errors: np.ndarray          # (k,) graph distance / bbox diagonal (inf if unmatched)
    pck: Dict[float, float]


def transfer_keypoints(
    corr: CorrespondenceSet,
    keypoints: Sequence[int],
    target_mesh: SurfaceMesh,
    true_points: np.ndarray,
    thresholds: Sequence[float] = MATCHING_DEFAULTS["pck_thresholds"],
) -> KeypointTransfer:
    """
    Move source keypoints through the correspondences and score them.

    Errors are shortest-path distances on the target mesh graph between the
    vertices nearest to the transferred and the true keypoints, divided by the
    target bounding-box diagonal.
    """
    keypoints = np.asarray(keypoints, dtype=int).reshape(-1)
    if keypoints.size == 0:
        return KeypointTransfer(np.zeros((0, 3)), np.zeros(0), {float(t): 0.0 for t in thresholds})
    true_points = np.asarray(true_points, dtype=float).reshape(-1, 3)
    if true_points.shape[0] != keypoints.size:
        raise ContractViolation("One ground-truth point per keypoint is required")

    moved = corr.targets[keypoints]
    tree = cKDTree(target_mesh.vertices)
    _, moved_v = tree.query(moved)
    _, true_v = tree.query(true_points)
    dist = target_mesh.graph_distances(moved_v)
    errors = dist[np.arange(keypoints.size), true_v] / target_mesh.bbox_diagonal
    errors = np.where(corr.matched[keypoints], errors, np.inf)
    pck = {float(t): float(np.mean(errors <= t)) for t in thresholds}
    return KeypointTransfer(moved, errors, pck)
