"""
Interpolation-path optimization between two shapes of a family.

The latent path stays linear; the unknowns are the vertex positions of the
intermediate states. Each outer iteration freezes the geometry of every pair,
solves one sparse KKT system for all intermediate states under linearized
level-set constraints, projects the states back onto their level sets and
accepts the step only if the weighted path energy does not increase.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from genanalysis.aaap import (
    AAAP_DEFAULTS,
    assemble_system,
    constraint_matrices,
    fit_local_transforms,
    model_basis,
    regularization_blocks,
    regularization_scale,
    robust_energy,
)
from genanalysis.errors import ContractViolation, ExtractionError, FactorizationError
from genanalysis.generator import ImplicitField
from genanalysis.matching import MATCHING_DEFAULTS, project, propagate
from genanalysis.meshing import SurfaceMesh, level_set_crosses
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

PATHOPT_DEFAULTS = {
    "intermediates": 5,
    "max_iterations": 200,
    "tolerance": 1e-6,          # relative energy decrease that stops the loop
    "irls_eps": 1e-4,           # floor on the robust residual in IRLS weights
    "proximal_rel": 1e-3,       # proximal shift relative to mean diag of the path Hessian
    "backtracking": 5,
    "base_weight": 0.1,
}

PATH_MODES = ("l2", "robust")


@dataclass(frozen=True)
class WeightScheme:
    """Latent-distance weighting around a shape of interest."""
    c1: float
    base_weight: float = PATHOPT_DEFAULTS["base_weight"]

    def __post_init__(self):
        if not self.c1 > 0:
            raise ContractViolation(f"Weight scheme radius c1 must be positive, got {self.c1}")

    @property
    def c2(self) -> float:
        return self.c1 / 3.0

    @classmethod
    def from_latents(cls, test_codes: np.ndarray, train_codes: np.ndarray,
                     base_weight: float = PATHOPT_DEFAULTS["base_weight"]) -> "WeightScheme":
        """c1 = median over test codes of the distance to the nearest distinct training code."""
        test = np.atleast_2d(np.asarray(test_codes, dtype=float))
        train = np.atleast_2d(np.asarray(train_codes, dtype=float))
        dist = np.linalg.norm(test[:, None, :] - train[None, :, :], axis=2)
        dist = np.where(dist > 1e-12, dist, np.inf)
        nearest = dist.min(axis=1)
        nearest = nearest[np.isfinite(nearest)]
        if nearest.size == 0:
            raise ContractViolation("Need at least one pair of distinct latent codes")
        return cls(float(np.median(nearest)), base_weight)


def weight_at(scheme: WeightScheme, z: np.ndarray, z0: np.ndarray) -> float:
    """exp(-|z - z0| / (2 c2^2)) inside the c1 ball, 0 outside."""
    dist = float(np.linalg.norm(np.asarray(z, dtype=float) - np.asarray(z0, dtype=float)))
    if dist > scheme.c1:
        return 0.0
    return float(np.exp(-dist / (2.0 * scheme.c2 ** 2)))


def path_weights(scheme: WeightScheme, latents: np.ndarray) -> np.ndarray:
    """Per-pair weights max(weight_at(z^k, z^0), base weight)."""
    latents = np.asarray(latents, dtype=float)
    return np.array([max(weight_at(scheme, z, latents[0]), scheme.base_weight) for z in latents[:-1]])


@dataclass(eq=False)
class InterpolationPath:
    latents: np.ndarray                 # (K + 2, q)
    states: List[np.ndarray]            # K + 2 arrays of (n, 3)
    weights: np.ndarray                 # (K + 1,)
    mode: str
    pair_energies: np.ndarray           # (K + 1,) at the final states
    history: List[List[float]] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def energy(self) -> float:
        return float(np.dot(self.weights, self.pair_energies))

    def to_manifest(self) -> Dict:
        return {
            "mode": self.mode,
            "latents": self.latents.tolist(),
            "weights": self.weights.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "energy": self.energy,
            "pair_energies": self.pair_energies.tolist(),
            "history": self.history,
        }


def pair_edge_residuals(
    mesh: SurfaceMesh,
    start: np.ndarray,
    end: np.ndarray,
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
    normalize_regularization: bool = True,
    model: str = "aaap",
):
    """Per-edge non-affine residual |A_i e_ij - (d_i - d_j)| of one pair (L2 fit)."""
    n = mesh.n_vertices
    edges = mesh.edges
    heads = edges[:, 0]
    offsets = start[heads] - start[edges[:, 1]]
    d = end - start
    targets = d[heads] - d[edges[:, 1]]
    scale = regularization_scale(offsets, normalize_regularization, reference_scale)
    reg = regularization_blocks(n, mu_r, mu_s, scale)
    params, residual = fit_local_transforms(offsets, targets, heads, n, reg, basis=model_basis(model))
    return params, residual, reg


def pair_energy(mesh: SurfaceMesh, start: np.ndarray, end: np.ndarray, mode: str,
                mu_r: float, mu_s: float, delta: float, irls_eps: float, **settings) -> float:
    """Energy of one pair; settings carry model, normalize_regularization and reference_scale."""
    if mode == "robust":
        return robust_energy(mesh, start, end - start, mu_r, mu_s, delta, irls_eps, **settings)[0]
    params, residual, reg = pair_edge_residuals(mesh, start, end, mu_r, mu_s, **settings)
    return float(np.sum(residual ** 2) + np.einsum("ni,nij,nj->", params.y, reg, params.y))


class PathOptimizer:
    """Outer loop state for one (source, target) pair."""

    def __init__(
        self,
        gen: ImplicitField,
        mesh: SurfaceMesh,
        latents: np.ndarray,
        weights: np.ndarray,
        mode: str,
        mu_r: float = AAAP_DEFAULTS["mu_r"],
        mu_s: float = AAAP_DEFAULTS["mu_s"],
        mu_rel: float = AAAP_DEFAULTS["mu_rel"],
        delta: float = AAAP_DEFAULTS["robust_delta"],
        irls_eps: float = PATHOPT_DEFAULTS["irls_eps"],
        proximal_rel: float = PATHOPT_DEFAULTS["proximal_rel"],
        polish_tolerance: float = MATCHING_DEFAULTS["polish_tolerance"],
        model: str = "aaap",
        normalize_regularization: bool = True,
        reference_scale: float = AAAP_DEFAULTS["reference_scale"],
    ):
        self.gen = gen
        self.mesh = mesh
        self.latents = latents
        self.weights = weights
        self.mode = mode
        self.mu_r = mu_r
        self.mu_s = mu_s
        self.mu_rel = mu_rel
        self.delta = delta
        self.irls_eps = irls_eps
        self.proximal_rel = proximal_rel
        self.polish_tolerance = polish_tolerance
        self.settings = {
            "model": model,
            "normalize_regularization": normalize_regularization,
            "reference_scale": reference_scale,
        }

    def pair_energies(self, states: Sequence[np.ndarray]) -> np.ndarray:
        return np.array([
            pair_energy(self.mesh, states[k], states[k + 1], self.mode, self.mu_r, self.mu_s,
                        self.delta, self.irls_eps, **self.settings)
            for k in range(len(states) - 1)
        ])

    def edge_residuals(self, states: Sequence[np.ndarray]) -> np.ndarray:
        """(K + 1, m) non-affine residual per pair and directed edge under the path's mode."""
        rows = []
        for start, end in zip(states[:-1], states[1:]):
            if self.mode == "robust":
                r = robust_energy(
                    self.mesh, start, end - start, self.mu_r, self.mu_s, self.delta, self.irls_eps, **self.settings
                )[2]
            else:
                r = pair_edge_residuals(self.mesh, start, end, self.mu_r, self.mu_s, **self.settings)[1]
            rows.append(r)
        return np.stack(rows)

    def _pair_matrix(self, start: np.ndarray, end: np.ndarray) -> sparse.csr_matrix:
        edge_weights = None
        if self.mode == "robust":
            _, edge_weights, _ = robust_energy(
                self.mesh, start, end - start, self.mu_r, self.mu_s, self.delta, self.irls_eps, **self.settings
            )
        return assemble_system(
            self.mesh, self.mu_r, self.mu_s, positions=start, edge_weights=edge_weights, **self.settings
        ).L

    def solve_step(self, states: List[np.ndarray]) -> List[np.ndarray]:
        """One frozen-geometry KKT solve over all intermediate states."""
        K = len(states) - 2
        n3 = 3 * self.mesh.n_vertices
        Ls = [self.weights[k] * self._pair_matrix(states[k], states[k + 1]) for k in range(K + 1)]

        blocks = [[None] * K for _ in range(K)]
        rhs = np.zeros(n3 * K)
        for j in range(K):
            blocks[j][j] = Ls[j] + Ls[j + 1]
            if j + 1 < K:
                blocks[j][j + 1] = -Ls[j + 1]
                blocks[j + 1][j] = -Ls[j + 1]
        rhs[:n3] += Ls[0] @ states[0].reshape(-1)
        rhs[-n3:] += Ls[K] @ states[K + 1].reshape(-1)
        H = sparse.bmat(blocks, format="csr")

        current = np.concatenate([s.reshape(-1) for s in states[1:-1]])
        prox = self.proximal_rel * max(float(H.diagonal().mean()), np.finfo(float).tiny)
        H = H + prox * sparse.identity(H.shape[0], format="csr")
        rhs += prox * current

        c_blocks, c_rhs = [], []
        for k in range(1, K + 1):
            cons = constraint_matrices(self.gen, self.mesh, self.latents[k], positions=states[k])
            c_blocks.append(cons.C)
            c_rhs.append(cons.C @ states[k].reshape(-1) - cons.values)
        C = sparse.block_diag(c_blocks, format="csr")
        kkt = sparse.bmat([[H, C.T], [C, None]], format="csc")
        full_rhs = np.concatenate([rhs, np.concatenate(c_rhs)])
        try:
            lu = splinalg.splu(kkt, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as e:
            raise FactorizationError(f"Path KKT factorization failed: {e}")
        sol = lu.solve(full_rhs)
        sol += lu.solve(full_rhs - kkt @ sol)

        x = sol[: n3 * K].reshape(K, -1, 3)
        return [states[0]] + [x[k] for k in range(K)] + [states[-1]]

    def reproject(self, states: List[np.ndarray]) -> List[np.ndarray]:
        result = [states[0]]
        for k in range(1, len(states) - 1):
            projected = project(
                self.gen, self.mesh, self.latents[k], states[k], iterations=1,
                polish_tolerance=self.polish_tolerance, mu_r=self.mu_r, mu_s=self.mu_s, mu_rel=self.mu_rel,
                **self.settings,
            )
            result.append(projected.points)
        result.append(states[-1])
        return result


def optimize_path(
    gen: ImplicitField,
    mesh: SurfaceMesh,
    z_source: np.ndarray,
    z_target: np.ndarray,
    intermediates: int = PATHOPT_DEFAULTS["intermediates"],
    mode: str = "robust",
    weights: Optional[Sequence[float]] = None,
    max_iterations: int = PATHOPT_DEFAULTS["max_iterations"],
    tolerance: float = PATHOPT_DEFAULTS["tolerance"],
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    mu_rel: float = AAAP_DEFAULTS["mu_rel"],
    irls_eps: float = PATHOPT_DEFAULTS["irls_eps"],
    backtracking: int = PATHOPT_DEFAULTS["backtracking"],
    delta: float = AAAP_DEFAULTS["robust_delta"],
    model: str = "aaap",
    normalize_regularization: bool = True,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
) -> InterpolationPath:
    """
    Optimize vertex states along the linear latent path z_S -> z_S'.

    Args:
        gen: Implicit field
        mesh: Mesh of the source shape
        z_source: Source latent code
        z_target: Target latent code
        intermediates: K >= 1 intermediate states
        mode: "l2" or "robust"
        weights: K + 1 positive pair weights (default uniform)
        max_iterations: Outer iteration cap
        tolerance: Relative energy decrease that stops the loop
        mu_r: Scale regularization
        mu_s: Anisotropic regularization
        mu_rel: KKT diagonal shift for propagation and projection
        irls_eps: Residual floor in robust reweighting
        backtracking: Step halvings tried before giving up on an iteration
        delta: Robust-norm smoothing
        model: "aaap" or "acap" for the pair energies and the initial propagation
        normalize_regularization: See assemble_system
        reference_scale: Regularization unit in squared mean edge lengths

    Returns:
        InterpolationPath

    Raises:
        ExtractionError: If the level set at some z^k misses the sampling box
        ContractViolation: On bad K, mode or weights
    """
    if intermediates < 1:
        raise ContractViolation(f"Path needs at least one intermediate state, got K={intermediates}")
    if mode not in PATH_MODES:
        raise ContractViolation(f"Unknown path mode '{mode}'")
    steps = intermediates + 1
    w = np.ones(steps) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != steps or not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ContractViolation(f"Need {steps} finite positive pair weights", {"weights": w.tolist()})

    z_s = np.asarray(z_source, dtype=float)
    z_t = np.asarray(z_target, dtype=float)
    latents = np.stack([z_s + (k / steps) * (z_t - z_s) for k in range(steps + 1)])
    for k, z in enumerate(latents):
        if not level_set_crosses(gen, z):
            raise ExtractionError(f"Surface extraction failed at intermediate shape {k}", step=k)

    settings = {
        "model": model,
        "normalize_regularization": normalize_regularization,
        "reference_scale": reference_scale,
    }
    init = propagate(gen, mesh, z_s, z_t, intermediates, mu_r=mu_r, mu_s=mu_s, mu_rel=mu_rel, **settings)
    states = [np.array(s) for s in init.trajectory]
    if len(states) == 1:
        states = states * (steps + 1)

    optimizer = PathOptimizer(gen, mesh, latents, w, mode, mu_r, mu_s, mu_rel, delta, irls_eps, **settings)
    energies = optimizer.pair_energies(states)
    energy = float(w @ energies)
    history = [energies.tolist()]
    converged = False
    iteration = 0

    for iteration in range(1, max_iterations + 1):
        if energy <= np.finfo(float).tiny:
            converged = True
            break
        proposal = optimizer.solve_step(states)
        accepted = None
        alpha = 1.0
        for _ in range(backtracking + 1):
            trial = [states[0]] + [s + alpha * (p - s) for s, p in zip(states[1:-1], proposal[1:-1])] + [states[-1]]
            trial = optimizer.reproject(trial)
            trial_energies = optimizer.pair_energies(trial)
            if float(w @ trial_energies) <= energy:
                accepted = (trial, trial_energies)
                break
            alpha *= 0.5
        if accepted is None:
            converged = True
            logger.info(f"Path optimization stalled at iteration {iteration}; keeping current states")
            break

        new_energy = float(w @ accepted[1])
        decrease = (energy - new_energy) / max(energy, np.finfo(float).tiny)
        states, energies, energy = accepted[0], accepted[1], new_energy
        history.append(energies.tolist())
        logger.debug(f"Path iteration {iteration}: energy {energy:.6e} (relative decrease {decrease:.2e})")
        if decrease < tolerance:
            converged = True
            break

    logger.info(f"Optimized {mode} path with K={intermediates} in {iteration} iterations, energy {energy:.6e}")
    return InterpolationPath(latents, states, w, mode, energies, history, iteration, converged)
