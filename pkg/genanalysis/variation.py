"""Tangent-space variation analysis: modes of H = M^T L M, local affine fits and D."""

import os
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from genanalysis.errors import ContractViolation, GenAnalysisError
from genanalysis.meshing import SurfaceMesh
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

VARIATION_DEFAULTS = {
    "modes": 20,
    "eigen_floor": 1e-10,       # relative to the largest eigenvalue
    "weighting": "floor",       # or "exclude"
    "tikhonov": 1e-8,           # relative to the stencil scatter trace
    "rank_tolerance": 1e-10,    # smallest/largest scatter eigenvalue ratio
    "chunk_rows": 256,
}

MATRIX_MAGIC = b"GAD1"


@dataclass(frozen=True, eq=False)
class VariationModes:
    eigenvalues: np.ndarray     # (L,) ascending, raw
    eigenvectors: np.ndarray    # (q, L) orthonormal
    fields: np.ndarray          # (3n, L), u_l = M v_l
    weights: np.ndarray         # (L,) w_l = lambda_1 / lambda_l after flooring

    @property
    def count(self) -> int:
        return self.eigenvalues.shape[0]


def compute_modes(
    M: np.ndarray,
    L,
    n_modes: int = VARIATION_DEFAULTS["modes"],
    weighting: str = VARIATION_DEFAULTS["weighting"],
    eigen_floor: float = VARIATION_DEFAULTS["eigen_floor"],
) -> VariationModes:
    """
    Eigen-decompose H = M^T L M and map eigenvectors to displacement fields.

    Args:
        M: (3n, q) solve map
        L: (3n, 3n) energy matrix
        n_modes: Number of smallest modes kept (clamped to q)
        weighting: "floor" replaces lambda_l by max(lambda_l, floor * lambda_max);
            "exclude" drops modes below the floor
        eigen_floor: Relative eigenvalue floor

    Returns:
        VariationModes sorted by ascending eigenvalue
    """
    if weighting not in ("floor", "exclude"):
        raise ContractViolation(f"Unknown mode weighting '{weighting}'")
    M = np.asarray(M, dtype=float)
    q = M.shape[1]
    if n_modes > q:
        logger.warning(f"Requested {n_modes} modes but q={q}; using {q}")
        n_modes = q

    H = M.T @ (L @ M)
    H = 0.5 * (H + H.T)
    eigenvalues, eigenvectors = linalg.eigh(H)

    floor = eigen_floor * max(float(eigenvalues[-1]), 0.0)
    if weighting == "exclude":
        keep = eigenvalues > floor
        if not np.any(keep):
            raise GenAnalysisError("All variation modes fall below the eigenvalue floor")
        eigenvalues, eigenvectors = eigenvalues[keep], eigenvectors[:, keep]
        n_modes = min(n_modes, eigenvalues.shape[0])

    eigenvalues = eigenvalues[:n_modes]
    eigenvectors = eigenvectors[:, :n_modes]
    floored = np.maximum(eigenvalues, floor if floor > 0 else np.finfo(float).tiny)
    weights = floored[0] / floored
    return VariationModes(eigenvalues, eigenvectors, M @ eigenvectors, weights)


def _stencil_pairs(mesh: SurfaceMesh) -> Tuple[np.ndarray, np.ndarray]:
    """(owner, member) pairs for j in N_i, self included."""
    edges = mesh.edges
    n = mesh.n_vertices
    owner = np.concatenate([edges[:, 0], np.arange(n)])
    member = np.concatenate([edges[:, 1], np.arange(n)])
    return owner, member


@dataclass(frozen=True, eq=False)
class AffineFits:
    A: np.ndarray           # (n, 3, 3)
    b: np.ndarray           # (n, 3)
    flagged: np.ndarray     # (n,) Tikhonov fallback used


def fit_all(
    mesh: SurfaceMesh,
    field: np.ndarray,
    tikhonov: float = VARIATION_DEFAULTS["tikhonov"],
    rank_tolerance: float = VARIATION_DEFAULTS["rank_tolerance"],
) -> AffineFits:
    """Least-squares affine fit of a vector field over every stencil N_i."""
    n = mesh.n_vertices
    u = np.asarray(field, dtype=float).reshape(n, 3)
    p = mesh.vertices
    owner, member = _stencil_pairs(mesh)
    counts = np.bincount(owner, minlength=n).astype(float)

    p_mean = np.zeros((n, 3))
    u_mean = np.zeros((n, 3))
    np.add.at(p_mean, owner, p[member])
    np.add.at(u_mean, owner, u[member])
    p_mean /= counts[:, None]
    u_mean /= counts[:, None]

    pc = p[member] - p_mean[owner]
    uc = u[member] - u_mean[owner]
    S = np.zeros((n, 3, 3))
    T = np.zeros((n, 3, 3))
    np.add.at(S, owner, np.einsum("ka,kb->kab", pc, pc))
    np.add.at(T, owner, np.einsum("ka,kb->kab", pc, uc))

    eig = np.linalg.eigvalsh(S)
    top = np.maximum(eig[:, -1], np.finfo(float).tiny)
    flagged = (eig[:, 0] / top < rank_tolerance) | (counts < 4)
    if np.any(flagged):
        trace = np.trace(S, axis1=1, axis2=2)
        S[flagged] += (tikhonov * np.maximum(trace[flagged], np.finfo(float).tiny))[:, None, None] * np.eye(3)
        logger.debug(f"Tikhonov fallback on {int(flagged.sum())} rank-deficient stencils")

    At = np.linalg.solve(S, T)
    A = At.transpose(0, 2, 1)
    b = u_mean - np.einsum("nab,nb->na", A, p_mean)
    return AffineFits(A, b, flagged)


def local_affine_fit(mesh: SurfaceMesh, field: np.ndarray, i: int) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    Affine fit (A, b) of the field over N_i.

    Returns:
        (A, b, flagged) where flagged marks the Tikhonov fallback
    """
    if not 0 <= i < mesh.n_vertices:
        raise ContractViolation(f"Vertex {i} out of range")
    nbrs = mesh.neighborhoods[i]
    u = np.asarray(field, dtype=float).reshape(mesh.n_vertices, 3)[nbrs]
    p = mesh.vertices[nbrs]
    p_mean, u_mean = p.mean(axis=0), u.mean(axis=0)
    pc, uc = p - p_mean, u - u_mean
    S = pc.T @ pc
    eig = np.linalg.eigvalsh(S)
    flagged = bool(eig[0] / max(eig[-1], np.finfo(float).tiny) < VARIATION_DEFAULTS["rank_tolerance"] or len(nbrs) < 4)
    if flagged:
        S = S + VARIATION_DEFAULTS["tikhonov"] * max(np.trace(S), np.finfo(float).tiny) * np.eye(3)
        At = np.linalg.solve(S, pc.T @ uc)
    else:
        At = np.linalg.lstsq(pc, uc, rcond=None)[0]
    A = At.T
    return A, u_mean - A @ p_mean, flagged


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    D: np.ndarray

    @property
    def n(self) -> int:
        return self.D.shape[0]

    def save(self, path: str) -> str:
        write_matrix(self.D, path)
        return path

    @classmethod
    def load(cls, path: str) -> "DistanceMatrix":
        return cls(read_matrix(path))


def distance_matrix(
    mesh: SurfaceMesh,
    modes: VariationModes,
    chunk_rows: int = VARIATION_DEFAULTS["chunk_rows"],
) -> DistanceMatrix:
    """
    D(i, j) = sqrt(sum_l w_l eps_lij^2), eps_lij = |A_li p_j + b_li - u_lj|.

    The raw matrix is symmetrized and its diagonal set to zero.
    """
    n = mesh.n_vertices
    p = mesh.vertices
    D2 = np.zeros((n, n))
    flagged = np.zeros(n, dtype=bool)
    for l in range(modes.count):
        u = modes.fields[:, l].reshape(n, 3)
        fits = fit_all(mesh, u)
        flagged |= fits.flagged
        for start in range(0, n, chunk_rows):
            rows = slice(start, min(start + chunk_rows, n))
            pred = np.einsum("iab,jb->ija", fits.A[rows], p) + fits.b[rows, None, :]
            D2[rows] += modes.weights[l] * np.sum((pred - u[None, :, :]) ** 2, axis=2)

    D = np.sqrt(D2)
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    if np.any(flagged):
        logger.info(f"Distance matrix: {int(flagged.sum())} of {n} stencils used the Tikhonov fallback")
    return DistanceMatrix(D)


def write_matrix(matrix: np.ndarray, path: str) -> str:
    """Square float64 matrix as magic + uint32 n + row-major payload."""
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ContractViolation(f"Expected a square matrix, got {matrix.shape}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(MATRIX_MAGIC + struct.pack("<I", matrix.shape[0]))
        f.write(matrix.tobytes(order="C"))
    return path


def read_matrix(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8 or header[:4] != MATRIX_MAGIC:
            raise GenAnalysisError(f"{path} is not a distance matrix file")
        (n,) = struct.unpack("<I", header[4:])
        payload = np.frombuffer(f.read(), dtype="<f8")
    if payload.size != n * n:
        raise GenAnalysisError(f"{path}: expected {n * n} values, found {payload.size}")
    return payload.reshape(n, n).copy()
