"""
As-affine-as-possible deformation system.

Every vertex i carries an infinitesimal transform A_i = s_i I + c_i x + R(a_i)
parameterized by y_i = (s_i; c_i; a_i) through the conformal basis J. The
energy of a displacement field d is

    min_y  sum_i sum_{j in N_i} |A_i (p_i - p_j) - (d_i - d_j)|^2 + y_i^T R y_i

with R = diag(mu_r, 0, 0, 0, mu_s I_5) (times a length scale, see
`regularization_scale`). Writing the residual stack as D_y y - D_d d gives
K = D_d^T D_d, E = -D_d^T D_y, G = D_y^T D_y + R and, after eliminating y,
L = K - E G^-1 E^T and y* = B d with B = -G^-1 E^T.
"""

from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from genanalysis.errors import ContractViolation, FactorizationError
from genanalysis.generator import ImplicitField
from genanalysis.meshing import SurfaceMesh
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

AAAP_DEFAULTS = {
    "mu_r": 1.0,                 # scale regularization
    "mu_s": 1.0,                 # anisotropic regularization
    "reference_scale": 1e-2,     # regularization unit, in squared mean edge lengths
    "mu_rel": 1e-6,              # KKT diagonal shift, relative to mean diag(L)
    "min_normal": 1e-8,          # constraint rows with |grad_x| below this are dropped
    "max_block_condition": 1e12,
    "robust_delta": 1e-6,
    "directions": 16,
}

ANISOTROPIC = slice(4, 9)


def _skew(k: int) -> np.ndarray:
    e = np.zeros(3)
    e[k] = 1.0
    return np.array([
        [0.0, -e[2], e[1]],
        [e[2], 0.0, -e[0]],
        [-e[1], e[0], 0.0],
    ])


def vec(A: np.ndarray) -> np.ndarray:
    """Column-stacking vectorization."""
    return np.asarray(A).reshape(9, order="F")


def unvec(v: np.ndarray) -> np.ndarray:
    return np.asarray(v).reshape(3, 3, order="F")


def build_conformal_basis() -> np.ndarray:
    """
    The 9x9 matrix J with vec(A) = J (s; c; a).

    Column 0 is vec(I), columns 1-3 are vec([e_k]x) and columns 4-8 are an
    orthonormal basis of traceless symmetric matrices obtained by
    orthonormalizing the candidate set {I/sqrt3, skews/sqrt2, symmetric
    generators} and keeping the last five directions.
    """
    sym = []
    for diag in ([1.0, -1.0, 0.0], [1.0, 1.0, -2.0]):
        sym.append(np.diag(diag))
    for r, c in ((0, 1), (0, 2), (1, 2)):
        S = np.zeros((3, 3))
        S[r, c] = S[c, r] = 1.0
        sym.append(S)

    candidates = [np.eye(3) / np.sqrt(3.0)] + [_skew(k) / np.sqrt(2.0) for k in range(3)] + sym
    Q, R = np.linalg.qr(np.stack([vec(M) for M in candidates], axis=1))
    Q = Q * np.sign(np.diag(R))

    J = np.zeros((9, 9))
    J[:, 0] = vec(np.eye(3))
    for k in range(3):
        J[:, 1 + k] = vec(_skew(k))
    J[:, ANISOTROPIC] = Q[:, 4:]
    return J


CONFORMAL_BASIS = build_conformal_basis()


@dataclass(frozen=True)
class AffineParams:
    """Per-vertex y_i = (s_i; c_i; a_i), stored as an (n, 9) array."""
    y: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return self.y[:, 0]

    @property
    def c(self) -> np.ndarray:
        return self.y[:, 1:4]

    @property
    def a(self) -> np.ndarray:
        return self.y[:, ANISOTROPIC]

    def matrices(self, basis: np.ndarray = CONFORMAL_BASIS) -> np.ndarray:
        """Decode to (n, 3, 3) matrices A_i."""
        flat = self.y @ basis.T
        return flat.reshape(-1, 3, 3).transpose(0, 2, 1)


def _edge_blocks(vertices: np.ndarray, edges: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """(m, 3, 9) blocks (e^T kron I3) J for directed edges e = p_i - p_j."""
    e = vertices[edges[:, 0]] - vertices[edges[:, 1]]
    return np.einsum("ka,arc->krc", e, basis.reshape(3, 3, 9))


def _block_diag(blocks: np.ndarray) -> sparse.csr_matrix:
    n, b, _ = blocks.shape
    rows = np.repeat(np.arange(n * b).reshape(n, b), b, axis=1).reshape(-1)
    cols = np.tile(np.arange(b), (n, b)).reshape(n, b * b) + (np.arange(n) * b)[:, None]
    return sparse.csr_matrix((blocks.reshape(-1), (rows, cols.reshape(-1))), shape=(n * b, n * b))


def _diagonal_blocks(G: sparse.spmatrix, size: int = 9) -> np.ndarray:
    coo = G.tocoo()
    same = (coo.row // size) == (coo.col // size)
    n = G.shape[0] // size
    blocks = np.zeros((n, size, size))
    np.add.at(blocks, (coo.row[same] // size, coo.row[same] % size, coo.col[same] % size), coo.data[same])
    return blocks


def invert_blocks(blocks: np.ndarray, max_condition: float = AAAP_DEFAULTS["max_block_condition"]) -> np.ndarray:
    """Invert 9x9 diagonal blocks; raises FactorizationError naming the first bad vertex."""
    cond = np.linalg.cond(blocks)
    bad = np.nonzero(~np.isfinite(cond) | (cond > max_condition))[0]
    if bad.size:
        raise FactorizationError(
            f"G block of vertex {int(bad[0])} is singular (condition {cond[bad[0]]:.3e})",
            vertex=int(bad[0]),
            details={"singular_blocks": int(bad.size)},
        )
    return np.linalg.inv(blocks)


def _difference_operator(edges: np.ndarray, n: int) -> sparse.csr_matrix:
    """D_d: (3m, 3n) mapping d to stacked d_i - d_j."""
    m = edges.shape[0]
    rows = np.repeat(np.arange(3 * m).reshape(m, 3), 2, axis=1)
    ax = np.arange(3)
    cols = np.stack([3 * edges[:, 0][:, None] + ax, 3 * edges[:, 1][:, None] + ax], axis=2).reshape(m, 6)
    vals = np.tile([1.0, -1.0], (m, 3))
    return sparse.csr_matrix((vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))), shape=(3 * m, 3 * n))


def _transform_operator(blocks: np.ndarray, edges: np.ndarray, n: int) -> sparse.csr_matrix:
    """D_y: (3m, 9n) mapping y to stacked A_i e_ij."""
    m = edges.shape[0]
    rows = np.repeat(np.arange(3 * m), 9)
    cols = (9 * np.repeat(edges[:, 0], 3)[:, None] + np.arange(9)).reshape(-1)
    return sparse.csr_matrix((blocks.reshape(-1), (rows, cols)), shape=(3 * m, 9 * n))


def regularization_blocks(n: int, mu_r: float, mu_s: float, scale: float) -> np.ndarray:
    diag = np.array([mu_r, 0.0, 0.0, 0.0] + [mu_s] * 5) * scale
    return np.tile(np.diag(diag), (n, 1, 1))


def regularization_scale(
    offsets: np.ndarray,
    normalize: bool = True,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
) -> float:
    """Multiplier of mu_r and mu_s: reference_scale * mean |e|^2, or 1 when not normalizing."""
    if not normalize:
        return 1.0
    return reference_scale * float(np.mean(np.linalg.norm(offsets, axis=1))) ** 2


def model_basis(model: str) -> np.ndarray:
    """Conformal basis with the anisotropic columns zeroed for ACAP."""
    if model not in ("aaap", "acap"):
        raise ContractViolation(f"Unknown deformation model '{model}'")
    basis = CONFORMAL_BASIS.copy()
    if model == "acap":
        basis[:, ANISOTROPIC] = 0.0
    return basis


def assemble(
    mesh: SurfaceMesh,
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    **kwargs,
) -> Tuple[sparse.csr_matrix, sparse.csr_matrix, sparse.csr_matrix]:
    """Return (K, E, G) for the mesh."""
    system = assemble_system(mesh, mu_r, mu_s, **kwargs)
    return system.K, system.E, system.G


def schur(K: sparse.spmatrix, E: sparse.spmatrix, G: sparse.spmatrix) -> Tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """
    Eliminate y using the block-diagonal structure of G.

    Returns:
        (L, B) with L = K - E G^-1 E^T (symmetrized) and B = -G^-1 E^T
    """
    if G.shape[0] % 9 or E.shape != (K.shape[0], G.shape[0]):
        raise ContractViolation(f"Incompatible shapes K{K.shape} E{E.shape} G{G.shape}")
    G_inv = _block_diag(invert_blocks(_diagonal_blocks(G)))
    B = -(G_inv @ E.T.tocsr()).tocsr()
    L = (K + E @ B).tocsr()
    L = ((L + L.T) * 0.5).tocsr()
    return L, B


@dataclass(eq=False)
class DeformationSystem:
    """Assembled AAAP (or ACAP) quadratic form for one mesh geometry."""
    mesh: SurfaceMesh
    positions: np.ndarray
    mu_r: float
    mu_s: float
    model: str
    regularization_scale: float
    edges: np.ndarray
    edge_weights: np.ndarray
    D_d: sparse.csr_matrix
    D_y: sparse.csr_matrix
    K: sparse.csr_matrix
    E: sparse.csr_matrix
    G: sparse.csr_matrix
    L: sparse.csr_matrix
    B: sparse.csr_matrix
    reg_blocks: np.ndarray = field(repr=False, default=None)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def _check_field(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float).reshape(-1)
        if d.shape[0] != 3 * self.n:
            raise ContractViolation(f"Displacement has length {d.shape[0]}, expected {3 * self.n}")
        return d

    def energy(self, d: np.ndarray) -> float:
        """d^T L d."""
        d = self._check_field(d)
        return float(d @ (self.L @ d))

    def recover_transforms(self, d: np.ndarray) -> AffineParams:
        """Optimal transforms y* = B d."""
        d = self._check_field(d)
        return AffineParams((self.B @ d).reshape(self.n, 9))

    def joint_objective(self, d: np.ndarray, params: AffineParams) -> float:
        """Weighted residual plus regularization for an explicit y."""
        d = self._check_field(d)
        y = params.y.reshape(-1)
        r = self.D_y @ y - self.D_d @ d
        reg = np.einsum("ni,nij,nj->", params.y, self.reg_blocks, params.y)
        return float(r @ r + reg)

    def edge_residuals(self, d: np.ndarray, params: Optional[AffineParams] = None) -> np.ndarray:
        """Unweighted |A_i e_ij - (d_i - d_j)| per directed edge."""
        d = self._check_field(d)
        params = params or self.recover_transforms(d)
        r = (self.D_y @ params.y.reshape(-1) - self.D_d @ d).reshape(-1, 3)
        w = np.sqrt(self.edge_weights)
        safe = np.where(w > 0, w, 1.0)
        return np.linalg.norm(r, axis=1) / safe

    def diagonal_mean(self) -> float:
        return float(self.L.diagonal().mean())

    def diagnostics(self) -> Dict[str, float]:
        cond = np.linalg.cond(_diagonal_blocks(self.G))
        return {
            "n_vertices": self.n,
            "n_edges": int(self.edges.shape[0]),
            "model": self.model,
            "nnz_L": int(self.L.nnz),
            "mean_diag_L": self.diagonal_mean(),
            "max_G_block_condition": float(cond.max()),
            "regularization_scale": self.regularization_scale,
        }


def assemble_system(
    mesh: SurfaceMesh,
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    model: str = "aaap",
    positions: Optional[np.ndarray] = None,
    edge_weights: Optional[np.ndarray] = None,
    normalize_regularization: bool = True,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
) -> DeformationSystem:
    """
    Assemble K, E, G and eliminate y.

    With normalize_regularization (the default) the penalty on vertex i is
    (mu_r s_i^2 + mu_s |a_i|^2) * reference_scale * mean_edge_length^2, so
    for d = A p with A traceless symmetric the optimum pays that scaled
    amount, not sum mu_s |a_i*|^2. Pass normalize_regularization=False to
    use mu_r and mu_s as absolute weights.

    Args:
        mesh: Connectivity (and default geometry)
        mu_r: Scale regularization weight (> 0)
        mu_s: Anisotropic regularization weight (> 0)
        model: "aaap", or "acap" to freeze the anisotropic coefficients at zero
        positions: Alternative (n, 3) vertex positions sharing the mesh connectivity
        edge_weights: Optional positive weight per directed edge (IRLS)
        normalize_regularization: Multiply mu_r, mu_s by reference_scale * mean_edge_length^2
        reference_scale: Regularization unit in squared mean edge lengths

    Returns:
        DeformationSystem

    Raises:
        ContractViolation: On non-positive weights or shape mismatches
        FactorizationError: If a G block is singular
    """
    if mu_r <= 0 or mu_s <= 0:
        raise ContractViolation(f"mu_r and mu_s must be positive, got {mu_r}, {mu_s}")
    basis = model_basis(model)

    p = mesh.vertices if positions is None else np.asarray(positions, dtype=float)
    if p.shape != mesh.vertices.shape:
        raise ContractViolation(f"Positions have shape {p.shape}, mesh has {mesh.vertices.shape}")
    n = p.shape[0]
    edges = mesh.edges

    weights = np.ones(edges.shape[0]) if edge_weights is None else np.asarray(edge_weights, dtype=float)
    if weights.shape != (edges.shape[0],) or np.any(weights <= 0):
        raise ContractViolation("Edge weights must be positive, one per directed edge")

    scale = regularization_scale(p[edges[:, 0]] - p[edges[:, 1]], normalize_regularization, reference_scale)

    blocks = _edge_blocks(p, edges, basis)
    row_scale = sparse.diags(np.repeat(np.sqrt(weights), 3))
    D_d = (row_scale @ _difference_operator(edges, n)).tocsr()
    D_y = (row_scale @ _transform_operator(blocks, edges, n)).tocsr()

    reg = regularization_blocks(n, mu_r, mu_s, scale)
    K = (D_d.T @ D_d).tocsr()
    E = (-(D_d.T @ D_y)).tocsr()
    G = (D_y.T @ D_y + _block_diag(reg)).tocsr()
    L, B = schur(K, E, G)

    logger.debug(f"Assembled {model} system: n={n}, edges={edges.shape[0]}, nnz(L)={L.nnz}")
    return DeformationSystem(
        mesh=mesh, positions=p, mu_r=mu_r, mu_s=mu_s, model=model, regularization_scale=scale,
        edges=edges, edge_weights=weights, D_d=D_d, D_y=D_y, K=K, E=E, G=G, L=L, B=B, reg_blocks=reg,
    )


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """
    Linearized level-set constraints C d = -F v, one row per kept vertex.

    Rows are normalized by |grad_x|; dropped vertices inherit the mean
    displacement of their neighbors.
    """
    C: sparse.csr_matrix
    F: np.ndarray
    values: np.ndarray
    rows: np.ndarray
    dropped: np.ndarray
    normal_norms: np.ndarray
    n_vertices: int


def constraint_matrices(
    gen: ImplicitField,
    mesh: SurfaceMesh,
    z: np.ndarray,
    positions: Optional[np.ndarray] = None,
    min_normal: float = AAAP_DEFAULTS["min_normal"],
) -> ConstraintSet:
    """
    Row i of C holds grad_x(p_i, z)^T and row i of F holds grad_z(p_i, z)^T.

    Args:
        gen: Implicit field
        mesh: Mesh whose vertices (or `positions`) are constrained
        z: Latent code
        positions: Alternative vertex positions
        min_normal: Rows with smaller |grad_x| are dropped and flagged

    Returns:
        ConstraintSet
    """
    p = mesh.vertices if positions is None else np.asarray(positions, dtype=float)
    n = p.shape[0]
    sample = gen.evaluate(p, z)
    norms = np.linalg.norm(sample.grad_x, axis=1)
    keep = norms >= min_normal
    rows = np.nonzero(keep)[0]
    dropped = np.nonzero(~keep)[0]
    if dropped.size:
        logger.warning(f"Dropped {dropped.size} constraint rows with vanishing normals")

    inv = 1.0 / norms[rows]
    grad = sample.grad_x[rows] * inv[:, None]
    r = rows.shape[0]
    C = sparse.csr_matrix(
        (grad.reshape(-1), (np.repeat(np.arange(r), 3), (3 * rows[:, None] + np.arange(3)).reshape(-1))),
        shape=(r, 3 * n),
    )
    F = sample.grad_z[rows] * inv[:, None]
    values = sample.values[rows] * inv
    return ConstraintSet(C, F, values, rows, dropped, norms, n)


def _fill_dropped(d: np.ndarray, mesh: SurfaceMesh, dropped: np.ndarray) -> np.ndarray:
    if dropped.size == 0:
        return d
    field3 = d.reshape(mesh.n_vertices, 3, -1)
    dropped_set = set(int(i) for i in dropped)
    for i in dropped:
        nbrs = [j for j in mesh.neighborhoods[i] if j != i and int(j) not in dropped_set]
        field3[i] = field3[nbrs].mean(axis=0) if nbrs else 0.0
    return field3.reshape(d.shape)


class KKTSolver:
    """
    Factored saddle-point system [[L + mu I, C^T], [C, 0]].

    One factorization serves every right-hand side; solves only read the
    factorization.
    """

    def __init__(self, system: DeformationSystem, constraints: ConstraintSet, mu_rel: float = AAAP_DEFAULTS["mu_rel"]):
        if constraints.n_vertices != system.n:
            raise ContractViolation("Constraint set and system refer to different vertex counts")
        self.system = system
        self.constraints = constraints
        self.mu = mu_rel * system.diagonal_mean()
        n3 = 3 * system.n
        r = constraints.C.shape[0]
        top = system.L + self.mu * sparse.identity(n3, format="csr")
        self.matrix = sparse.bmat([[top, constraints.C.T], [constraints.C, None]], format="csc")
        self.size = n3 + r
        try:
            self.lu = splinalg.splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as e:
            vertex = int(constraints.rows[np.argmin(constraints.normal_norms[constraints.rows])]) if r else -1
            raise FactorizationError(f"KKT factorization failed: {e}", vertex=vertex)

    def solve(self, constraint_rhs: np.ndarray) -> np.ndarray:
        """
        Minimize d^T (L + mu I) d subject to C d = rhs.

        Args:
            constraint_rhs: (r,) or (r, k) right-hand sides

        Returns:
            (3n,) or (3n, k) displacements, dropped vertices filled from neighbors
        """
        rhs_c = np.asarray(constraint_rhs, dtype=float)
        squeeze = rhs_c.ndim == 1
        rhs_c = rhs_c.reshape(rhs_c.shape[0], -1)
        n3 = 3 * self.system.n
        rhs = np.zeros((self.size, rhs_c.shape[1]))
        rhs[n3:] = rhs_c

        sol = self.lu.solve(rhs)
        sol += self.lu.solve(rhs - self.matrix @ sol)
        if not np.all(np.isfinite(sol)):
            raise FactorizationError("KKT solve produced non-finite values")
        d = _fill_dropped(sol[:n3], self.system.mesh, self.constraints.dropped)
        return d[:, 0] if squeeze else d


@dataclass(frozen=True, eq=False)
class DisplacementField:
    d: np.ndarray
    z: np.ndarray
    direction: np.ndarray

    @property
    def per_vertex(self) -> np.ndarray:
        return self.d.reshape(-1, 3)


class DisplacementSolver:
    """Solve map M(z): latent directions v to displacement fields d = M v."""

    def __init__(self, system: DeformationSystem, constraints: ConstraintSet, z: np.ndarray,
                 mu_rel: float = AAAP_DEFAULTS["mu_rel"]):
        self.system = system
        self.constraints = constraints
        self.z = np.asarray(z, dtype=float)
        self.kkt = KKTSolver(system, constraints, mu_rel)

    @property
    def q(self) -> int:
        return self.constraints.F.shape[1]

    def solve(self, v: np.ndarray) -> DisplacementField:
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.shape[0] != self.q:
            raise ContractViolation(f"Direction has dimension {v.shape[0]}, expected {self.q}")
        d = self.kkt.solve(-self.constraints.F @ v)
        return DisplacementField(d, self.z, v)

    @cached_property
    def M(self) -> np.ndarray:
        """(3n, q) solve map, one column per latent axis."""
        return self.kkt.solve(-self.constraints.F)


def solve_displacement(
    system: DeformationSystem,
    constraints: ConstraintSet,
    v: np.ndarray,
    z: Optional[np.ndarray] = None,
    mu_rel: float = AAAP_DEFAULTS["mu_rel"],
) -> DisplacementField:
    """One-off constrained solve; use DisplacementSolver to reuse the factorization."""
    z = np.zeros(constraints.F.shape[1]) if z is None else z
    return DisplacementSolver(system, constraints, z, mu_rel).solve(v)


def robust_norm(r: np.ndarray, delta: float = AAAP_DEFAULTS["robust_delta"]) -> np.ndarray:
    """sqrt(r^2 + delta^2) - delta, zero at r = 0."""
    return np.sqrt(r * r + delta * delta) - delta


def sphere_directions(q: int, count: int, seed: int) -> np.ndarray:
    """Unit directions uniform on the sphere in R^q."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, q))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class RegularizerEstimate:
    value: float
    edge_residuals: np.ndarray     # (m,) mean over directions of per-edge r^alpha
    directions: np.ndarray
    alpha: float
    model: str


def evaluate_regularizer(
    gen: ImplicitField,
    mesh: SurfaceMesh,
    z: np.ndarray,
    n_directions: int = AAAP_DEFAULTS["directions"],
    alpha: float = 1.0,
    model: str = "aaap",
    seed: int = 0,
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    mu_rel: float = AAAP_DEFAULTS["mu_rel"],
    delta: float = AAAP_DEFAULTS["robust_delta"],
    directions: Optional[np.ndarray] = None,
    normalize_regularization: bool = True,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
) -> RegularizerEstimate:
    """
    Monte Carlo estimate of the structure-preserving regularizer.

    For directions v on the unit sphere: d = M(z) v, y* = B d and
    r_ij = |A_i e_ij - (d_i - d_j)|; the estimate is the mean over v of
    sum_ij r_ij^alpha, with the smoothed robust norm when alpha = 1.

    Args:
        gen: Implicit field
        mesh: Mesh of g(., z) = 0
        z: Latent code
        n_directions: Number of sampled directions
        alpha: 1 (robust) or 2 (squared)
        model: "aaap" or "acap"
        seed: Direction sampling seed
        mu_r: Scale regularization
        mu_s: Anisotropic regularization
        mu_rel: KKT diagonal shift
        delta: Robust-norm smoothing
        directions: Explicit (k, q) directions, overriding sampling
        normalize_regularization: See assemble_system
        reference_scale: Regularization unit in squared mean edge lengths

    Returns:
        RegularizerEstimate
    """
    if alpha not in (1, 1.0, 2, 2.0):
        raise ContractViolation(f"alpha must be 1 or 2, got {alpha}")
    if directions is None:
        if n_directions < 1:
            raise ContractViolation("Need at least one direction")
        directions = sphere_directions(gen.q, n_directions, seed)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))

    system = assemble_system(
        mesh, mu_r, mu_s, model=model,
        normalize_regularization=normalize_regularization, reference_scale=reference_scale,
    )
    solver = DisplacementSolver(system, constraint_matrices(gen, mesh, z), z, mu_rel)
    fields = solver.M @ directions.T

    per_edge = np.zeros(system.edges.shape[0])
    for k in range(fields.shape[1]):
        r = system.edge_residuals(fields[:, k])
        per_edge += robust_norm(r, delta) if alpha == 1 else r * r
    per_edge /= fields.shape[1]
    value = float(per_edge.sum())
    logger.info(f"Regularizer ({model}, alpha={alpha:g}) over {fields.shape[1]} directions: {value:.6e}")
    return RegularizerEstimate(value, per_edge, directions, float(alpha), model)


def fit_local_transforms(
    offsets: np.ndarray,
    targets: np.ndarray,
    heads: np.ndarray,
    n: int,
    reg_blocks: np.ndarray,
    weights: Optional[np.ndarray] = None,
    basis: np.ndarray = CONFORMAL_BASIS,
) -> Tuple[AffineParams, np.ndarray]:
    """
    Per-vertex regularized fit of A_i e ~ t over the vertex's edges.

    Args:
        offsets: (m, 3) edge vectors e
        targets: (m, 3) vectors the transforms should reproduce
        heads: (m,) owning vertex of each edge
        n: Vertex count
        reg_blocks: (n, 9, 9) regularization
        weights: Optional (m,) edge weights
        basis: Conformal basis (anisotropic columns zeroed for ACAP)

    Returns:
        (AffineParams, (m,) residual norms)
    """
    w = np.ones(offsets.shape[0]) if weights is None else weights
    blocks = np.einsum("ka,arc->krc", offsets, basis.reshape(3, 3, 9))
    normal = np.array(reg_blocks, dtype=float)
    np.add.at(normal, heads, w[:, None, None] * np.einsum("kri,krj->kij", blocks, blocks))
    rhs = np.zeros((n, 9))
    np.add.at(rhs, heads, w[:, None] * np.einsum("kri,kr->ki", blocks, targets))
    y = np.linalg.solve(normal, rhs[:, :, None])[:, :, 0]
    residual = np.linalg.norm(np.einsum("krc,kc->kr", blocks, y[heads]) - targets, axis=1)
    return AffineParams(y), residual


def robust_energy(
    mesh: SurfaceMesh,
    positions: np.ndarray,
    d: np.ndarray,
    mu_r: float = AAAP_DEFAULTS["mu_r"],
    mu_s: float = AAAP_DEFAULTS["mu_s"],
    delta: float = AAAP_DEFAULTS["robust_delta"],
    irls_eps: float = 1e-4,
    iterations: int = 10,
    reference_scale: float = AAAP_DEFAULTS["reference_scale"],
    normalize_regularization: bool = True,
    model: str = "aaap",
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    min_y sum_ij rho(r_ij) + y^T R y with rho the smoothed robust norm.

    The inner minimization over y runs a few reweighted least-squares passes.
    Regularization scaling and the model follow assemble_system.

    Returns:
        (energy, (m,) IRLS edge weights, (m,) edge residuals) at the final transforms
    """
    p = np.asarray(positions, dtype=float)
    n = p.shape[0]
    edges = mesh.edges
    heads = edges[:, 0]
    offsets = p[heads] - p[edges[:, 1]]
    d3 = np.asarray(d, dtype=float).reshape(n, 3)
    targets = d3[heads] - d3[edges[:, 1]]
    scale = regularization_scale(offsets, normalize_regularization, reference_scale)
    reg = regularization_blocks(n, mu_r, mu_s, scale)
    basis = model_basis(model)

    weights = np.ones(edges.shape[0])
    for _ in range(iterations):
        params, r = fit_local_transforms(offsets, targets, heads, n, reg, weights, basis)
        weights = 1.0 / np.maximum(np.sqrt(r * r + delta * delta), irls_eps)
    params, r = fit_local_transforms(offsets, targets, heads, n, reg, weights, basis)
    reg_term = float(np.einsum("ni,nij,nj->", params.y, reg, params.y))
    weights = 1.0 / np.maximum(np.sqrt(r * r + delta * delta), irls_eps)
    return float(robust_norm(r, delta).sum()) + reg_term, weights, r
