"""Surface extraction, neighborhoods and surface sampling."""

from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional

import numpy as np
import trimesh
from scipy import sparse
from scipy.sparse import csgraph
from skimage import measure

from genanalysis.errors import EmptyLevelSetError, MeshError
from genanalysis.generator import ImplicitField
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

# Extraction defaults
MESHING_DEFAULTS = {
    "resolution": 96,
    "bounds": 1.1,
    "target_vertices": 2000,
    "projection_tolerance": 1e-5,
    "projection_iterations": 30,
    "chunk_size": 65536,
}


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """
    Triangle mesh of a zero level set.

    Neighborhoods, edges and adjacency are derived lazily and cached; the
    arrays themselves are never mutated.
    """
    vertices: np.ndarray
    faces: np.ndarray
    latent: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"Vertices must be (n, 3), got {v.shape}")
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise MeshError("Triangle indices out of range", {"n_vertices": v.shape[0]})
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric vertex adjacency without self loops."""
        f = self.faces
        rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
        cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
        adj = sparse.coo_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(self.n_vertices,) * 2).tocsr()
        adj.data[:] = 1.0
        adj.setdiag(0)
        adj.eliminate_zeros()
        adj.sort_indices()
        return adj

    @cached_property
    def neighborhoods(self) -> List[np.ndarray]:
        """N_i: 1-ring neighbors plus i itself, sorted."""
        adj = self.adjacency
        counts = np.diff(adj.indptr)
        isolated = np.nonzero(counts == 0)[0]
        if isolated.size:
            raise MeshError(f"Isolated vertex {int(isolated[0])}", {"isolated": isolated[:20].tolist()})
        return [np.sort(np.append(adj.indices[adj.indptr[i]:adj.indptr[i + 1]], i)) for i in range(self.n_vertices)]

    @cached_property
    def edges(self) -> np.ndarray:
        """Directed edges (i, j), j in N_i \\ {i}, grouped by i."""
        self.neighborhoods
        coo = self.adjacency.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return np.stack([coo.row[order], coo.col[order]], axis=1).astype(np.int64)

    @cached_property
    def undirected_edges(self) -> np.ndarray:
        e = self.edges
        return e[e[:, 0] < e[:, 1]]

    @property
    def mean_edge_length(self) -> float:
        e = self.undirected_edges
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    @property
    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)

    def components(self) -> np.ndarray:
        """Connected-component id per vertex."""
        _, labels = csgraph.connected_components(self.adjacency, directed=False)
        return labels

    def euler_characteristics(self) -> List[int]:
        """V - E + F for each connected component."""
        labels = self.components()
        result = []
        for comp in range(labels.max() + 1):
            keep = labels[self.faces[:, 0]] == comp
            sub = trimesh.Trimesh(self.vertices, self.faces[keep], process=False)
            sub.remove_unreferenced_vertices()
            result.append(int(sub.euler_number))
        return result

    def graph_distances(self, sources: np.ndarray) -> np.ndarray:
        """Shortest-path distances along mesh edges from each source vertex."""
        e = self.undirected_edges
        lengths = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        graph = sparse.coo_matrix((lengths, (e[:, 0], e[:, 1])), shape=(self.n_vertices,) * 2).tocsr()
        return csgraph.dijkstra(graph, directed=False, indices=np.asarray(sources, dtype=int))

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(np.array(self.vertices), np.array(self.faces), process=False)


@dataclass(frozen=True)
class SamplePointSet:
    """Points on a surface with optional per-point labels."""
    points: np.ndarray
    face_index: np.ndarray
    latent: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = field(default=None)


def neighborhoods(mesh: SurfaceMesh) -> List[np.ndarray]:
    """Per-vertex 1-ring plus self; raises MeshError on an isolated vertex."""
    return mesh.neighborhoods


def _sample_grid(field: ImplicitField, z: np.ndarray, resolution: int, bounds: float, chunk: int) -> np.ndarray:
    axis = np.linspace(-bounds, bounds, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    values = np.empty(points.shape[0])
    for start in range(0, points.shape[0], chunk):
        values[start:start + chunk] = field.evaluate(points[start:start + chunk], z).values
    return values.reshape(resolution, resolution, resolution)


def _cluster_vertices(vertices: np.ndarray, faces: np.ndarray, cell: float):
    """Uniform vertex-clustering decimation at the given cell size."""
    keys = np.floor((vertices - vertices.min(axis=0)) / cell).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_clusters = inverse.max() + 1
    counts = np.bincount(inverse, minlength=n_clusters).astype(float)
    merged = np.zeros((n_clusters, 3))
    np.add.at(merged, inverse, vertices)
    merged /= counts[:, None]

    new_faces = inverse[faces]
    valid = (
        (new_faces[:, 0] != new_faces[:, 1])
        & (new_faces[:, 1] != new_faces[:, 2])
        & (new_faces[:, 0] != new_faces[:, 2])
    )
    new_faces = new_faces[valid]
    _, first = np.unique(np.sort(new_faces, axis=1), axis=0, return_index=True)
    new_faces = new_faces[np.sort(first)]
    return _drop_unreferenced(merged, new_faces)


def _drop_unreferenced(vertices: np.ndarray, faces: np.ndarray):
    used = np.zeros(vertices.shape[0], dtype=bool)
    used[faces.ravel()] = True
    remap = -np.ones(vertices.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.sum())
    return vertices[used], remap[faces]


def _decimate(vertices: np.ndarray, faces: np.ndarray, target: int):
    if vertices.shape[0] <= target:
        return vertices, faces
    extent = float(np.max(vertices.max(axis=0) - vertices.min(axis=0)))
    lo, hi = 1e-6, extent
    best = (vertices, faces)
    for _ in range(40):
        cell = 0.5 * (lo + hi)
        v, f = _cluster_vertices(vertices, faces, cell)
        best = (v, f)
        if abs(v.shape[0] - target) <= 0.05 * target:
            break
        if v.shape[0] > target:
            lo = cell
        else:
            hi = cell
    return best


def project_to_surface(
    field: ImplicitField,
    z: np.ndarray,
    points: np.ndarray,
    tolerance: float = MESHING_DEFAULTS["projection_tolerance"],
    max_iterations: int = MESHING_DEFAULTS["projection_iterations"],
    max_step: Optional[float] = None,
):
    """
    Newton steps p <- p - g grad / |grad|^2 until |g| < tolerance.

    Returns:
        (projected points, converged mask)
    """
    p = np.array(points, dtype=float)
    active = np.ones(p.shape[0], dtype=bool)
    for _ in range(max_iterations):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        sample = field.evaluate(p[idx], z)
        done = np.abs(sample.values) < tolerance
        active[idx[done]] = False
        step_rows = ~done
        if not np.any(step_rows):
            break
        grad = sample.grad_x[step_rows]
        norm2 = np.einsum("nd,nd->n", grad, grad)
        norm2 = np.where(norm2 < 1e-16, 1.0, norm2)
        step = -(sample.values[step_rows] / norm2)[:, None] * grad
        if max_step is not None:
            length = np.linalg.norm(step, axis=1)
            scale = np.minimum(1.0, max_step / np.maximum(length, 1e-300))
            step *= scale[:, None]
        p[idx[step_rows]] += step
    final = np.abs(field.evaluate(p, z).values)
    return p, final < tolerance


def extract_mesh(
    field: ImplicitField,
    z: np.ndarray,
    resolution: int = MESHING_DEFAULTS["resolution"],
    target_vertices: Optional[int] = MESHING_DEFAULTS["target_vertices"],
    bounds: float = MESHING_DEFAULTS["bounds"],
    tolerance: float = MESHING_DEFAULTS["projection_tolerance"],
) -> SurfaceMesh:
    """
    Marching-cubes mesh of g(., z) = 0 inside [-bounds, bounds]^3.

    Args:
        field: Implicit field (generator)
        z: Latent code
        resolution: Grid samples per axis
        target_vertices: Approximate vertex count after decimation (None keeps all)
        bounds: Half-width of the sampling box
        tolerance: |g| reached by the final Newton projection

    Returns:
        SurfaceMesh with vertices on the level set

    Raises:
        EmptyLevelSetError: If the level set misses the sampling box
    """
    z = np.asarray(z, dtype=float)
    volume = _sample_grid(field, z, resolution, bounds, MESHING_DEFAULTS["chunk_size"])
    if volume.min() >= 0 or volume.max() <= 0:
        raise EmptyLevelSetError(
            "Zero level set does not cross the sampling box",
            {"min": float(volume.min()), "max": float(volume.max())},
        )

    spacing = 2.0 * bounds / (resolution - 1)
    vertices, faces, _, _ = measure.marching_cubes(
        volume, level=0.0, spacing=(spacing,) * 3, gradient_direction="ascent", allow_degenerate=False
    )
    vertices = vertices - bounds
    vertices, faces = _drop_unreferenced(vertices, faces.astype(np.int64))

    if target_vertices is not None:
        vertices, faces = _decimate(vertices, faces, target_vertices)

    vertices, converged = project_to_surface(field, z, vertices, tolerance, max_step=spacing)
    if not np.all(converged):
        logger.warning(f"{int((~converged).sum())} vertices did not reach |g| < {tolerance:g}")

    mesh = SurfaceMesh(vertices, faces, z)
    _warn_non_manifold(mesh)
    logger.info(f"Extracted mesh: {mesh.n_vertices} vertices, {faces.shape[0]} faces (resolution {resolution})")
    return mesh


def _warn_non_manifold(mesh: SurfaceMesh):
    f = mesh.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    bad = int(np.sum(counts > 2))
    if bad:
        logger.warning(f"Mesh has {bad} non-manifold edges; neighborhoods are still defined")


def sample_surface(mesh: SurfaceMesh, count: int, seed: int = 0) -> SamplePointSet:
    """
    Area-weighted uniform samples on the mesh.

    Raises:
        MeshError: If the mesh is empty or has zero area
    """
    if mesh.faces.shape[0] == 0:
        raise MeshError("Cannot sample an empty mesh")
    if float(mesh.face_areas.sum()) <= 0.0:
        raise MeshError("Cannot sample a mesh with zero total area")
    points, face_index = trimesh.sample.sample_surface(mesh.to_trimesh(), count, seed=seed)[:2]
    return SamplePointSet(np.asarray(points), np.asarray(face_index), mesh.latent)


def level_set_crosses(field: ImplicitField, z: np.ndarray, resolution: int = 32,
                      bounds: float = MESHING_DEFAULTS["bounds"]) -> bool:
    """Coarse check that g(., z) changes sign inside the sampling box."""
    volume = _sample_grid(field, np.asarray(z, dtype=float), resolution, bounds, MESHING_DEFAULTS["chunk_size"])
    return bool(volume.min() < 0 < volume.max())
