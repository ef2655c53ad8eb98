"""
Consistent segmentation across a shape family.

Each shape is over-segmented with a normalized cut on its distance matrix D.
Over-segments of all shapes become nodes of one block affinity matrix W:
diagonal blocks carry single-shape cues, off-diagonal blocks carry
correspondence overlap. Spectral clustering of W yields labels that agree
across shapes.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, sparse
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree
from sklearn.cluster import KMeans
from sklearn.mixture import GaussianMixture

from genanalysis.errors import ContractViolation, MissingCorrespondenceError
from genanalysis.matching import CorrespondenceSet
from genanalysis.meshing import SurfaceMesh
from genanalysis.variation import DistanceMatrix
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

COSEG_DEFAULTS = {
    "over_segments": 60,
    "neighbors": 10,
    "candidates": 15,
    "balance": 2.0,             # lambda
    "embedding_dim": 10,        # L
    "cluster_range": (2, 10),   # inclusive M range
    "self_loop": 1e-8,
    "eigen_floor": 1e-10,
    "scaling": "all",           # or "last"
    "radius": "covering",       # or "diameter"
    "dense_limit": 1500,
    "seed": 0,
}

AdjacencyLike = Union[SurfaceMesh, sparse.spmatrix, np.ndarray]


def _as_array(D) -> np.ndarray:
    return D.D if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=float)


def _as_adjacency(graph: AdjacencyLike) -> sparse.csr_matrix:
    if isinstance(graph, SurfaceMesh):
        A = graph.adjacency
    else:
        A = sparse.csr_matrix(graph)
    A = sparse.csr_matrix(A, dtype=bool).astype(float)
    A.setdiag(0.0)
    A.eliminate_zeros()
    return A


@dataclass(frozen=True, eq=False)
class OverSegmentation:
    labels: np.ndarray      # (n,) in [0, m)
    m: int

    @property
    def members(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.labels == s) for s in range(self.m)]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.m)

    def membership(self) -> sparse.csr_matrix:
        """(n, m) indicator matrix."""
        n = self.labels.shape[0]
        return sparse.csr_matrix((np.ones(n), (np.arange(n), self.labels)), shape=(n, self.m))


def kernel_affinity(D: np.ndarray, A: sparse.csr_matrix) -> sparse.csr_matrix:
    """exp(-D^2 / 2 sigma^2) on the edges of A, sigma the median edge distance."""
    rows, cols = A.nonzero()
    d = D[rows, cols]
    sigma = float(np.median(d)) if d.size else 1.0
    if sigma <= 0:
        positive = d[d > 0]
        sigma = float(np.median(positive)) if positive.size else 1.0
    w = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    return sparse.csr_matrix((w, (rows, cols)), shape=A.shape)


def _spectral_embedding(W: sparse.csr_matrix, k: int, dense_limit: int, seed: int) -> np.ndarray:
    """Leading k eigenvectors of D^-1/2 W D^-1/2, rows normalized."""
    n = W.shape[0]
    deg = np.asarray(W.sum(axis=1)).ravel()
    deg = np.where(deg > 0, deg, COSEG_DEFAULTS["self_loop"])
    inv_sqrt = sparse.diags(1.0 / np.sqrt(deg))
    N = inv_sqrt @ W @ inv_sqrt
    if n <= dense_limit or k >= n - 1:
        _, vectors = linalg.eigh(N.toarray())
        vectors = vectors[:, -k:]
    else:
        v0 = np.random.default_rng(seed).standard_normal(n)
        _, vectors = eigsh(N, k=k, which="LA", v0=v0)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    return vectors / np.maximum(norms, np.finfo(float).tiny)


def _connected_pieces(labels: np.ndarray, A: sparse.csr_matrix) -> np.ndarray:
    """Relabel so every label is a connected region of A."""
    A = A.tocoo()
    same = labels[A.row] == labels[A.col]
    G = sparse.csr_matrix((np.ones(int(same.sum())), (A.row[same], A.col[same])), shape=A.shape)
    _, pieces = connected_components(G, directed=False)
    return pieces


def _compact(labels: np.ndarray) -> np.ndarray:
    _, compact = np.unique(labels, return_inverse=True)
    return compact.astype(np.int64)


def _merge_smallest(labels: np.ndarray, W: sparse.csr_matrix, D: np.ndarray) -> np.ndarray:
    count = int(labels.max()) + 1
    sizes = np.bincount(labels, minlength=count)
    small = int(np.argmin(sizes))
    S = sparse.csr_matrix((np.ones(labels.shape[0]), (np.arange(labels.shape[0]), labels)), shape=(labels.shape[0], count))
    links = np.asarray((S.T @ W @ S)[small].todense()).ravel()
    links[small] = 0.0
    if np.any(links > 0):
        target = int(np.argmax(links))
    else:
        # isolated component: join the closest piece by mean distance
        inside = labels == small
        mean_d = np.array([D[np.ix_(inside, labels == t)].mean() if t != small else np.inf for t in range(count)])
        target = int(np.argmin(mean_d))
        logger.warning(f"Over-segment {small} has no mesh neighbour; merged into {target} by distance")
    labels = labels.copy()
    labels[labels == small] = target
    return _compact(labels)


def _split_largest(labels: np.ndarray, W: sparse.csr_matrix, A: sparse.csr_matrix) -> np.ndarray:
    sizes = np.bincount(labels)
    big = int(np.argmax(sizes))
    idx = np.flatnonzero(labels == big)
    if idx.size < 2:
        raise ContractViolation("Cannot split a singleton segment")
    sub = W[idx][:, idx].toarray()
    if idx.size == 2 or not np.any(sub):
        half = np.arange(idx.size) >= idx.size // 2
    else:
        deg = sub.sum(axis=1)
        deg = np.where(deg > 0, deg, COSEG_DEFAULTS["self_loop"])
        Lsym = np.eye(idx.size) - sub / np.sqrt(np.outer(deg, deg))
        _, vectors = linalg.eigh(Lsym)
        fiedler = vectors[:, 1] / np.sqrt(deg)
        half = fiedler > np.median(fiedler)
        if half.all() or not half.any():
            half = np.argsort(np.argsort(fiedler)) >= idx.size // 2
    labels = labels.copy()
    labels[idx[half]] = labels.max() + 1
    return _compact(_connected_pieces(labels, A))


def over_segment(
    D: Union[DistanceMatrix, np.ndarray],
    graph: AdjacencyLike,
    m: int = COSEG_DEFAULTS["over_segments"],
    seed: int = COSEG_DEFAULTS["seed"],
    dense_limit: int = COSEG_DEFAULTS["dense_limit"],
) -> OverSegmentation:
    """
    Normalized-cut over-segmentation into exactly m connected segments.

    Args:
        D: (n, n) symmetric distance matrix
        graph: Mesh or (n, n) adjacency that masks the affinity
        m: Segment count
        seed: k-means seed

    Returns:
        OverSegmentation with labels in [0, m)

    Raises:
        ContractViolation: m outside [1, n] or D not square
    """
    D = _as_array(D)
    n = D.shape[0]
    if D.ndim != 2 or D.shape[1] != n:
        raise ContractViolation(f"Distance matrix must be square, got {D.shape}")
    if not 1 <= m <= n:
        raise ContractViolation(f"Cannot split {n} samples into {m} segments")
    if m == n:
        return OverSegmentation(np.arange(n), m)

    A = _as_adjacency(graph)
    if A.shape != (n, n):
        raise ContractViolation(f"Adjacency shape {A.shape} does not match D {D.shape}")
    W = kernel_affinity(D, A)

    if m == 1:
        labels = np.zeros(n, dtype=np.int64)
    else:
        embedding = _spectral_embedding(W, m, dense_limit, seed)
        labels = KMeans(n_clusters=m, n_init=10, random_state=seed).fit_predict(embedding)
    labels = _compact(_connected_pieces(labels, A))

    for _ in range(4 * n):
        count = int(labels.max()) + 1
        if count == m:
            break
        labels = _merge_smallest(labels, W, D) if count > m else _split_largest(labels, W, A)
    else:
        raise ContractViolation(f"Could not reach {m} connected segments")
    logger.debug(f"Over-segmented {n} samples into {m} segments")
    return OverSegmentation(labels.astype(np.int64), m)


def normalized_cut_value(W: np.ndarray, labels: np.ndarray) -> float:
    """Sum over clusters of cut(C, rest) / assoc(C, all)."""
    W = np.asarray(W, dtype=float)
    deg = W.sum(axis=1)
    total = 0.0
    for c in np.unique(labels):
        inside = labels == c
        vol = deg[inside].sum()
        if vol > 0:
            total += W[np.ix_(inside, ~inside)].sum() / vol
    return float(total)


def segment_distance(D: Union[DistanceMatrix, np.ndarray], seg_a: Sequence[int], seg_b: Sequence[int]) -> float:
    """Mean of D(i, j) over i in seg_a, j in seg_b."""
    seg_a, seg_b = np.asarray(seg_a, dtype=int), np.asarray(seg_b, dtype=int)
    if seg_a.size == 0 or seg_b.size == 0:
        raise ContractViolation("Segments must be non-empty")
    return float(_as_array(D)[np.ix_(seg_a, seg_b)].mean())


def segment_distance_matrix(D: Union[DistanceMatrix, np.ndarray], overseg: OverSegmentation) -> np.ndarray:
    """(m, m) matrix of mean cross-segment distances."""
    S = overseg.membership()
    sizes = overseg.sizes.astype(float)
    totals = np.asarray((S.T @ sparse.csr_matrix(_as_array(D)) @ S).todense())
    return totals / np.outer(sizes, sizes)


def segment_adjacency(graph: AdjacencyLike, overseg: OverSegmentation) -> np.ndarray:
    """Boolean (m, m) adjacency between distinct segments."""
    S = overseg.membership()
    adj = np.asarray((S.T @ _as_adjacency(graph) @ S).todense()) > 0
    np.fill_diagonal(adj, False)
    return adj


def diagonal_block(seg_dist: np.ndarray, seg_adj: np.ndarray) -> Tuple[np.ndarray, float]:
    """exp(-d^2 / 2 sigma^2) with sigma the median over adjacent segments."""
    adjacent = seg_dist[seg_adj]
    sigma = float(np.median(adjacent)) if adjacent.size else float(np.median(seg_dist))
    if sigma <= 0:
        positive = seg_dist[seg_dist > 0]
        sigma = float(np.median(positive)) if positive.size else 1.0
    return np.exp(-(seg_dist ** 2) / (2.0 * sigma ** 2)), sigma


@dataclass(frozen=True, eq=False)
class MatchedPairs:
    """Point pairs (p_i in shape i, p_j in shape j) with their weights."""
    source: np.ndarray
    target: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray

    def __len__(self) -> int:
        return int(self.source.shape[0])


def pairs_from_correspondence(
    corr: CorrespondenceSet,
    target_mesh: SurfaceMesh,
    reverse: Optional[CorrespondenceSet] = None,
) -> MatchedPairs:
    """
    Snap matched targets to their nearest target vertices.

    The target weight comes from the reverse correspondence when available,
    otherwise the source weight is used for both ends.
    """
    keep = np.asarray(corr.matched, dtype=bool)
    source = np.asarray(corr.source_ids)[keep]
    src_w = np.asarray(corr.weights)[keep]
    if source.size == 0:
        empty = np.zeros(0)
        return MatchedPairs(source.astype(int), empty.astype(int), empty, empty)
    _, target = cKDTree(target_mesh.vertices).query(np.asarray(corr.targets)[keep])
    tgt_w = src_w.copy()
    if reverse is not None:
        lookup = np.full(target_mesh.n_vertices, np.nan)
        lookup[np.asarray(reverse.source_ids)] = np.asarray(reverse.weights)
        rev = lookup[target]
        tgt_w = np.where(np.isnan(rev), src_w, rev)
    return MatchedPairs(source.astype(int), np.asarray(target, dtype=int), src_w, tgt_w)


def pair_block(
    seg_i: OverSegmentation,
    seg_j: OverSegmentation,
    pairs: MatchedPairs,
    balance: float = COSEG_DEFAULTS["balance"],
) -> np.ndarray:
    """lambda * |o(s_i, s_j)| / max(|s_i|, |s_j|) * mean pair weight."""
    block = np.zeros((seg_i.m, seg_j.m))
    if len(pairs) == 0:
        return block
    a = seg_i.labels[pairs.source]
    b = seg_j.labels[pairs.target]
    w = 0.5 * (pairs.source_weights + pairs.target_weights)
    counts = np.zeros_like(block)
    wsum = np.zeros_like(block)
    np.add.at(counts, (a, b), 1.0)
    np.add.at(wsum, (a, b), w)
    hit = counts > 0
    denom = np.maximum.outer(seg_i.sizes, seg_j.sizes).astype(float)
    block[hit] = balance * counts[hit] / denom[hit] * (wsum[hit] / counts[hit])
    return block


@dataclass(frozen=True, eq=False)
class BlockAffinity:
    W: np.ndarray
    offsets: np.ndarray             # (S + 1,) node offsets per shape
    edges: List[Tuple[int, int]]
    balance: float
    sigmas: np.ndarray              # per-shape sigma-bar

    @property
    def n_shapes(self) -> int:
        return self.offsets.shape[0] - 1

    def block(self, i: int, j: int) -> np.ndarray:
        return self.W[self.offsets[i]:self.offsets[i + 1], self.offsets[j]:self.offsets[j + 1]]


def assemble_affinity(
    meshes: Sequence[SurfaceMesh],
    oversegs: Sequence[OverSegmentation],
    distances: Sequence[Union[DistanceMatrix, np.ndarray]],
    correspondences: Dict[Tuple[int, int], CorrespondenceSet],
    edges: Sequence[Tuple[int, int]],
    balance: float = COSEG_DEFAULTS["balance"],
) -> BlockAffinity:
    """
    Assemble the symmetric block affinity matrix over all over-segments.

    Args:
        meshes: Per-shape meshes (samples are mesh vertices)
        oversegs: Per-shape over-segmentations
        distances: Per-shape distance matrices
        correspondences: (i, j) -> correspondences from shape i to shape j
        edges: Similarity-graph edges
        balance: Weight of correspondence blocks against segmentation blocks

    Raises:
        MissingCorrespondenceError: An edge has no correspondence set
    """
    if not len(meshes) == len(oversegs) == len(distances):
        raise ContractViolation("meshes, over-segmentations and distances must align")
    sizes = [o.m for o in oversegs]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    W = np.zeros((offsets[-1], offsets[-1]))
    sigmas = np.zeros(len(meshes))

    for i, (mesh, overseg, D) in enumerate(zip(meshes, oversegs, distances)):
        block, sigmas[i] = diagonal_block(segment_distance_matrix(D, overseg), segment_adjacency(mesh, overseg))
        W[offsets[i]:offsets[i + 1], offsets[i]:offsets[i + 1]] = block

    edges = [(int(i), int(j)) for i, j in edges]
    for i, j in edges:
        if (i, j) not in correspondences:
            raise MissingCorrespondenceError((i, j))
        pairs = pairs_from_correspondence(correspondences[(i, j)], meshes[j], correspondences.get((j, i)))
        if len(pairs) == 0:
            logger.warning(f"No matched correspondences on edge ({i}, {j}); block left empty")
        W[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = pair_block(oversegs[i], oversegs[j], pairs, balance)

    W = 0.5 * (W + W.T)
    return BlockAffinity(W, offsets, edges, float(balance), sigmas)


def latent_candidates(latents: np.ndarray, count: int = COSEG_DEFAULTS["candidates"]) -> List[Tuple[int, int]]:
    """Directed pairs (i, j) to the `count` nearest shapes in latent space."""
    latents = np.asarray(latents, dtype=float)
    n = latents.shape[0]
    k = min(count, n - 1)
    if k <= 0:
        return []
    _, idx = cKDTree(latents).query(latents, k=k + 1)
    pairs = []
    for i in range(n):
        others = [int(j) for j in np.atleast_1d(idx[i]) if j != i][:k]
        pairs.extend((i, j) for j in others)
    return pairs


def select_similarity_graph(
    mean_weights: Dict[Tuple[int, int], float],
    n_shapes: int,
    neighbors: int = COSEG_DEFAULTS["neighbors"],
) -> List[Tuple[int, int]]:
    """Per shape, keep the `neighbors` candidates with the largest mean correspondence weight."""
    edges = []
    for i in range(n_shapes):
        scored = sorted(((w, j) for (a, j), w in mean_weights.items() if a == i and j != i), key=lambda t: (-t[0], t[1]))
        edges.extend((i, j) for _, j in scored[:neighbors])
    return edges


def farthest_point_order(points: np.ndarray, count: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Greedy farthest point sampling.

    Returns:
        (indices, radii) where radii[k] is the covering radius with k + 1 centers
    """
    points = np.asarray(points, dtype=float)
    count = min(count, points.shape[0])
    start = int(np.argmax(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    order = [start]
    dist = np.linalg.norm(points - points[start], axis=1)
    radii = []
    for _ in range(1, count + 1):
        radii.append(float(dist.max()))
        if len(order) == count:
            break
        nxt = int(np.argmax(dist))
        order.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(order), np.array(radii)


def _diameter_radii(points: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Largest intra-cluster distance when points go to their nearest FPS center."""
    radii = []
    for k in range(1, len(order) + 1):
        centers = points[order[:k]]
        assign = np.argmin(np.linalg.norm(points[:, None, :] - centers[None], axis=2), axis=1)
        widest = 0.0
        for c in range(k):
            members = points[assign == c]
            if members.shape[0] > 1:
                widest = max(widest, float(np.max(np.linalg.norm(members[:, None] - members[None], axis=2))))
        radii.append(widest)
    return np.array(radii)


@dataclass(frozen=True, eq=False)
class ConsistentLabels:
    segment_labels: np.ndarray      # (N,) per over-segment node
    n_clusters: int
    embedding: np.ndarray           # (N, L)
    ratios: Dict[int, float] = field(default_factory=dict)

    def per_shape(self, offsets: np.ndarray, oversegs: Sequence[OverSegmentation]) -> List[np.ndarray]:
        """Broadcast segment labels to every sample of every shape."""
        return [self.segment_labels[offsets[i]:offsets[i + 1]][o.labels] for i, o in enumerate(oversegs)]


def spectral_embedding(
    W: np.ndarray,
    dim: int = COSEG_DEFAULTS["embedding_dim"],
    scaling: str = COSEG_DEFAULTS["scaling"],
    self_loop: float = COSEG_DEFAULTS["self_loop"],
    eigen_floor: float = COSEG_DEFAULTS["eigen_floor"],
) -> np.ndarray:
    """Generalized eigenvectors u_2..u_{dim+1} of the normalized Laplacian, scaled."""
    if scaling not in ("all", "last"):
        raise ContractViolation(f"Unknown embedding scaling '{scaling}'")
    W = np.array(W, dtype=float)
    N = W.shape[0]
    isolated = W.sum(axis=1) <= 0
    if np.any(isolated):
        W[isolated, isolated] += self_loop
    deg = W.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    Lbar = np.eye(N) - inv_sqrt[:, None] * W * inv_sqrt[None, :]

    if dim + 1 > N:
        logger.warning(f"Embedding dimension {dim} reduced to {N - 1} for {N} nodes")
        dim = N - 1
    if dim < 1:
        raise ContractViolation("Need at least two nodes to embed")

    # deflate the trivial eigenvector so u_1 is exactly constant
    v1 = np.sqrt(deg) / np.linalg.norm(np.sqrt(deg))
    eigenvalues, vectors = linalg.eigh(Lbar + 3.0 * np.outer(v1, v1), subset_by_index=[0, dim - 1])
    U = inv_sqrt[:, None] * vectors
    lam = np.maximum(eigenvalues, eigen_floor)
    scale = np.sqrt(lam[0] / lam)
    if scaling == "last":
        scale[:-1] = 1.0
    U = U * scale[None, :]
    rms = np.sqrt(np.mean(U ** 2))
    return U / rms if rms > 0 else U


def spectral_consistent_cluster(
    W: Union[BlockAffinity, np.ndarray],
    dim: int = COSEG_DEFAULTS["embedding_dim"],
    cluster_range: Tuple[int, int] = COSEG_DEFAULTS["cluster_range"],
    scaling: str = COSEG_DEFAULTS["scaling"],
    radius: str = COSEG_DEFAULTS["radius"],
    seed: int = COSEG_DEFAULTS["seed"],
) -> ConsistentLabels:
    """
    Spectral clustering of W with the cluster count picked by FPS radii.

    Args:
        W: Symmetric nonnegative affinity (or a BlockAffinity)
        dim: Embedding dimension L
        cluster_range: Inclusive (min, max) cluster counts scanned
        scaling: "all" scales column l by sqrt(lambda_2 / lambda_l); "last" only the last
        radius: "covering" (FPS covering radius) or "diameter" (widest cluster)
        seed: Mixture model seed

    Returns:
        ConsistentLabels with M* = argmax r_{M-1} / r_M
    """
    if radius not in ("covering", "diameter"):
        raise ContractViolation(f"Unknown radius definition '{radius}'")
    W = W.W if isinstance(W, BlockAffinity) else np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ContractViolation(f"Affinity must be square, got {W.shape}")
    if np.any(W < 0):
        raise ContractViolation("Affinity must be nonnegative")
    W = 0.5 * (W + W.T)
    N = W.shape[0]
    low, high = max(2, int(cluster_range[0])), min(int(cluster_range[1]), N)
    if low > high:
        raise ContractViolation(f"Cluster range {cluster_range} is empty for {N} nodes")

    U = spectral_embedding(W, dim, scaling)
    order, radii = farthest_point_order(U, high)
    if radius == "diameter":
        radii = _diameter_radii(U, order)
    tiny = 1e-12 * max(float(radii[0]), 1.0)
    ratios = {M: float(radii[M - 2] / max(radii[M - 1], tiny)) for M in range(low, high + 1)}
    best = max(ratios, key=lambda M: (ratios[M], -M))

    gmm = GaussianMixture(
        n_components=best, covariance_type="spherical", means_init=U[order[:best]],
        random_state=seed, reg_covar=1e-6,
    )
    labels = gmm.fit_predict(U)
    logger.info(f"Consistent clustering: {N} segments into {best} clusters")
    return ConsistentLabels(_compact(labels), int(np.unique(labels).size), U, ratios)


@dataclass(frozen=True)
class IoUResult:
    per_part: Dict[int, float]
    mean: float
    assignment: Dict[int, int]      # predicted cluster -> truth part


def evaluate_iou(predicted: Union[np.ndarray, Sequence[np.ndarray]], truth: Union[np.ndarray, Sequence[np.ndarray]]) -> IoUResult:
    """
    Mean IoU after Hungarian matching of clusters to parts.

    Lists of per-shape labelings are concatenated and matched once.
    """
    if isinstance(predicted, (list, tuple)):
        predicted = np.concatenate([np.asarray(p).ravel() for p in predicted])
        truth = np.concatenate([np.asarray(t).ravel() for t in truth])
    predicted, truth = np.asarray(predicted).ravel(), np.asarray(truth).ravel()
    if predicted.shape != truth.shape:
        raise ContractViolation(f"Label sets differ in size: {predicted.shape} vs {truth.shape}")
    clusters, parts = np.unique(predicted), np.unique(truth)
    P = predicted[:, None] == clusters[None, :]
    T = truth[:, None] == parts[None, :]
    inter = P.T.astype(float) @ T.astype(float)
    union = P.sum(axis=0)[:, None] + T.sum(axis=0)[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1.0), 0.0)
    rows, cols = linear_sum_assignment(-iou)
    per_part = {int(p): 0.0 for p in parts}
    assignment = {}
    for r, c in zip(rows, cols):
        per_part[int(parts[c])] = float(iou[r, c])
        assignment[int(clusters[r])] = int(parts[c])
    return IoUResult(per_part, float(np.mean(list(per_part.values()))), assignment)


def per_shape_iou(predicted: Sequence[np.ndarray], truth: Sequence[np.ndarray]) -> List[IoUResult]:
    return [evaluate_iou(p, t) for p, t in zip(predicted, truth)]
