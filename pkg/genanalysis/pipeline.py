"""
Family-level orchestration.

Per-shape analyses (mesh, deformation system, solve map, variation modes,
distance matrix) are cached in an LRU keyed by shape index; per-pair work
(correspondences, paths) runs on a thread pool with results kept in input
order.
"""

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from cachetools import LRUCache

from genanalysis import coseg
from genanalysis.aaap import (
    DeformationSystem,
    DisplacementSolver,
    RegularizerEstimate,
    assemble_system,
    constraint_matrices,
    evaluate_regularizer,
)
from genanalysis.config import PipelineConfig
from genanalysis.family import ShapeFamily
from genanalysis.matching import CorrespondenceSet, propagate
from genanalysis.meshing import SurfaceMesh, extract_mesh
from genanalysis.pathopt import InterpolationPath, optimize_path
from genanalysis.variation import DistanceMatrix, VariationModes, compute_modes, distance_matrix
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Apply fn to every item, in parallel when workers > 1, keeping input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class ShapeAnalysis:
    index: int
    mesh: SurfaceMesh
    system: DeformationSystem
    solver: DisplacementSolver
    modes: Optional[VariationModes] = None
    distances: Optional[DistanceMatrix] = None


@dataclass(frozen=True, eq=False)
class CosegResult:
    labels: List[np.ndarray]            # per shape, per vertex
    truth: List[np.ndarray]
    oversegs: List[coseg.OverSegmentation]
    affinity: coseg.BlockAffinity
    clusters: coseg.ConsistentLabels
    iou: coseg.IoUResult
    per_shape_iou: List[coseg.IoUResult]


class Pipeline:
    """Runs every analysis of a shape family under one configuration."""

    def __init__(self, family: ShapeFamily, config: Optional[PipelineConfig] = None):
        self.family = family
        self.config = config or PipelineConfig()
        self._cache: LRUCache = LRUCache(maxsize=self.config.runtime.cache_size)
        self._lock = threading.Lock()
        self._shape_locks: Dict[int, threading.Lock] = {}

    @property
    def generator(self):
        return self.family.generator

    def _shape_lock(self, i: int) -> threading.Lock:
        with self._lock:
            return self._shape_locks.setdefault(i, threading.Lock())

    def _model_settings(self) -> Dict[str, object]:
        aaap = self.config.aaap
        return {
            "model": aaap.model,
            "normalize_regularization": aaap.normalize_regularization,
            "reference_scale": aaap.reference_scale,
        }

    def mesh(self, i: int) -> SurfaceMesh:
        return self.analysis(i).mesh

    def analysis(self, i: int) -> ShapeAnalysis:
        """Mesh, deformation system and solve map of shape i (cached)."""
        inst = self.family[i]
        i = i % len(self.family)
        with self._shape_lock(i):
            with self._lock:
                cached = self._cache.get(i)
            if cached is not None:
                return cached
            cfg = self.config
            mesh = extract_mesh(
                self.generator, inst.latent,
                resolution=cfg.meshing.resolution,
                target_vertices=cfg.meshing.target_vertices,
                bounds=cfg.meshing.bounds,
                tolerance=cfg.meshing.projection_tolerance,
            )
            system = assemble_system(mesh, cfg.aaap.mu_r, cfg.aaap.mu_s, **self._model_settings())
            constraints = constraint_matrices(self.generator, mesh, inst.latent)
            solver = DisplacementSolver(system, constraints, inst.latent, cfg.aaap.mu_rel)
            result = ShapeAnalysis(i, mesh, system, solver)
            with self._lock:
                self._cache[i] = result
            logger.info(f"Analyzed shape '{inst.id}': {mesh.n_vertices} vertices")
            return result

    def variation(self, i: int) -> ShapeAnalysis:
        """Variation modes and distance matrix of shape i."""
        result = self.analysis(i)
        with self._shape_lock(result.index):
            if result.distances is None:
                cfg = self.config.variation
                result.modes = compute_modes(
                    result.solver.M, result.system.L, cfg.modes, cfg.weighting, cfg.eigen_floor
                )
                result.distances = distance_matrix(result.mesh, result.modes)
        return result

    def correspond(self, i: int, j: int) -> CorrespondenceSet:
        cfg = self.config
        return propagate(
            self.generator, self.mesh(i), self.family[i].latent, self.family[j].latent,
            intermediates=cfg.matching.intermediates,
            projection_iterations=cfg.matching.projection_iterations,
            unmatched_fraction=cfg.matching.unmatched_fraction,
            mu_r=cfg.aaap.mu_r, mu_s=cfg.aaap.mu_s, mu_rel=cfg.aaap.mu_rel,
            **self._model_settings(),
        )

    def correspond_many(self, pairs: Sequence[Tuple[int, int]]) -> Dict[Tuple[int, int], CorrespondenceSet]:
        pairs = [(int(i), int(j)) for i, j in pairs]
        # meshes first so pair workers only read the cache
        map_ordered(self.analysis, sorted({i for i, _ in pairs} | {j for _, j in pairs}), self.config.runtime.workers)
        results = map_ordered(lambda p: self.correspond(*p), pairs, self.config.runtime.workers)
        return dict(zip(pairs, results))

    def path(self, i: int, j: int, mode: Optional[str] = None, weights: Optional[Sequence[float]] = None) -> InterpolationPath:
        cfg = self.config
        return optimize_path(
            self.generator, self.mesh(i), self.family[i].latent, self.family[j].latent,
            intermediates=cfg.pathopt.intermediates,
            mode=mode or cfg.pathopt.mode,
            weights=weights,
            max_iterations=cfg.pathopt.max_iterations,
            tolerance=cfg.pathopt.tolerance,
            mu_r=cfg.aaap.mu_r, mu_s=cfg.aaap.mu_s, mu_rel=cfg.aaap.mu_rel,
            irls_eps=cfg.pathopt.irls_eps,
            backtracking=cfg.pathopt.backtracking,
            delta=cfg.aaap.robust_delta,
            **self._model_settings(),
        )

    def regularizer(self, i: int, alpha: float = 1.0) -> RegularizerEstimate:
        """Structure-preserving regularizer of shape i over the configured directions."""
        cfg = self.config
        return evaluate_regularizer(
            self.generator, self.mesh(i), self.family[i].latent,
            n_directions=cfg.aaap.directions, alpha=alpha, seed=cfg.runtime.seed,
            mu_r=cfg.aaap.mu_r, mu_s=cfg.aaap.mu_s, mu_rel=cfg.aaap.mu_rel, delta=cfg.aaap.robust_delta,
            **self._model_settings(),
        )

    def truth_labels(self, i: int) -> np.ndarray:
        """Ground-truth part label of every vertex of shape i."""
        mesh = self.mesh(i)
        owner = self.generator.evaluate(mesh.vertices, self.family[i].latent).owner
        return self.generator.part_label_ids[owner]

    def coseg(self, indices: Optional[Sequence[int]] = None) -> CosegResult:
        """Consistent segmentation of the selected shapes (all by default)."""
        cfg = self.config
        indices = list(range(len(self.family))) if indices is None else [int(i) for i in indices]
        workers = cfg.runtime.workers

        analyses = map_ordered(self.variation, indices, workers)
        oversegs = map_ordered(
            lambda a: coseg.over_segment(a.distances, a.mesh, min(cfg.coseg.over_segments, a.mesh.n_vertices), seed=cfg.runtime.seed),
            analyses, workers,
        )

        latents = np.stack([self.family[i].latent for i in indices])
        local_pairs = coseg.latent_candidates(latents, cfg.coseg.candidates)
        corr = self.correspond_many([(indices[a], indices[b]) for a, b in local_pairs])
        position = {shape: k for k, shape in enumerate(indices)}
        local_corr = {(position[i], position[j]): c for (i, j), c in corr.items()}
        mean_weights = {
            pair: float(np.mean(c.weights[c.matched])) if np.any(c.matched) else 0.0
            for pair, c in local_corr.items()
        }
        edges = coseg.select_similarity_graph(mean_weights, len(indices), cfg.coseg.neighbors)

        affinity = coseg.assemble_affinity(
            [a.mesh for a in analyses], oversegs, [a.distances for a in analyses],
            local_corr, edges, cfg.coseg.balance,
        )
        clusters = coseg.spectral_consistent_cluster(
            affinity, cfg.coseg.embedding_dim, cfg.coseg.cluster_range,
            cfg.coseg.scaling, cfg.coseg.radius, seed=cfg.runtime.seed,
        )
        labels = clusters.per_shape(affinity.offsets, oversegs)
        truth = [self.truth_labels(i) for i in indices]
        iou = coseg.evaluate_iou(labels, truth)
        logger.info(f"Co-segmentation of {len(indices)} shapes: M={clusters.n_clusters}, mean IoU {iou.mean:.3f}")
        return CosegResult(labels, truth, oversegs, affinity, clusters, iou, coseg.per_shape_iou(labels, truth))
