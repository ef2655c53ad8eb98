"""OBJ and PLY input/output for surface meshes."""

import os
from typing import Dict, Optional

import numpy as np
import trimesh

from genanalysis.errors import MeshError
from genanalysis.meshing import SurfaceMesh
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)


def write_obj(mesh: SurfaceMesh, path: str) -> str:
    """Write vertices and faces as Wavefront OBJ."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    text = trimesh.exchange.obj.export_obj(
        mesh.to_trimesh(), include_normals=False, include_color=False, include_texture=False, digits=10
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def read_obj(path: str) -> SurfaceMesh:
    """Load an OBJ file, keeping vertex order."""
    if not os.path.exists(path):
        raise MeshError(f"Mesh file not found: {path}")
    loaded = trimesh.load(path, file_type="obj", force="mesh", process=False, maintain_order=True)
    return SurfaceMesh(np.asarray(loaded.vertices), np.asarray(loaded.faces))


def write_ply(
    mesh: SurfaceMesh,
    path: str,
    scalars: Optional[Dict[str, np.ndarray]] = None,
    labels: Optional[np.ndarray] = None,
    vectors: Optional[Dict[str, np.ndarray]] = None,
) -> str:
    """
    Write a binary PLY with per-vertex channels.

    Args:
        mesh: Mesh to export
        path: Output path
        scalars: name -> (n,) float channel (error, weight, distortion ...)
        labels: (n,) integer labels, stored as the `label` channel
        vectors: name -> (n, 3) field, stored as name_x, name_y, name_z

    Returns:
        The written path
    """
    n = mesh.n_vertices
    attributes: Dict[str, np.ndarray] = {}
    for name, values in (scalars or {}).items():
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != n:
            raise MeshError(f"Scalar channel '{name}' has {values.shape[0]} entries, mesh has {n} vertices")
        attributes[name] = values
    for name, field in (vectors or {}).items():
        field = np.asarray(field, dtype=np.float64).reshape(n, 3)
        for k, axis in enumerate("xyz"):
            attributes[f"{name}_{axis}"] = field[:, k]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int32).reshape(-1)
        if labels.shape[0] != n:
            raise MeshError(f"Label channel has {labels.shape[0]} entries, mesh has {n} vertices")
        attributes["label"] = labels

    tm = trimesh.Trimesh(
        np.array(mesh.vertices), np.array(mesh.faces), vertex_attributes=attributes, process=False
    )
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data = trimesh.exchange.ply.export_ply(tm, encoding="binary", include_attributes=True)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug(f"Wrote {path} with channels {sorted(attributes)}")
    return path
