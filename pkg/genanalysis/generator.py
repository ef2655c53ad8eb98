"""
Analytic parametric implicit generator.

A generator is a union of affinely posed primitives (box, capsule, cylinder).
Each part's pose depends linearly on the latent code through a q x 12 map whose
rows hold a row-major 3x3 perturbation followed by a translation. Downstream
modules only use the evaluate()/grad_x()/grad_z() interface, so any object
implementing ImplicitField can stand in for it.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from genanalysis.errors import ContractViolation, DegenerateGradientError
from genanalysis.utils.logger import setup_logger

logger = setup_logger(__name__)

PRIMITIVE_KINDS = ("box", "capsule", "cylinder")

# Tolerances used by the generator and its oracle
GENERATOR_TOLERANCES = {
    "switch_gap": 1e-8,        # smooth-min argument gap counted as a switching locus
    "min_gradient": 1e-8,      # |grad_x| below this is degenerate
    "surface": 1e-4,           # |g| accepted as "on surface" by the oracle
    "blend_factor": 5.0,       # blend zone half-width in units of the blend radius
}


@dataclass(frozen=True)
class FieldSample:
    """Batched evaluation of an implicit field."""
    values: np.ndarray          # (N,)
    grad_x: np.ndarray          # (N, 3)
    grad_z: np.ndarray          # (N, q)
    degenerate: np.ndarray      # (N,) bool
    owner: np.ndarray           # (N,) index of the minimizing part
    part_values: np.ndarray     # (N, P)


class ImplicitField(Protocol):
    """Interface consumed by meshing, aaap and matching."""

    q: int

    def evaluate(self, points: np.ndarray, z: np.ndarray) -> FieldSample:
        ...


@dataclass(frozen=True)
class PartSpec:
    """One posed primitive and its latent-to-transform map."""
    name: str
    kind: str
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    latent_map: Optional[np.ndarray] = None   # (q, 12)
    label: str = ""

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ContractViolation(f"Unknown primitive kind '{self.kind}'", {"part": self.name})
        h = np.asarray(self.half_extents, dtype=float)
        if h.shape != (3,) or np.any(h <= 0) or not np.all(np.isfinite(h)):
            raise ContractViolation(
                f"Part '{self.name}' needs three positive half-extents", {"half_extents": h.tolist()}
            )
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        if not self.label:
            object.__setattr__(self, "label", self.name)

    def pose(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (A, t, I + P) for latent code z, with x = A y + t."""
        coeffs = np.zeros(12) if self.latent_map is None else z @ self.latent_map
        perturb = np.eye(3) + coeffs[:9].reshape(3, 3)
        return perturb @ self.rotation, self.translation + coeffs[9:], perturb


def quaternion_to_matrix(quaternion: Sequence[float]) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion."""
    w, x, y, z = [float(v) for v in quaternion]
    if np.isclose(np.linalg.norm([w, x, y, z]), 0.0):
        raise ContractViolation("Zero quaternion")
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def _box_sdf(y: np.ndarray, h: np.ndarray):
    q = np.abs(y) - h
    outside = np.maximum(q, 0.0)
    out_norm = np.linalg.norm(outside, axis=1)
    qmax = q.max(axis=1)
    values = out_norm + np.minimum(qmax, 0.0)

    sign = np.where(y >= 0, 1.0, -1.0)
    grads = np.zeros_like(y)
    ext = out_norm > 0
    grads[ext] = outside[ext] / out_norm[ext, None] * sign[ext]

    inner = ~ext
    axis = np.argmax(q, axis=1)
    rows = np.nonzero(inner)[0]
    grads[rows, axis[rows]] = sign[rows, axis[rows]]
    # interior ridge where two faces are equidistant
    q_sorted = np.sort(q, axis=1)
    degenerate = inner & (q_sorted[:, 2] - q_sorted[:, 1] < GENERATOR_TOLERANCES["switch_gap"])
    return values, grads, degenerate


def _capsule_sdf(y: np.ndarray, h: np.ndarray):
    radius, half_length = h[0], h[1]
    closest = np.zeros_like(y)
    closest[:, 1] = np.clip(y[:, 1], -half_length, half_length)
    delta = y - closest
    dist = np.linalg.norm(delta, axis=1)
    degenerate = dist < GENERATOR_TOLERANCES["min_gradient"]
    grads = delta / np.where(degenerate, 1.0, dist)[:, None]
    return dist - radius, grads, degenerate


def _cylinder_sdf(y: np.ndarray, h: np.ndarray):
    radius, half_length = h[0], h[1]
    rho = np.hypot(y[:, 0], y[:, 2])
    d = np.stack([rho - radius, np.abs(y[:, 1]) - half_length], axis=1)
    outside = np.maximum(d, 0.0)
    out_norm = np.linalg.norm(outside, axis=1)
    values = out_norm + np.minimum(d.max(axis=1), 0.0)

    radial = np.zeros_like(y)
    safe_rho = np.where(rho > 0, rho, 1.0)
    radial[:, 0] = y[:, 0] / safe_rho
    radial[:, 2] = y[:, 2] / safe_rho
    axial = np.zeros_like(y)
    axial[:, 1] = np.where(y[:, 1] >= 0, 1.0, -1.0)

    ext = out_norm > 0
    coef = np.zeros_like(d)
    coef[ext] = outside[ext] / out_norm[ext, None]
    inner = ~ext
    use_radial = d[:, 0] >= d[:, 1]
    coef[inner & use_radial, 0] = 1.0
    coef[inner & ~use_radial, 1] = 1.0
    grads = coef[:, :1] * radial + coef[:, 1:] * axial

    degenerate = (rho < GENERATOR_TOLERANCES["min_gradient"]) & (coef[:, 0] > 0)
    degenerate |= inner & (np.abs(d[:, 0] - d[:, 1]) < GENERATOR_TOLERANCES["switch_gap"])
    return values, grads, degenerate


_PRIMITIVES = {"box": _box_sdf, "capsule": _capsule_sdf, "cylinder": _cylinder_sdf}


@dataclass(frozen=True)
class ImplicitGenerator:
    """
    Smooth-min union of posed parts, g(x, z).

    Sign convention: negative inside, positive outside, zero on the surface.
    blend_radius = 0 selects the hard minimum.
    """
    parts: Tuple[PartSpec, ...]
    q: int
    blend_radius: float = 0.02
    operator_norm_cap: float = 2.0

    def __post_init__(self):
        if len(self.parts) == 0:
            raise ContractViolation("Generator needs at least one part")
        if self.q < 1:
            raise ContractViolation(f"Latent dimension must be >= 1, got {self.q}")
        if self.blend_radius < 0:
            raise ContractViolation(f"Blend radius must be >= 0, got {self.blend_radius}")
        object.__setattr__(self, "parts", tuple(self.parts))
        for part in self.parts:
            if part.latent_map is None:
                continue
            lam = np.asarray(part.latent_map, dtype=float)
            if lam.shape != (self.q, 12):
                raise ContractViolation(
                    f"Latent map of part '{part.name}' has shape {lam.shape}, expected ({self.q}, 12)"
                )
            norm = np.linalg.norm(lam, 2)
            if norm > self.operator_norm_cap:
                raise ContractViolation(
                    f"Latent map of part '{part.name}' has operator norm {norm:.3f} "
                    f"above cap {self.operator_norm_cap}"
                )
            object.__setattr__(part, "latent_map", lam)

    @property
    def part_labels(self) -> List[str]:
        return [part.label for part in self.parts]

    @property
    def label_names(self) -> List[str]:
        """Distinct part labels in order of first appearance."""
        names: List[str] = []
        for label in self.part_labels:
            if label not in names:
                names.append(label)
        return names

    @property
    def part_label_ids(self) -> np.ndarray:
        names = self.label_names
        return np.array([names.index(label) for label in self.part_labels], dtype=int)

    def _check_latent(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).reshape(-1)
        if z.shape[0] != self.q:
            raise ContractViolation(f"Latent code has dimension {z.shape[0]}, expected {self.q}")
        if not np.all(np.isfinite(z)):
            raise ContractViolation("Latent code has non-finite entries")
        return z

    def part_fields(self, points: np.ndarray, z: np.ndarray):
        """Per-part values (N, P), spatial gradients (N, P, 3), latent gradients (N, P, q)."""
        z = self._check_latent(z)
        x = np.atleast_2d(np.asarray(points, dtype=float))
        n, n_parts = x.shape[0], len(self.parts)
        values = np.empty((n, n_parts))
        gx = np.empty((n, n_parts, 3))
        gz = np.zeros((n, n_parts, self.q))
        degenerate = np.zeros((n, n_parts), dtype=bool)

        for k, part in enumerate(self.parts):
            A, t, perturb = part.pose(z)
            if abs(np.linalg.det(perturb)) < 1e-12:
                raise ContractViolation(
                    f"Part '{part.name}' transform is singular at this latent code", {"part": part.name}
                )
            A_inv = np.linalg.inv(A)
            local = (x - t) @ A_inv.T
            val, grad_local, degen = _PRIMITIVES[part.kind](local, part.half_extents)
            grad = grad_local @ A_inv
            values[:, k] = val
            gx[:, k] = grad
            degenerate[:, k] = degen
            if part.latent_map is not None:
                u = (x - t) @ np.linalg.inv(perturb).T
                phi = np.concatenate([np.einsum("na,nb->nab", grad, u).reshape(n, 9), grad], axis=1)
                gz[:, k] = -phi @ part.latent_map.T
        return values, gx, gz, degenerate

    def evaluate(self, points: np.ndarray, z: np.ndarray) -> FieldSample:
        values, gx, gz, part_degenerate = self.part_fields(points, z)
        n = values.shape[0]
        owner = np.argmin(values, axis=1)
        rows = np.arange(n)

        if values.shape[1] > 1:
            ordered = np.sort(values, axis=1)
            gap = ordered[:, 1] - ordered[:, 0]
        else:
            gap = np.full(n, np.inf)

        if self.blend_radius > 0 and values.shape[1] > 1:
            beta = self.blend_radius
            shifted = -(values - values[rows, owner][:, None]) / beta
            weights = np.exp(shifted)
            total = weights.sum(axis=1)
            weights /= total[:, None]
            g = values[rows, owner] - beta * np.log(total)
            grad_x = np.einsum("nk,nkd->nd", weights, gx)
            grad_z = np.einsum("nk,nkd->nd", weights, gz)
            degenerate = part_degenerate[rows, owner] & (weights[rows, owner] > 0.999)
        else:
            g = values[rows, owner]
            grad_x = gx[rows, owner]
            grad_z = gz[rows, owner]
            degenerate = part_degenerate[rows, owner] | (gap < GENERATOR_TOLERANCES["switch_gap"])

        degenerate = degenerate | (np.linalg.norm(grad_x, axis=1) < GENERATOR_TOLERANCES["min_gradient"])
        return FieldSample(g, grad_x, grad_z, degenerate, owner, values)

    def eval(self, x, z) -> np.ndarray:
        """Signed distance at one point (scalar) or a batch of points."""
        x = np.asarray(x, dtype=float)
        values = self.evaluate(x, z).values
        return float(values[0]) if x.ndim == 1 else values

    def grad_x(self, x, z) -> np.ndarray:
        """Spatial gradient; raises DegenerateGradientError on a switching locus."""
        x = np.asarray(x, dtype=float)
        sample = self.evaluate(x, z)
        self._raise_if_degenerate(sample)
        return sample.grad_x[0] if x.ndim == 1 else sample.grad_x

    def grad_z(self, x, z) -> np.ndarray:
        """Latent gradient; raises DegenerateGradientError on a switching locus."""
        x = np.asarray(x, dtype=float)
        sample = self.evaluate(x, z)
        self._raise_if_degenerate(sample)
        return sample.grad_z[0] if x.ndim == 1 else sample.grad_z

    @staticmethod
    def _raise_if_degenerate(sample: FieldSample):
        if np.any(sample.degenerate):
            bad = np.nonzero(sample.degenerate)[0]
            raise DegenerateGradientError(
                "Gradient requested at a switching locus; perturb the point",
                {"points": bad[:20].tolist()},
            )

    def part_transform(self, k: int, z) -> Tuple[np.ndarray, np.ndarray]:
        A, t, _ = self.parts[k].pose(self._check_latent(z))
        return A, t


@dataclass(frozen=True)
class GroundTruthMatch:
    """Oracle correspondences for surface points."""
    points: np.ndarray        # (N, 3) mapped positions
    part_ids: np.ndarray      # (N,)
    labels: np.ndarray        # (N,) label ids
    blend_zone: np.ndarray    # (N,) bool, near a part interface
    hidden: np.ndarray        # (N,) bool, image lies inside another part at the target

    @property
    def excluded(self) -> np.ndarray:
        """Points left out of error metrics."""
        return self.blend_zone | self.hidden


def ground_truth_correspondence(
    gen: ImplicitGenerator,
    points: np.ndarray,
    z: np.ndarray,
    z_target: np.ndarray,
    tie_tolerance: float = 1e-6,
    surface_tolerance: Optional[float] = None,
    interface_band: float = 0.0,
) -> GroundTruthMatch:
    """
    Map surface points at z to z_target with the owning part's affine motion.

    Args:
        gen: Generator
        points: (N, 3) or (3,) points on g(., z) = 0
        z: Source latent code
        z_target: Target latent code
        tie_tolerance: Part-value gap under which ownership is ambiguous
        surface_tolerance: Maximum |g| accepted (defaults to GENERATOR_TOLERANCES)
        interface_band: Minimum blend-zone width, for hard unions whose
            crease a mesh only resolves to about an edge length

    Returns:
        GroundTruthMatch

    Raises:
        ContractViolation: If a point is off the surface
    """
    surface_tolerance = surface_tolerance or GENERATOR_TOLERANCES["surface"]
    x = np.atleast_2d(np.asarray(points, dtype=float))
    sample = gen.evaluate(x, z)
    off = np.abs(sample.values) >= surface_tolerance
    if np.any(off):
        raise ContractViolation(
            f"{int(off.sum())} points are not on the source surface",
            {"max_abs_value": float(np.abs(sample.values).max())},
        )

    owner = sample.owner
    if sample.part_values.shape[1] > 1:
        ordered = np.sort(sample.part_values, axis=1)
        gap = ordered[:, 1] - ordered[:, 0]
    else:
        gap = np.full(x.shape[0], np.inf)
    blend_width = max(tie_tolerance, interface_band, GENERATOR_TOLERANCES["blend_factor"] * gen.blend_radius)
    blend_zone = gap < blend_width

    mapped = np.empty_like(x)
    for k in range(len(gen.parts)):
        rows = owner == k
        if not np.any(rows):
            continue
        A_src, t_src = gen.part_transform(k, z)
        A_dst, t_dst = gen.part_transform(k, z_target)
        local = (x[rows] - t_src) @ np.linalg.inv(A_src).T
        mapped[rows] = local @ A_dst.T + t_dst

    hidden = gen.evaluate(mapped, z_target).values < -surface_tolerance
    return GroundTruthMatch(mapped, owner, gen.part_label_ids[owner], blend_zone, hidden)


@dataclass
class LatentFit:
    """Result of fitting a latent code to SDF samples."""
    z: np.ndarray
    residual: float
    converged: bool
    warning: Optional[str] = None
    iterations: int = 0


def fit_latent(
    gen: ImplicitGenerator,
    sample_points: np.ndarray,
    sample_values: np.ndarray,
    z0: Optional[np.ndarray] = None,
    max_iterations: int = 200,
) -> LatentFit:
    """
    Fit z minimizing sum |g(p, z) - s|^2 with the analytic latent Jacobian.

    Args:
        gen: Generator
        sample_points: (N, 3) sample positions
        sample_values: (N,) observed signed distances
        z0: Initial latent code (defaults to zero)
        max_iterations: Function-evaluation budget

    Returns:
        LatentFit with the best iterate; `warning` is set when the fit is not trustworthy

    Raises:
        ContractViolation: If fewer than 10*q samples are given
    """
    points = np.atleast_2d(np.asarray(sample_points, dtype=float))
    values = np.asarray(sample_values, dtype=float).reshape(-1)
    if points.shape[0] != values.shape[0]:
        raise ContractViolation("Sample points and values differ in length")
    if points.shape[0] < 10 * gen.q:
        raise ContractViolation(
            f"Need at least {10 * gen.q} samples for q={gen.q}, got {points.shape[0]}"
        )
    z_start = np.zeros(gen.q) if z0 is None else gen._check_latent(z0)

    def residuals(z):
        return gen.evaluate(points, z).values - values

    def jacobian(z):
        return gen.evaluate(points, z).grad_z

    result = least_squares(residuals, z_start, jac=jacobian, method="trf", max_nfev=max_iterations)
    rms = float(np.sqrt(np.mean(result.fun ** 2)))

    warnings = []
    if not result.success:
        warnings.append(f"not converged: {result.message}")
    if not np.any(values < 0):
        warnings.append("no interior samples; latent code is poorly determined")
    rank = np.linalg.matrix_rank(result.jac) if result.jac.size else 0
    if rank < gen.q:
        warnings.append(f"latent Jacobian rank {rank} < q={gen.q}")

    warning = "; ".join(warnings) if warnings else None
    if warning:
        logger.warning(f"fit_latent: {warning}")
    else:
        logger.info(f"fit_latent: converged with RMS residual {rms:.3e} after {result.nfev} evaluations")

    return LatentFit(result.x, rms, bool(result.success) and warning is None, warning, int(result.nfev))
