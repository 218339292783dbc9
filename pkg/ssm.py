"""
PCA statistical shape model with a rigid pose, voxelization of multi-region
surface point sets, and finite-difference gradients through both.

Point sets are flat (3V,) arrays of (z, y, x) vertex coordinates in mm, with
the isocenter at the origin. Every region owns a closed star-shaped surface
sampled on a shared (theta, phi) grid, so vertex k of one shape corresponds
to vertex k of every other shape.
"""

import concurrent.futures
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit

import fsct
from config import (
    DIRECTION_TABLE,
    FD_LOG_SCALE_STEP,
    FD_MODE_STEP,
    FD_ROTATION_STEP,
    FD_TRANSLATION_STEP,
    MODE_CLAMP,
    POSE_DIM,
    SOFT_TEMPERATURE,
)
from errors import DegenerateShapeError, FormatError, ShapeError
from utils import log

# =============================================================================
# Types
# =============================================================================


@dataclass(frozen=True)
class ShapeModel:
    mean: np.ndarray        # (3V,)
    basis: np.ndarray       # (3V, k), orthonormal columns
    eigvals: np.ndarray     # (k,), descending
    regions: np.ndarray     # (V,), ids in 1..R
    grid: Tuple[int, int]   # vertices per region: theta x phi

    @property
    def n_modes(self) -> int:
        return self.basis.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.regions.size

    @property
    def n_regions(self) -> int:
        return int(self.regions.max()) if self.regions.size else 0

    @property
    def param_dim(self) -> int:
        return self.n_modes + POSE_DIM

    def mode_limits(self) -> np.ndarray:
        return MODE_CLAMP * np.sqrt(self.eigvals)


@dataclass(frozen=True)
class ShapeParams:
    """tau_S = (b, axis-angle rotation, translation in mm, log-scale)."""
    b: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    log_scale: float = 0.0

    @classmethod
    def zeros(cls, n_modes: int) -> "ShapeParams":
        return cls(np.zeros(n_modes), np.zeros(3), np.zeros(3), 0.0)

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_modes: int) -> "ShapeParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (n_modes + POSE_DIM,):
            raise ShapeError(f"Shape parameter vector has shape {vec.shape}, expected ({n_modes + POSE_DIM},)")
        return cls(vec[:n_modes].copy(), vec[n_modes:n_modes + 3].copy(),
                   vec[n_modes + 3:n_modes + 6].copy(), float(vec[n_modes + 6]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.b, self.rotation, self.translation, [self.log_scale]])


# =============================================================================
# Point-Grid Helpers
# =============================================================================


def direction_grid(n_theta: int, n_phi: int) -> np.ndarray:
    """Unit (z, y, x) directions, theta-major: theta_k = (k + 1/2) pi / n_theta, phi_l = 2 pi l / n_phi."""
    theta = (np.arange(n_theta) + 0.5) * math.pi / n_theta
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return np.stack([np.cos(tt), np.sin(tt) * np.sin(pp), np.sin(tt) * np.cos(pp)], axis=-1).reshape(-1, 3)


def ellipsoid_points(semi_axes: Sequence[float], center: Sequence[float], grid: Tuple[int, int],
                     bumps: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Surface of an axis-aligned ellipsoid (semi-axes in z, y, x, mm) sampled along
    the grid directions; ``bumps`` multiplies the radius per vertex.
    """
    dirs = direction_grid(*grid)
    a = np.asarray(semi_axes, dtype=np.float64)
    radius = 1.0 / np.sqrt(((dirs / a[None, :]) ** 2).sum(axis=1))
    if bumps is not None:
        radius = radius * bumps
    return np.asarray(center, dtype=np.float64)[None, :] + radius[:, None] * dirs


def sphere_points(radius: float, center: Sequence[float], grid: Tuple[int, int]) -> np.ndarray:
    return ellipsoid_points((radius, radius, radius), center, grid)


def region_labels(n_regions: int, grid: Tuple[int, int]) -> np.ndarray:
    return np.repeat(np.arange(1, n_regions + 1), grid[0] * grid[1])


# =============================================================================
# Building the Model
# =============================================================================


def build_ssm(shapes: np.ndarray, regions: np.ndarray, grid: Tuple[int, int], k: int = 14) -> ShapeModel:
    """
    PCA through the M x M Gram matrix of centered shapes. Eigenvectors of the
    3V x 3V covariance are recovered as X^T u / sqrt((M - 1) lambda). Modes
    with numerically zero variance are dropped.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    if shapes.ndim != 2:
        raise ShapeError(f"build_ssm expects an (M, 3V) array, got {shapes.shape}")
    m, dim = shapes.shape
    if dim != 3 * regions.size:
        raise ShapeError(f"Shapes have {dim} coordinates but {regions.size} vertices are labeled")
    if m < k + 1:
        raise ShapeError(f"build_ssm needs at least k+1={k + 1} shapes, got {m}")

    mean = shapes.mean(axis=0)
    centered = shapes - mean[None, :]
    gram = centered @ centered.T / (m - 1)
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    noise_floor = (1e-12 * np.abs(shapes).max()) ** 2 * dim
    if not np.isfinite(vals[0]) or vals[0] <= noise_floor:
        raise DegenerateShapeError("Training shapes have zero covariance (all shapes identical)")

    keep = vals > vals[0] * 1e-12
    rank = int(keep.sum())
    if rank < k:
        log("SSM", f"Only {rank} non-degenerate modes available; keeping {rank} of {k}", "WARNING")
    k = min(k, rank)
    vals, vecs = vals[:k], vecs[:, :k]
    basis = centered.T @ vecs / np.sqrt((m - 1) * vals)[None, :]
    # sign convention: the largest-magnitude entry of each mode is positive
    pivots = np.argmax(np.abs(basis), axis=0)
    basis = basis * np.sign(basis[pivots, np.arange(k)])[None, :]
    return ShapeModel(mean=mean, basis=basis, eigvals=vals.copy(), regions=np.asarray(regions, dtype=np.int64),
                      grid=tuple(int(g) for g in grid))


def project(model: ShapeModel, shape: np.ndarray) -> np.ndarray:
    """Least-squares mode coordinates of a shape (no clamping)."""
    return model.basis.T @ (np.asarray(shape, dtype=np.float64) - model.mean)


def reconstruction_error(model: ShapeModel, shapes: np.ndarray) -> np.ndarray:
    """Squared residual per shape after projecting onto the retained modes."""
    errors = []
    for s in np.atleast_2d(shapes):
        recon = model.mean + model.basis @ project(model, s)
        errors.append(float(np.sum((s - recon) ** 2)))
    return np.array(errors)


def save_ssm(path, model: ShapeModel):
    return fsct.save(path, {
        "mean": model.mean,
        "basis": model.basis,
        "eigvals": model.eigvals,
        "regions": model.regions.astype(np.float64),
        "grid": np.array(model.grid, dtype=np.float64),
    })


def load_ssm(path) -> ShapeModel:
    arrays = fsct.load(path)
    missing = {"mean", "basis", "eigvals", "regions", "grid"} - set(arrays)
    if missing:
        raise FormatError(f"SSM file {path} lacks arrays {sorted(missing)}")
    return ShapeModel(mean=arrays["mean"], basis=arrays["basis"], eigvals=arrays["eigvals"],
                      regions=arrays["regions"].astype(np.int64),
                      grid=tuple(int(g) for g in arrays["grid"]))


# =============================================================================
# Synthesis
# =============================================================================


def clamp_modes(model: ShapeModel, b: np.ndarray) -> np.ndarray:
    limit = model.mode_limits()
    return np.clip(np.asarray(b, dtype=np.float64), -limit, limit)


def synthesize(model: ShapeModel, tau) -> np.ndarray:
    """s = exp(sigma) Rot(r) (mean + Phi clamp(b)) + t, per vertex."""
    if not isinstance(tau, ShapeParams):
        tau = ShapeParams.from_vector(tau, model.n_modes)
    local = (model.mean + model.basis @ clamp_modes(model, tau.b)).reshape(-1, 3)
    if np.any(tau.rotation != 0.0):
        local = local @ Rotation.from_rotvec(tau.rotation).as_matrix().T
    if tau.log_scale != 0.0:
        local = math.exp(tau.log_scale) * local
    return (local + np.asarray(tau.translation)[None, :]).reshape(-1)


# =============================================================================
# Voxelization
# =============================================================================


def voxel_centers(extents: Tuple[int, int, int], spacing: float) -> Tuple[np.ndarray, ...]:
    return tuple((np.arange(n) - (n - 1) / 2.0) * spacing for n in extents)


@lru_cache(maxsize=4)
def _table_directions(n_theta: int, n_phi: int) -> np.ndarray:
    return direction_grid(n_theta, n_phi)


def _radial_table(vertices: np.ndarray, center: np.ndarray, kappa: float) -> np.ndarray:
    """Von Mises kernel regression of vertex radii onto the lookup directions."""
    offsets = vertices - center[None, :]
    radii = np.linalg.norm(offsets, axis=1)
    if not np.all(np.isfinite(radii)) or radii.min() <= 0:
        raise DegenerateShapeError("Region surface passes through its own centroid")
    dirs = offsets / radii[:, None]
    table_dirs = _table_directions(*DIRECTION_TABLE)
    weights = np.exp(kappa * (table_dirs @ dirs.T - 1.0))
    return (weights @ radii / weights.sum(axis=1)).reshape(DIRECTION_TABLE)


def _lookup(table: np.ndarray, dz, dy, dx, dist) -> np.ndarray:
    n_theta, n_phi = table.shape
    safe = np.where(dist > 0, dist, 1.0)
    theta = np.arccos(np.clip(dz / safe, -1.0, 1.0))
    phi = np.mod(np.arctan2(dy, dx), 2.0 * math.pi)
    ft = np.clip(theta / (math.pi / n_theta) - 0.5, 0.0, n_theta - 1.0)
    fp = phi / (2.0 * math.pi / n_phi)
    t0 = np.minimum(np.floor(ft).astype(np.int64), n_theta - 2)
    p0 = np.floor(fp).astype(np.int64) % n_phi
    wt, wp = ft - t0, fp - np.floor(fp)
    p1 = (p0 + 1) % n_phi
    return ((1 - wt) * ((1 - wp) * table[t0, p0] + wp * table[t0, p1])
            + wt * ((1 - wp) * table[t0 + 1, p0] + wp * table[t0 + 1, p1]))


def region_occupancy(vertices: np.ndarray, extents: Tuple[int, int, int], spacing: float,
                     soft: bool = False, temperature: float = SOFT_TEMPERATURE,
                     grid: Tuple[int, int] = (8, 16)) -> np.ndarray:
    """
    Inside test for one closed star-shaped surface: a voxel is inside when its
    distance from the region centroid is below the surface radius in its
    direction. Soft mode returns sigmoid((rho_surf - |p - c|) / (T spacing)).
    """
    occupancy = np.zeros(extents)
    center = vertices.mean(axis=0)
    kappa = 2.0 * (grid[0] / math.pi) ** 2
    table = _radial_table(vertices, center, kappa)
    reach = table.max() + (1.0 + (8.0 * temperature if soft else 0.0)) * spacing
    axes = voxel_centers(extents, spacing)
    windows = []
    for c, ax in zip(center, axes):
        idx = np.nonzero(np.abs(ax - c) <= reach)[0]
        if idx.size == 0:
            return occupancy
        windows.append(slice(idx[0], idx[-1] + 1))
    z, y, x = np.meshgrid(*(ax[w] - c for ax, w, c in zip(axes, windows, center)), indexing="ij")
    dist = np.sqrt(z * z + y * y + x * x)
    surface = _lookup(table, z, y, x, dist)
    if soft:
        occupancy[tuple(windows)] = expit((surface - dist) / (temperature * spacing))
    else:
        occupancy[tuple(windows)] = (dist <= surface).astype(np.float64)
    return occupancy


def voxelize(points: np.ndarray, regions: np.ndarray, extents: Tuple[int, int, int], spacing: float,
             grid: Tuple[int, int] = (8, 16)) -> np.ndarray:
    """Hard multi-region label volume; overlaps resolve to the higher region id."""
    labels = np.zeros(extents, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.size == 0:
        return labels
    for r in np.unique(regions):
        inside = region_occupancy(points[regions == r], extents, spacing, grid=grid) > 0.5
        labels[inside] = int(r)
    return labels


def soft_voxelize(points: np.ndarray, regions: np.ndarray, extents: Tuple[int, int, int], spacing: float,
                  temperature: float = SOFT_TEMPERATURE, grid: Tuple[int, int] = (8, 16)) -> np.ndarray:
    """
    Per-region soft occupancy (R, D, H, W) with the same priority rule:
    p_r = occ_r * prod_{q > r} (1 - occ_q).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_regions = int(regions.max()) if regions.size else 0
    occ = np.zeros((n_regions,) + tuple(extents))
    if points.size == 0:
        return occ
    for r in range(1, n_regions + 1):
        occ[r - 1] = region_occupancy(points[regions == r], extents, spacing, soft=True,
                                      temperature=temperature, grid=grid)
    out = occ.copy()
    free = np.ones(extents)
    for r in range(n_regions - 1, -1, -1):
        out[r] = occ[r] * free
        free = free * (1.0 - occ[r])
    return out


def one_hot(labels: np.ndarray, n_regions: int) -> np.ndarray:
    return np.stack([(labels == r).astype(np.float64) for r in range(1, n_regions + 1)])


def render_labels(model: ShapeModel, tau, extents: Tuple[int, int, int], spacing: float,
                  soft: bool = False, temperature: float = SOFT_TEMPERATURE) -> np.ndarray:
    """synthesize + voxelize: hard labels, or soft per-region occupancy."""
    points = synthesize(model, tau)
    if soft:
        return soft_voxelize(points, model.regions, extents, spacing, temperature, model.grid)
    return voxelize(points, model.regions, extents, spacing, model.grid)


# =============================================================================
# Finite-Difference Gradients
# =============================================================================


def default_fd_steps(model: ShapeModel, spacing: float) -> np.ndarray:
    return np.concatenate([
        FD_MODE_STEP * np.sqrt(model.eigvals),
        np.full(3, FD_ROTATION_STEP),
        np.full(3, FD_TRANSLATION_STEP * spacing),
        [FD_LOG_SCALE_STEP],
    ])


def fd_grad(fn: Callable[[np.ndarray], float], tau: np.ndarray, steps: np.ndarray,
            threads: int = 1) -> np.ndarray:
    """Central differences (f(tau + h_j e_j) - f(tau - h_j e_j)) / 2 h_j for every coordinate."""
    tau = np.asarray(tau, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(steps, dtype=np.float64), tau.shape)
    if np.any(steps <= 0):
        raise ShapeError("Finite-difference steps must be positive")

    def coordinate(j: int) -> float:
        up, down = tau.copy(), tau.copy()
        up[j] += steps[j]
        down[j] -= steps[j]
        return (fn(up) - fn(down)) / (2.0 * steps[j])

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
            return np.array(list(executor.map(coordinate, range(tau.size))))
    return np.array([coordinate(j) for j in range(tau.size)])


def fd_grad_through_ssm(loss: Callable[[np.ndarray], float], tau: np.ndarray, model: ShapeModel,
                        extents: Tuple[int, int, int], spacing: float, soft: bool = False,
                        steps: Optional[np.ndarray] = None, threads: int = 1) -> np.ndarray:
    """dL/dtau where L is evaluated on render_labels(model, tau): 2 (k + 7) renders."""
    if steps is None:
        steps = default_fd_steps(model, spacing)
    return fd_grad(lambda t: loss(render_labels(model, t, extents, spacing, soft)), tau, steps, threads)
