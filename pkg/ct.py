"""
Differentiable CT simulator.

The projector A is a Joseph ray-driven operator assembled once per geometry
as a sparse system matrix; back-projection is its transpose, so the pair is
adjoint by construction. Reconstruction is ramp-filtered back-projection
(parallel beam) or FDK (circular cone beam). Every stage accepts either a
numpy array or an autodiff Tensor; Tensors come back as Tensors with the
adjoint recorded as the backward rule.

Coordinates are (z, y, x) in mm with the isocenter at the volume center.
Sinograms are indexed (view, detector row, detector column).
"""

import math
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy import sparse

from autodiff import Tensor, linear_op, separable
from config import RAMP_WINDOWS, SOURCE_TO_DETECTOR_FACTOR, SOURCE_TO_ISO_FACTOR
from errors import ConfigError, ShapeError
from schemas import Geometry

# =============================================================================
# Geometry Factories
# =============================================================================


def _odd_at_least(value: float) -> int:
    n = int(math.ceil(value - 1e-9))
    return n if n % 2 else n + 1


def parallel_geometry(n: int, views: int, spacing: float = 1.0) -> Geometry:
    """n x n slice, views over [0, pi), detector covering the slice diagonal."""
    return Geometry(
        mode="parallel2d",
        n_views=views,
        volume_shape=(1, n, n),
        spacing=spacing,
        detector_shape=(1, _odd_at_least(math.sqrt(2.0) * n)),
        pixel_pitch=spacing,
    )


def cone_geometry(n: int, views: int, spacing: float = 1.0,
                  iso_factor: float = SOURCE_TO_ISO_FACTOR,
                  detector_factor: float = SOURCE_TO_DETECTOR_FACTOR) -> Geometry:
    """
    n^3 volume on a full circular orbit. Detector pitch is the voxel size
    magnified to the detector plane; columns cover the bounding sphere and rows
    cover the top and bottom faces seen from the nearest source position.
    """
    width = n * spacing
    sid, sdd = iso_factor * width, detector_factor * width
    pitch = spacing * sdd / sid
    radius = 0.5 * spacing * math.sqrt(3.0) * n
    half_u = sdd * math.tan(math.asin(radius / sid))
    near = sid - 0.5 * spacing * math.sqrt(2.0) * n
    half_v = sdd * (0.5 * width) / near
    return Geometry(
        mode="conebeam3d",
        n_views=views,
        volume_shape=(n, n, n),
        spacing=spacing,
        detector_shape=(2 * math.ceil(half_v / pitch) + 1, 2 * math.ceil(half_u / pitch) + 1),
        pixel_pitch=pitch,
        source_to_iso=sid,
        source_to_detector=sdd,
    )


def detector_coordinates(geom: Geometry) -> Tuple[np.ndarray, np.ndarray]:
    """Centered (v, u) pixel coordinates in mm on the detector plane."""
    rows, cols = geom.detector_shape
    v = (np.arange(rows) - (rows - 1) / 2.0) * geom.pixel_pitch
    u = (np.arange(cols) - (cols - 1) / 2.0) * geom.pixel_pitch
    return v, u


# =============================================================================
# Joseph System Matrix
# =============================================================================


def _ray_set(geom: Geometry):
    """Origins, unit directions and admissible parameter range of every ray, view-major."""
    v, u = detector_coordinates(geom)
    vv, uu = np.meshgrid(v, u, indexing="ij")
    vv, uu = vv.reshape(-1), uu.reshape(-1)
    origins, directions, t_hi = [], [], []
    for beta in geom.angles:
        central = np.array([0.0, math.cos(beta), math.sin(beta)])
        axis_u = np.array([0.0, -math.sin(beta), math.cos(beta)])
        axis_v = np.array([1.0, 0.0, 0.0])
        if geom.mode == "parallel2d":
            origin = uu[:, None] * axis_u[None, :]
            direction = np.repeat(central[None, :], uu.size, axis=0)
            limit = np.full(uu.size, np.inf)
        else:
            source = -geom.source_to_iso * central
            pixels = ((geom.source_to_detector - geom.source_to_iso) * central[None, :]
                      + uu[:, None] * axis_u[None, :] + vv[:, None] * axis_v[None, :])
            offset = pixels - source[None, :]
            limit = np.linalg.norm(offset, axis=1)
            origin = np.repeat(source[None, :], uu.size, axis=0)
            direction = offset / limit[:, None]
        origins.append(origin)
        directions.append(direction)
        t_hi.append(limit)
    t_hi = np.concatenate(t_hi)
    t_lo = np.where(np.isinf(t_hi), -np.inf, 0.0)
    return np.concatenate(origins), np.concatenate(directions), t_lo, t_hi


def joseph_matrix(origins: np.ndarray, directions: np.ndarray, shape: Tuple[int, int, int],
                  spacing: float, t_lo: Optional[np.ndarray] = None,
                  t_hi: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    """
    Joseph interpolating traversal: each ray is sampled once per voxel plane
    along its dominant axis with weight spacing/|d_a| and bilinear
    interpolation in the two remaining axes. Samples outside the volume or
    outside [t_lo, t_hi] contribute nothing.
    """
    n_rays = origins.shape[0]
    dims = np.asarray(shape)
    half = (dims - 1) / 2.0
    strides = (shape[1] * shape[2], shape[2], 1)
    t_lo = np.full(n_rays, -np.inf) if t_lo is None else t_lo
    t_hi = np.full(n_rays, np.inf) if t_hi is None else t_hi
    dominant = np.argmax(np.abs(directions), axis=1)

    rows, cols, vals = [], [], []
    for a in range(3):
        ray_idx = np.nonzero(dominant == a)[0]
        if ray_idx.size == 0:
            continue
        o, d = origins[ray_idx], directions[ray_idx]
        lo, hi = t_lo[ray_idx], t_hi[ray_idx]
        b0, b1 = [b for b in range(3) if b != a]
        step = spacing / np.abs(d[:, a])
        for j in range(shape[a]):
            t = ((j - half[a]) * spacing - o[:, a]) / d[:, a]
            live = (t >= lo) & (t <= hi)
            u0 = (o[:, b0] + t * d[:, b0]) / spacing + half[b0]
            u1 = (o[:, b1] + t * d[:, b1]) / spacing + half[b1]
            f0, f1 = np.floor(u0), np.floor(u1)
            w0, w1 = u0 - f0, u1 - f1
            i0, i1 = f0.astype(np.int64), f1.astype(np.int64)
            for di, wi in ((0, 1.0 - w0), (1, w0)):
                for dj, wj in ((0, 1.0 - w1), (1, w1)):
                    k0, k1 = i0 + di, i1 + dj
                    w = step * wi * wj
                    ok = (live & (w != 0.0) & (k0 >= 0) & (k0 < shape[b0])
                          & (k1 >= 0) & (k1 < shape[b1]))
                    if not ok.any():
                        continue
                    rows.append(ray_idx[ok])
                    cols.append(j * strides[a] + k0[ok] * strides[b0] + k1[ok] * strides[b1])
                    vals.append(w[ok])

    n_vox = int(np.prod(dims))
    if not rows:
        return sparse.csr_matrix((n_rays, n_vox))
    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_rays, n_vox))
    return matrix.tocsr()


@lru_cache(maxsize=8)
def system_matrix(geom: Geometry) -> sparse.csr_matrix:
    origins, directions, t_lo, t_hi = _ray_set(geom)
    return joseph_matrix(origins, directions, geom.volume_shape, geom.spacing, t_lo, t_hi)


# =============================================================================
# Projection Operators
# =============================================================================


def _check(name: str, data_shape, expected) -> None:
    if tuple(data_shape) != tuple(expected):
        raise ShapeError(f"{name}: got shape {tuple(data_shape)}, geometry expects {tuple(expected)}")


def forward_project(volume, geom: Geometry):
    """Line integrals p = A mu (attenuation x mm)."""
    _check("forward_project", volume.shape, geom.volume_shape)
    matrix = system_matrix(geom)

    def fwd(v):
        return (matrix @ v.reshape(-1)).reshape(geom.sinogram_shape)

    def adj(g):
        return (matrix.T @ g.reshape(-1)).reshape(geom.volume_shape)

    if isinstance(volume, Tensor):
        return linear_op(volume, fwd, adj, op="forward_project")
    return fwd(np.asarray(volume, dtype=np.float64))


def back_project(sinogram, geom: Geometry):
    """Exact adjoint of forward_project."""
    _check("back_project", sinogram.shape, geom.sinogram_shape)
    matrix = system_matrix(geom)

    def fwd(g):
        return (matrix.T @ g.reshape(-1)).reshape(geom.volume_shape)

    def adj(v):
        return (matrix @ v.reshape(-1)).reshape(geom.sinogram_shape)

    if isinstance(sinogram, Tensor):
        return linear_op(sinogram, fwd, adj, op="back_project")
    return fwd(np.asarray(sinogram, dtype=np.float64))


# =============================================================================
# Ramp Filter
# =============================================================================


def _padded_length(n: int) -> int:
    return 1 << max(1, (2 * n - 1).bit_length())


@lru_cache(maxsize=32)
def ramp_response(length: int, pitch: float, window: str = "ramlak", response: str = "spatial") -> np.ndarray:
    """
    Frequency response on a length-point grid for detector spacing ``pitch``.

    "spatial" is the DFT of the band-limited Ram-Lak kernel (h[0]=1/4,
    h[odd]=-1/(pi n)^2, in units of 1/pitch^2), which keeps the correct
    small DC term on a finite grid; "sampled" is |f| itself.
    """
    if window not in RAMP_WINDOWS:
        raise ConfigError(f"Unknown ramp window '{window}'", key_path="render.window")
    freqs = np.fft.fftfreq(length, d=pitch)
    if response == "sampled":
        h = np.abs(freqs)
    elif response == "spatial":
        m = np.minimum(np.arange(length), length - np.arange(length))
        kernel = np.zeros(length)
        kernel[0] = 0.25
        odd = m % 2 == 1
        kernel[odd] = -1.0 / (math.pi * m[odd]) ** 2
        h = np.real(np.fft.fft(kernel)) / pitch
    else:
        raise ConfigError(f"Unknown ramp response '{response}'")
    if window == "hann":
        h = h * 0.5 * (1.0 + np.cos(2.0 * math.pi * freqs * pitch))
    h.setflags(write=False)
    return h


def ramp_filter(sinogram: np.ndarray, window: str = "ramlak", pitch: float = 1.0,
                pad: bool = True, response: str = "spatial") -> np.ndarray:
    """
    Filter every detector row (last axis) with the ramp. With ``pad`` the row is
    zero-padded to the next power of two >= 2x its length before the FFT.
    The operator is real, linear and self-adjoint.
    """
    data = np.asarray(sinogram, dtype=np.float64)
    n = data.shape[-1]
    if n < 2:
        raise ShapeError(f"ramp_filter: detector rows need at least 2 samples, got {n}")
    length = _padded_length(n) if pad else n
    h = ramp_response(length, float(pitch), window, response)
    spectrum = np.fft.fft(data, n=length, axis=-1) * h
    return np.real(np.fft.ifft(spectrum, axis=-1))[..., :n]


# =============================================================================
# FBP / FDK
# =============================================================================


def _fbp_weights(geom: Geometry):
    """(pre-weight, post-weight, filter pitch) so that recon = A^T(post * ramp(pre * g))."""
    s = geom.spacing
    if geom.mode == "parallel2d":
        post = (math.pi / geom.n_views) * geom.pixel_pitch / (s * s)
        return 1.0, post, geom.pixel_pitch
    v, u = detector_coordinates(geom)
    sdd = geom.source_to_detector
    cos_gamma = sdd / np.sqrt(sdd * sdd + u[None, :] ** 2 + v[:, None] ** 2)
    delta_iso = geom.pixel_pitch * geom.source_to_iso / sdd
    d_beta = 2.0 * math.pi / geom.n_views
    post = 0.5 * d_beta * delta_iso * delta_iso / s ** 3 * cos_gamma
    return cos_gamma[None, :, :], post[None, :, :], delta_iso


def fbp_reconstruct(sinogram, geom: Geometry, window: str = "ramlak"):
    """
    Filtered back-projection: pi/n_views angular weight for parallel beam;
    cosine pre-weighting, ramp on the virtual detector at the isocenter and
    full-orbit redundancy weight 1/2 for cone beam.
    """
    if geom.n_views < 2:
        raise ConfigError(f"FBP needs at least 2 views, got {geom.n_views}")
    _check("fbp_reconstruct", sinogram.shape, geom.sinogram_shape)
    matrix = system_matrix(geom)
    pre, post, pitch = _fbp_weights(geom)

    def fwd(g):
        q = ramp_filter(pre * g, window, pitch)
        return (matrix.T @ (post * q).reshape(-1)).reshape(geom.volume_shape)

    def adj(f):
        y = (matrix @ f.reshape(-1)).reshape(geom.sinogram_shape)
        return pre * ramp_filter(post * y, window, pitch)

    if isinstance(sinogram, Tensor):
        return linear_op(sinogram, fwd, adj, op="fbp_reconstruct")
    return fwd(np.asarray(sinogram, dtype=np.float64))


def reconstruct(volume, geom: Geometry, window: str = "ramlak"):
    return fbp_reconstruct(forward_project(volume, geom), geom, window)


def add_poisson_noise(sinogram: np.ndarray, photons: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts on I = I0 exp(-p), back to line integrals; photons <= 0 disables noise."""
    if photons <= 0:
        return np.array(sinogram, dtype=np.float64)
    counts = rng.poisson(photons * np.exp(-np.asarray(sinogram)))
    return -np.log(np.maximum(counts, 1) / photons)


def simulate_scan(volume: np.ndarray, geom: Geometry, photons: float = 0.0,
                  rng: Optional[np.random.Generator] = None, window: str = "ramlak") -> np.ndarray:
    """Project, optionally add noise, reconstruct."""
    sino = forward_project(volume, geom)
    if photons > 0:
        if rng is None:
            raise ConfigError("Noisy simulation needs an rng")
        sino = add_poisson_noise(sino, photons, rng)
    return fbp_reconstruct(sino, geom, window)


# =============================================================================
# Resampling and the Simulator
# =============================================================================


@lru_cache(maxsize=16)
def nearest_upsample_matrix(coarse: int, fine: int) -> np.ndarray:
    if fine % coarse:
        raise ShapeError(f"Material extent {coarse} does not divide render extent {fine}")
    factor = fine // coarse
    m = np.zeros((fine, coarse))
    m[np.arange(fine), np.arange(fine) // factor] = 1.0
    m.setflags(write=False)
    return m


@lru_cache(maxsize=16)
def block_average_matrix(fine: int, coarse: int) -> np.ndarray:
    return nearest_upsample_matrix(coarse, fine).T / (fine // coarse)


def upsample_volume(material, extents: Tuple[int, int, int]):
    mats = [nearest_upsample_matrix(c, f) for c, f in zip(material.shape, extents)]
    if isinstance(material, Tensor):
        return separable(material, mats)
    return separable(Tensor(material), mats).data


def downsample_volume(volume, extents: Tuple[int, int, int]):
    mats = [block_average_matrix(f, c) for f, c in zip(volume.shape, extents)]
    if isinstance(volume, Tensor):
        return separable(volume, mats)
    return separable(Tensor(volume), mats).data


def ct_sim(shape_vol: np.ndarray, material, geom: Geometry, window: str = "ramlak"):
    """
    Render a coarse CT volume from a material map: nearest upsample to the
    render grid, project, FBP, block-average back to the material grid.
    Labels pass through unchanged. Differentiable in ``material``.
    """
    if len(material.shape) != 3:
        raise ShapeError(f"ct_sim: material must be 3D, got shape {material.shape}")
    render = geom.volume_shape
    for c, f in zip(material.shape, render):
        if c < 1 or f % c:
            raise ShapeError(f"ct_sim: material {tuple(material.shape)} does not divide render extents {render}")
    if shape_vol is not None and tuple(shape_vol.shape) != tuple(render):
        raise ShapeError(f"ct_sim: label volume {shape_vol.shape} does not match render extents {render}")
    mu = upsample_volume(material, render)
    recon = fbp_reconstruct(forward_project(mu, geom), geom, window)
    return shape_vol, downsample_volume(recon, tuple(material.shape))


# =============================================================================
# Analytic Phantoms
# =============================================================================

# (value, semi-axis a, semi-axis b, x0, y0, angle in degrees), unit square [-1, 1]^2
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def _subpixel_grid(n: int, supersample: int):
    k = n * supersample
    c = (np.arange(k) + 0.5) / k * 2.0 - 1.0
    y, x = np.meshgrid(-c, c, indexing="ij")
    return y, x


def _block_mean(image: np.ndarray, n: int, supersample: int) -> np.ndarray:
    return image.reshape(n, supersample, n, supersample).mean(axis=(1, 3))


def shepp_logan(n: int, scale: float = 0.02, supersample: int = 4) -> np.ndarray:
    """Modified Shepp-Logan slice as a (1, n, n) attenuation volume, area-averaged per pixel."""
    y, x = _subpixel_grid(n, supersample)
    image = np.zeros_like(x)
    for value, a, b, x0, y0, angle in _SHEPP_LOGAN:
        phi = math.radians(angle)
        xr = (x - x0) * math.cos(phi) + (y - y0) * math.sin(phi)
        yr = -(x - x0) * math.sin(phi) + (y - y0) * math.cos(phi)
        image[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += value
    return (scale * _block_mean(image, n, supersample))[None, :, :]


def disk_phantom(n: int, radius: float, mu: float, supersample: int = 4) -> np.ndarray:
    """Uniform disk of ``radius`` pixels centered in a (1, n, n) slice."""
    y, x = _subpixel_grid(n, supersample)
    r = radius * 2.0 / n
    image = np.where(x * x + y * y <= r * r, mu, 0.0)
    return _block_mean(image, n, supersample)[None, :, :]
