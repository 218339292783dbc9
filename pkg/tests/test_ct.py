"""
CT simulator: projector/adjoint pair, ramp filter, FBP/FDK and the differentiable simulator.

Run with:
    PYTHONPATH=. pytest -q tests/test_ct.py
"""
import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

import ct
from autodiff import Tape, Tensor, total, square
from conftest import numerical_grad, rel_err
from errors import ConfigError, ShapeError
from schemas import Geometry


@pytest.fixture(scope="module")
def geom16():
    return ct.parallel_geometry(16, 8)


@pytest.fixture(scope="module")
def cone8():
    return ct.cone_geometry(8, 8)


def _dense_matrix(geom):
    n_vox = int(np.prod(geom.volume_shape))
    cols = []
    for i in range(n_vox):
        basis = np.zeros(n_vox)
        basis[i] = 1.0
        cols.append(ct.forward_project(basis.reshape(geom.volume_shape), geom).reshape(-1))
    return np.stack(cols, axis=1)


def _joseph_ray_reference(image, theta, offset):
    """Straight-line Joseph sum for one parallel ray through a 2D image, unit spacing."""
    n = image.shape[0]
    half = (n - 1) / 2.0
    d = np.array([math.cos(theta), math.sin(theta)])
    o = offset * np.array([-math.sin(theta), math.cos(theta)])
    a = int(np.argmax(np.abs(d)))
    b = 1 - a
    total_ = 0.0
    for j in range(n):
        t = ((j - half) - o[a]) / d[a]
        u = o[b] + t * d[b] + half
        k = math.floor(u)
        w = u - k
        for kk, ww in ((k, 1.0 - w), (k + 1, w)):
            if 0 <= kk < n and ww != 0.0:
                idx = (j, kk) if a == 0 else (kk, j)
                total_ += ww * image[idx] / abs(d[a])
    return total_


# ====== geometry ======

def test_geometry_validation():
    geom = ct.cone_geometry(32, 32)
    assert geom.source_to_detector > geom.source_to_iso > geom.half_diagonal
    assert np.all(np.diff(geom.angles) > 0) and len(geom.angles) == 32
    with pytest.raises(ValueError):
        Geometry(mode="conebeam3d", n_views=4, volume_shape=(8, 8, 8), detector_shape=(9, 9),
                 pixel_pitch=1.0, source_to_iso=5.0, source_to_detector=20.0)
    assert hash(geom) == hash(ct.cone_geometry(32, 32))


# ====== forward / back projection ======

def test_zero_in_zero_out(geom16, cone8):
    for geom in (geom16, cone8):
        assert not ct.forward_project(np.zeros(geom.volume_shape), geom).any()
        assert not ct.back_project(np.zeros(geom.sinogram_shape), geom).any()


def test_centered_voxel_ray_through_center():
    geom = ct.parallel_geometry(5, 4, spacing=0.5)
    vol = np.zeros(geom.volume_shape)
    vol[0, 2, 2] = 0.03
    sino = ct.forward_project(vol, geom)
    center_bin = geom.detector_shape[1] // 2
    assert sino[0, 0, center_bin] == pytest.approx(0.03 * 0.5, rel=1e-12)


def test_projector_matches_straight_line_reference(geom16, rng):
    vol = rng.uniform(size=geom16.volume_shape)
    sino = ct.forward_project(vol, geom16)
    _, u = ct.detector_coordinates(geom16)
    for view in (0, 3, 5):
        for col in (2, 11, 19):
            expected = _joseph_ray_reference(vol[0], geom16.angles[view], u[col])
            assert sino[view, 0, col] == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_explicit_matrix_oracle(geom16, rng):
    dense = _dense_matrix(geom16)
    x = rng.normal(size=geom16.volume_shape)
    y = rng.normal(size=geom16.sinogram_shape)
    assert np.max(np.abs(ct.forward_project(x, geom16).reshape(-1) - dense @ x.reshape(-1))) <= 1e-10
    assert np.max(np.abs(ct.back_project(y, geom16).reshape(-1) - dense.T @ y.reshape(-1))) <= 1e-10


@pytest.mark.parametrize("make", [lambda: ct.parallel_geometry(16, 8), lambda: ct.cone_geometry(8, 8)])
def test_adjoint_identity(make, rng):
    geom = make()
    for _ in range(3):
        x = rng.normal(size=geom.volume_shape)
        y = rng.normal(size=geom.sinogram_shape)
        ax = ct.forward_project(x, geom)
        lhs, rhs = np.vdot(ax, y), np.vdot(x, ct.back_project(y, geom))
        assert abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y)) < 1e-10


def test_linearity(cone8, rng):
    x, y = rng.normal(size=cone8.volume_shape), rng.normal(size=cone8.volume_shape)
    combined = ct.forward_project(2.0 * x - 0.5 * y, cone8)
    separate = 2.0 * ct.forward_project(x, cone8) - 0.5 * ct.forward_project(y, cone8)
    assert np.max(np.abs(combined - separate)) <= 1e-12


def test_shape_mismatch_raises(geom16):
    with pytest.raises(ShapeError):
        ct.forward_project(np.zeros((1, 15, 16)), geom16)
    with pytest.raises(ShapeError):
        ct.back_project(np.zeros((7, 1, 23)), geom16)


# ====== ramp filter ======

def test_ramp_filter_zero_and_dc_kill():
    assert not ct.ramp_filter(np.zeros((3, 1, 16))).any()
    row = np.full((1, 1, 32), 2.5)
    out = ct.ramp_filter(row, pad=False, response="sampled")
    assert np.max(np.abs(out)) < 1e-10 * 2.5


@pytest.mark.parametrize("window", ["ramlak", "hann"])
@pytest.mark.parametrize("response", ["sampled", "spatial"])
def test_ramp_filter_impulse_matches_direct_dft(window, response):
    n, pitch = 12, 0.7
    row = np.zeros(n)
    row[4] = 1.0
    length = 32
    k = np.arange(length)
    dft = np.exp(-2j * math.pi * np.outer(k, k) / length)
    freqs = np.where(k < length / 2, k, k - length) / (length * pitch)
    if response == "sampled":
        h = np.abs(freqs)
    else:
        m = np.minimum(k, length - k)
        kernel = np.where(m % 2 == 1, -1.0 / (math.pi * np.maximum(m, 1)) ** 2, 0.0)
        kernel[0] = 0.25
        h = np.real(dft @ kernel) / pitch
    if window == "hann":
        h = h * 0.5 * (1.0 + np.cos(2.0 * math.pi * freqs * pitch))
    padded = np.concatenate([row, np.zeros(length - n)])
    expected = np.real(np.conj(dft) @ (h * (dft @ padded)) / length)[:n]
    out = ct.ramp_filter(row[None, None, :], window, pitch, response=response)[0, 0]
    assert np.max(np.abs(out - expected)) <= 1e-10


def test_ramp_filter_is_self_adjoint(rng):
    a, b = rng.normal(size=(2, 3, 20)), rng.normal(size=(2, 3, 20))
    assert np.vdot(ct.ramp_filter(a), b) == pytest.approx(np.vdot(a, ct.ramp_filter(b)), rel=1e-12)


def test_unknown_window_is_a_config_error():
    with pytest.raises(ConfigError):
        ct.ramp_filter(np.zeros((1, 1, 8)), window="cosine")


# ====== reconstruction ======

def _support_disk(n, radius):
    c = (np.arange(n) - (n - 1) / 2.0)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return (xx ** 2 + yy ** 2) <= radius ** 2


def test_fbp_zero_and_too_few_views():
    geom = ct.parallel_geometry(8, 4)
    assert not ct.fbp_reconstruct(np.zeros(geom.sinogram_shape), geom).any()
    single = ct.parallel_geometry(8, 1)
    with pytest.raises(ConfigError):
        ct.fbp_reconstruct(np.zeros(single.sinogram_shape), single)


def test_fbp_shepp_logan_fidelity():
    geom = ct.parallel_geometry(128, 180)
    phantom = ct.shepp_logan(128)
    phantom = gaussian_filter(phantom[0], sigma=2.0)[None]
    recon = ct.reconstruct(phantom, geom)
    mask = _support_disk(128, 0.45 * 128)
    err = np.linalg.norm((recon - phantom)[0][mask]) / np.linalg.norm(phantom[0][mask])
    print(f"[INFO] [FBP] Shepp-Logan relative RMSE {err:.4f}")
    assert err <= 0.05


def test_fbp_uniform_disk_mean():
    geom = ct.parallel_geometry(64, 90)
    disk = ct.disk_phantom(64, 0.25 * 64, 0.02)
    recon = ct.reconstruct(disk, geom)[0]
    inner = _support_disk(64, 0.25 * 64 - 3)
    assert recon[inner].mean() == pytest.approx(0.02, rel=0.02)


def test_poisson_noise_disabled_and_seeded(rng):
    sino = np.full((2, 1, 5), 0.5)
    assert np.array_equal(ct.add_poisson_noise(sino, 0.0, rng), sino)
    a = ct.add_poisson_noise(sino, 1e4, np.random.default_rng(3))
    b = ct.add_poisson_noise(sino, 1e4, np.random.default_rng(3))
    assert np.array_equal(a, b) and np.all(np.isfinite(a))
    assert abs(a.mean() - 0.5) < 0.05


# ====== simulator ======

def test_ct_sim_zero_material_and_labels_pass_through(cone8):
    labels = np.ones(cone8.volume_shape, dtype=np.int64)
    y, x = ct.ct_sim(labels, np.zeros((4, 4, 4)), cone8)
    assert y is labels
    assert x.shape == (4, 4, 4) and not x.any()


def test_ct_sim_extent_mismatch(cone8):
    with pytest.raises(ShapeError):
        ct.ct_sim(None, np.zeros((3, 3, 3)), cone8)


def test_ct_sim_gradient(cone8, rng):
    material = rng.uniform(0.0, 0.03, size=(4, 4, 4))

    def loss(m):
        _, x = ct.ct_sim(None, m, cone8)
        return float(np.sum(x * x))

    t = Tensor(material, requires_grad=True)
    with Tape() as tape:
        _, x = ct.ct_sim(None, t, cone8)
        out = total(square(x))
    tape.backward(out)
    num = numerical_grad(loss, material, h=1e-6)
    assert rel_err(t.grad, num) < 1e-4


def test_ct_sim_constant_material():
    geom = ct.cone_geometry(32, 32)
    _, x = ct.ct_sim(None, np.full((16, 16, 16), 0.02), geom)
    core = x[5:11, 5:11, 5:11]
    assert core.mean() == pytest.approx(0.02, rel=0.05)
