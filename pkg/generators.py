"""
The three learnable networks of the generative chain and the bundle that runs
the chain end to end:

    z -> ShapeNet -> tau_S -> SSM -> labels Y_z
    z -> MaterialNet -> tau_M -> ct_sim -> coarse volume X~_z
    (slice k of X~_z upsampled, slice k of Y_z, k/H) -> Enhancer -> X_{z,k}
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
import ct
import ssm
from autodiff import BatchNormStats, Tensor
from config import (
    ENHANCER_CHANNELS,
    LATENT_DIM,
    LEAKY_SLOPE,
    LOG_SCALE_RANGE,
    MATERIAL_CHANNELS,
    MODE_CLAMP,
    MU_MAX,
    ROTATION_RANGE,
    SHAPE_HIDDEN,
    SOFT_TEMPERATURE,
    TRANSLATION_FRACTION,
)
from errors import ConfigError, ShapeError
from nn import ParamTensor, conv_fans, glorot_uniform, load_stats, stats_state_dict
from schemas import Geometry

# =============================================================================
# Shape Parameter Generator
# =============================================================================


class ShapeNet:
    """G_theta_S: 32 -> 256 -> 128 -> (k + 7), LeakyReLU, LeakyReLU, Tanh."""

    prefix = "g_s"

    def __init__(self, n_modes: int, rng: np.random.Generator, latent_dim: int = LATENT_DIM,
                 hidden: Sequence[int] = SHAPE_HIDDEN):
        self.n_modes = n_modes
        self.out_dim = n_modes + 7
        self.params = ParamTensor()
        sizes = [latent_dim, *hidden, self.out_dim]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            self.params.add(f"g_s.w{i}", glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
            self.params.add(f"g_s.b{i}", np.zeros(fan_out))

    def forward(self, z: Tensor) -> Tensor:
        """Raw tanh outputs in (-1, 1)^(k+7)."""
        p = self.params
        h = ad.reshape(z, (1, z.shape[0]))
        h = ad.leaky_relu(ad.add_bias(ad.matmul(h, p["g_s.w1"]), p["g_s.b1"]))
        h = ad.leaky_relu(ad.add_bias(ad.matmul(h, p["g_s.w2"]), p["g_s.b2"]))
        h = ad.tanh(ad.add_bias(ad.matmul(h, p["g_s.w3"]), p["g_s.b3"]))
        return ad.reshape(h, (self.out_dim,))


def shape_scale(model: ssm.ShapeModel, extent_mm: float) -> np.ndarray:
    """Affine denormalization of tanh outputs: modes, rotation, translation, log-scale."""
    return np.concatenate([
        MODE_CLAMP * np.sqrt(model.eigvals),
        np.full(3, ROTATION_RANGE),
        np.full(3, TRANSLATION_FRACTION * extent_mm),
        [LOG_SCALE_RANGE],
    ])


def gen_shape_params(net: ShapeNet, z, model: ssm.ShapeModel, extent_mm: float) -> Tuple[np.ndarray, Tensor]:
    """tau_S = scale * G_theta_S(z); also returns the raw tanh output for backprop."""
    z = ad.as_tensor(z)
    if z.shape != (net.params["g_s.w1"].shape[0],):
        raise ShapeError(f"Latent has shape {z.shape}, expected ({net.params['g_s.w1'].shape[0]},)")
    if net.n_modes != model.n_modes:
        raise ShapeError(f"ShapeNet emits {net.n_modes} modes, shape model has {model.n_modes}")
    raw = net.forward(z)
    return raw.data * shape_scale(model, extent_mm), raw


# =============================================================================
# Material Generator
# =============================================================================

_MATERIAL_FACTORS = {16: (4, 2, 2), 8: (2, 2, 2), 4: (2, 2, 1), 2: (2, 1, 1)}


def material_factors(extent: int) -> Tuple[int, int, int]:
    if extent not in _MATERIAL_FACTORS:
        raise ConfigError(f"Unsupported material resolution {extent}", key_path="render.material")
    return _MATERIAL_FACTORS[extent]


class MaterialNet:
    """
    G_theta_M: z as 32 x 1^3, then three (upsample, 3^3 conv) stages with
    batchnorm + ReLU after the first two and tanh after the last.
    """

    prefix = "g_m"

    def __init__(self, rng: np.random.Generator, extent: int = 16, latent_dim: int = LATENT_DIM,
                 channels: Sequence[int] = MATERIAL_CHANNELS, mu_max: float = MU_MAX):
        self.extent = extent
        self.factors = material_factors(extent)
        self.mu_max = mu_max
        self.params = ParamTensor()
        widths = [latent_dim, *channels, 1]
        for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            fan_in, fan_out = conv_fans(c_in, c_out, 3)
            self.params.add(f"g_m.conv{i}.w", glorot_uniform(rng, (c_out, c_in, 3, 3, 3), fan_in, fan_out))
            self.params.add(f"g_m.conv{i}.b", np.zeros(c_out))
            if i < len(widths) - 1:
                self.params.add(f"g_m.bn{i}.gamma", np.ones(c_out))
                self.params.add(f"g_m.bn{i}.beta", np.zeros(c_out))
        self.stats: Dict[str, BatchNormStats] = {
            f"g_m.bn{i}": BatchNormStats(c) for i, c in enumerate(channels, start=1)}

    def forward(self, z: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
        """
        Attenuation map mu_max (tanh + 1) / 2 of shape extent^3. Training mode
        normalizes with the statistics of this sample and tracks them when
        ``update_stats`` is set; eval mode normalizes with the running statistics.
        """
        p = self.params
        h = ad.reshape(z, (z.shape[0], 1, 1, 1))
        n_stages = len(self.factors)
        for i, factor in enumerate(self.factors, start=1):
            if factor > 1:
                h = ad.upsample_nn(h, factor)
            h = ad.add_channel_bias(ad.conv3d(h, p[f"g_m.conv{i}.w"]), p[f"g_m.conv{i}.b"])
            if i < n_stages:
                stats = self.stats[f"g_m.bn{i}"] if update_stats or not training else None
                h = ad.batchnorm(h, p[f"g_m.bn{i}.gamma"], p[f"g_m.bn{i}.beta"], stats, training=training)
                h = ad.relu(h)
        h = ad.tanh(ad.reshape(h, (self.extent,) * 3))
        return ad.scale(ad.add_scalar(h, 1.0), 0.5 * self.mu_max)


def gen_material(net: MaterialNet, z, update_stats: bool = True, training: bool = True) -> Tensor:
    """
    tau_M = G_theta_M(z) in [0, mu_max]. In training mode batchnorm uses the
    statistics of the current sample and ``update_stats`` only controls whether
    the running statistics are tracked. With ``training=False`` the running
    statistics are used and left unchanged, so the output depends on z alone.
    """
    z = ad.as_tensor(z)
    if z.shape != (net.params["g_m.conv1.w"].shape[1],):
        raise ShapeError(f"Latent has shape {z.shape}, expected ({net.params['g_m.conv1.w'].shape[1]},)")
    return net.forward(z, training=training, update_stats=update_stats)


# =============================================================================
# Enhancer
# =============================================================================


class Enhancer:
    """
    Four 3x3 conv2d layers 3 -> c -> c -> c -> 1 with LeakyReLU between and a
    linear output. Input channels: upsampled coarse slice, normalized label
    slice, constant k/H.
    """

    prefix = "enh"

    def __init__(self, rng: np.random.Generator, channels: int = ENHANCER_CHANNELS, identity: bool = True):
        if channels < 2:
            raise ConfigError("Enhancer needs at least 2 channels", key_path="networks.enhancer_channels")
        self.channels = channels
        self.params = ParamTensor()
        widths = [3, channels, channels, channels, 1]
        for i, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            fan_in, fan_out = conv_fans(c_in, c_out, 2)
            w = glorot_uniform(rng, (c_out, c_in, 3, 3), fan_in, fan_out)
            if identity:
                w = _identity_weights(i, w)
            self.params.add(f"enh.conv{i}.w", w)
            self.params.add(f"enh.conv{i}.b", np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(1, 5):
            h = ad.add_channel_bias(ad.conv2d(h, self.params[f"enh.conv{i}.w"]), self.params[f"enh.conv{i}.b"])
            if i < 4:
                h = ad.leaky_relu(h)
        return ad.reshape(h, h.shape[1:])


def _identity_weights(layer: int, w: np.ndarray) -> np.ndarray:
    """
    Pass input channel 0 through as the pair (lrelu(a), lrelu(-a)) in channels
    0 and 1; lrelu(a) - lrelu(-a) = (1 + slope) a recovers it at every layer.
    Channels 0/1 receive nothing from the other channels and the output reads
    only channels 0/1.
    """
    w = w.copy()
    g = 1.0 / (1.0 + LEAKY_SLOPE)
    if layer == 1:
        w[:2] = 0.0
        w[0, 0, 1, 1], w[1, 0, 1, 1] = 1.0, -1.0
    elif layer in (2, 3):
        w[:2] = 0.0
        w[0, 0, 1, 1], w[0, 1, 1, 1] = g, -g
        w[1, 0, 1, 1], w[1, 1, 1, 1] = -g, g
    else:
        w[:] = 0.0
        w[0, 0, 1, 1], w[0, 1, 1, 1] = g, -g
    return w


def enhancer_input(coarse_slice: Tensor, label_slice: np.ndarray, k: int, height: int, n_regions: int) -> Tensor:
    """Stack (coarse, labels / R, k / H) into a 3 x H x H input."""
    if not 0 <= k < height:
        raise ShapeError(f"Slice index {k} outside [0, {height})")
    if coarse_slice.shape != (height, height) or np.shape(label_slice) != (height, height):
        raise ShapeError(f"Enhancer slices must be {height}x{height}, got {coarse_slice.shape} and "
                         f"{np.shape(label_slice)}")
    labels = Tensor(np.asarray(label_slice, dtype=np.float64)[None] / max(n_regions, 1))
    plane = Tensor(np.full((1, height, height), k / height))
    return ad.concat([ad.reshape(coarse_slice, (1, height, height)), labels, plane], axis=0)


def enhance_slice(net: Enhancer, coarse_slice, label_slice: np.ndarray, k: int, height: int,
                  n_regions: int) -> Tensor:
    return net.forward(enhancer_input(ad.as_tensor(coarse_slice), label_slice, k, height, n_regions))


@lru_cache(maxsize=16)
def linear_upsample_matrix(coarse: int, fine: int) -> np.ndarray:
    """1D linear interpolation (half-pixel centers, edge clamped) from coarse to fine samples."""
    m = np.zeros((fine, coarse))
    src = np.clip((np.arange(fine) + 0.5) * coarse / fine - 0.5, 0.0, coarse - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(coarse - 2, 0))
    w = src - i0
    m[np.arange(fine), i0] += 1.0 - w
    if coarse > 1:
        m[np.arange(fine), i0 + 1] += w
    m.setflags(write=False)
    return m


def upsample_slice(coarse_volume, k: int, height: int):
    """Slice k of the trilinear upsample of a coarse m^3 volume to height^3."""
    if not 0 <= k < height:
        raise ShapeError(f"Slice index {k} outside [0, {height})")
    m = coarse_volume.shape[0]
    up = linear_upsample_matrix(m, height)
    mats = [up[k:k + 1], up, up]
    out = ad.separable(ad.as_tensor(coarse_volume), mats)
    return ad.reshape(out, (height, height))


# =============================================================================
# Fixed Attenuation Atlas
# =============================================================================


def fixed_material_map(labels: np.ndarray, atlas: Sequence[float], extent: int) -> np.ndarray:
    """Attenuation by region id (background first), block-averaged to the material grid."""
    atlas = np.asarray(atlas, dtype=np.float64)
    if labels.max() >= atlas.size:
        raise ConfigError(f"Atlas has {atlas.size} entries but labels reach id {int(labels.max())}")
    return ct.downsample_volume(atlas[labels], (extent,) * 3)


# =============================================================================
# Generator Bundle
# =============================================================================


@dataclass
class GeneratorBundle:
    shape_net: ShapeNet
    material_net: MaterialNet
    enhancer: Enhancer
    model: ssm.ShapeModel
    geom: Geometry
    soft_temperature: float = SOFT_TEMPERATURE
    window: str = "ramlak"

    @property
    def height(self) -> int:
        return self.geom.volume_shape[0]

    @property
    def extent_mm(self) -> float:
        return self.geom.volume_shape[0] * self.geom.spacing

    @property
    def n_regions(self) -> int:
        return self.model.n_regions

    def shape_params(self, z) -> np.ndarray:
        with ad.no_grad():
            tau, _ = gen_shape_params(self.shape_net, z, self.model, self.extent_mm)
        return tau

    def labels(self, tau: np.ndarray, soft: bool = False) -> np.ndarray:
        return ssm.render_labels(self.model, tau, self.geom.volume_shape, self.geom.spacing,
                                 soft, self.soft_temperature)

    def coarse_volume(self, material):
        _, coarse = ct.ct_sim(None, material, self.geom, self.window)
        return coarse

    def render_sample(self, z, k: int, material: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Full chain for one slice, forward only."""
        with ad.no_grad():
            tau = self.shape_params(z)
            labels = self.labels(tau)
            if material is None:
                material = gen_material(self.material_net, z, training=False).data
            coarse = self.coarse_volume(Tensor(material))
            up = upsample_slice(coarse, k, self.height)
            image = enhance_slice(self.enhancer, up, labels[k], k, self.height, self.n_regions)
        return {"tau": tau, "labels": labels, "material": material, "coarse": coarse.data,
                "slice": image.data}

    def render_volume(self, z, material: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Stack every enhanced slice into an H^3 volume; returns (volume, labels)."""
        with ad.no_grad():
            tau = self.shape_params(z)
            labels = self.labels(tau)
            if material is None:
                material = gen_material(self.material_net, z, training=False).data
            coarse = self.coarse_volume(Tensor(material))
            volume = np.stack([
                enhance_slice(self.enhancer, upsample_slice(coarse, k, self.height), labels[k], k,
                              self.height, self.n_regions).data
                for k in range(self.height)])
        return volume, labels

    def render_from_labels(self, labels: np.ndarray, coarse: np.ndarray, enhancer: Optional[Enhancer] = None) -> np.ndarray:
        """Enhance every slice of a given coarse volume conditioned on given labels."""
        enhancer = enhancer or self.enhancer
        with ad.no_grad():
            return np.stack([
                enhance_slice(enhancer, upsample_slice(Tensor(coarse), k, self.height), labels[k], k,
                              self.height, self.n_regions).data
                for k in range(self.height)])

    def state_dict(self) -> Dict[str, np.ndarray]:
        arrays = {}
        arrays.update(self.shape_net.params.state_dict())
        arrays.update(self.material_net.params.state_dict())
        arrays.update(stats_state_dict(self.material_net.stats))
        arrays.update(self.enhancer.params.state_dict())
        return arrays

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        self.shape_net.params.load_state_dict(arrays)
        self.material_net.params.load_state_dict(arrays)
        load_stats(self.material_net.stats, arrays)
        self.enhancer.params.load_state_dict(arrays)


def build_bundle(model: ssm.ShapeModel, geom: Geometry, material_extent: int, seed: int,
                 shape_hidden: Sequence[int] = SHAPE_HIDDEN, material_channels: Sequence[int] = MATERIAL_CHANNELS,
                 enhancer_channels: int = ENHANCER_CHANNELS, latent_dim: int = LATENT_DIM) -> GeneratorBundle:
    """Fresh networks with independent init streams per network."""
    seq = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(s) for s in seq.spawn(3)]
    return GeneratorBundle(
        shape_net=ShapeNet(model.n_modes, rngs[0], latent_dim, shape_hidden),
        material_net=MaterialNet(rngs[1], material_extent, latent_dim, material_channels),
        enhancer=Enhancer(rngs[2], enhancer_channels),
        model=model,
        geom=geom,
    )


def bundle_from_config(model: ssm.ShapeModel, cfg, resolution: Optional[int] = None) -> GeneratorBundle:
    """Bundle for a RunConfig at the given render resolution (default: [render] resolution)."""
    geom = ct.cone_geometry(resolution or cfg.render.resolution, cfg.render.views)
    bundle = build_bundle(model, geom, cfg.render.material, cfg.seed, cfg.networks.shape_hidden,
                          cfg.networks.material_channels, cfg.networks.enhancer_channels)
    bundle.window = cfg.render.window
    return bundle
