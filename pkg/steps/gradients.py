"""
Gradient computations shared by the single-site trainer and the federated
clients. Nothing in this module updates parameters.

Shape parameters reach the labels only through synthesize + voxelize, which
have no analytic derivative. dL/dtau comes from central differences and is
chained into the shape network by seeding its raw tanh output with
dL/dtau * scale (tau = scale * raw).
"""

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

import autodiff as ad
import ct
import generators
import losses
import ssm
from autodiff import Tape, Tensor
from generators import GeneratorBundle


@dataclass
class StepGrads:
    shape: Dict[str, np.ndarray] = field(default_factory=dict)       # g_s.*
    material: Dict[str, np.ndarray] = field(default_factory=dict)    # g_m.*
    enhancer: Dict[str, np.ndarray] = field(default_factory=dict)    # enh.*
    latent: Optional[np.ndarray] = None
    metrics: Dict[str, float] = field(default_factory=dict)
    enhancer_input: Optional[np.ndarray] = None

    def global_grads(self) -> Dict[str, np.ndarray]:
        """The gradients a federated site shares: shape and material generators only."""
        return {**self.shape, **self.material}


def _zero_grads(bundle: GeneratorBundle) -> None:
    bundle.shape_net.params.zero_grad()
    bundle.material_net.params.zero_grad()
    bundle.enhancer.params.zero_grad()


def label_slice(bundle: GeneratorBundle, tau: np.ndarray, k: int, soft: bool) -> np.ndarray:
    """
    Slice k of the generated labels as the enhancer sees them. Soft mode gives
    the expected region id under the soft occupancy, so the finite-difference
    shape gradient of the slice loss is not piecewise constant. Rendering and
    sampling always pass hard labels; the two agree away from region
    boundaries and differ by a fraction of a region id across them.
    """
    if soft:
        occ = bundle.labels(tau, soft=True)
        ids = np.arange(1, occ.shape[0] + 1, dtype=np.float64)
        return np.tensordot(ids, occ[:, k], axes=1)
    return bundle.labels(tau)[k].astype(np.float64)


def shape_loss(bundle: GeneratorBundle, tau: np.ndarray, target: np.ndarray, soft: bool) -> float:
    """Mean soft IoU over regions between generated occupancy and ground-truth labels."""
    with ad.no_grad():
        volume = bundle.labels(tau, soft)
        occ = volume if soft else ssm.one_hot(volume, bundle.n_regions)
        return float(losses.loss_miou(occ, target, bundle.n_regions).data)


def _fd_steps(bundle: GeneratorBundle) -> np.ndarray:
    return ssm.default_fd_steps(bundle.model, bundle.geom.spacing)


def supervised_grads(bundle: GeneratorBundle, z_value: np.ndarray, labels: np.ndarray, volume: np.ndarray,
                     soft: bool = True, threads: int = 1, update_stats: bool = True) -> StepGrads:
    """
    Labeled pre-training gradients: mIoU loss for the shape branch (through
    finite differences) and loss_material for the material branch (autodiff).
    """
    z = Tensor(np.array(z_value, dtype=np.float64), requires_grad=True)
    _zero_grads(bundle)
    extent = bundle.material_net.extent
    target_coarse = ct.downsample_volume(volume, (extent,) * 3)
    scale = generators.shape_scale(bundle.model, bundle.extent_mm)

    with Tape() as tape:
        tau, raw = generators.gen_shape_params(bundle.shape_net, z, bundle.model, bundle.extent_mm)
        material = generators.gen_material(bundle.material_net, z, update_stats)
        coarse = bundle.coarse_volume(material)
        loss_m = losses.loss_material(coarse, target_coarse)

    with ad.no_grad():
        g_tau = ssm.fd_grad(lambda t: shape_loss(bundle, t, labels, soft), tau, _fd_steps(bundle), threads)
        loss_iou = shape_loss(bundle, tau, labels, soft)
    tape.backward([(raw, g_tau * scale), (loss_m, None)])

    return StepGrads(
        shape=bundle.shape_net.params.grads(),
        material=bundle.material_net.params.grads(),
        latent=z.grad.copy() if z.grad is not None else np.zeros_like(z.data),
        metrics={"loss_iou": loss_iou, "loss_material": float(loss_m.data)},
    )


def enhancer_grads(bundle: GeneratorBundle, z_value: np.ndarray, labels: np.ndarray, volume: np.ndarray,
                   k: int) -> StepGrads:
    """
    Enhancer pre-training on slice k with the generators frozen. The label
    channel is the ground-truth slice, not the generated one.
    """
    _zero_grads(bundle)
    with ad.no_grad():
        material = generators.gen_material(bundle.material_net, z_value, update_stats=False)
        up = generators.upsample_slice(bundle.coarse_volume(material), k, bundle.height)
    with Tape() as tape:
        x = generators.enhancer_input(up, labels[k], k, bundle.height, bundle.n_regions)
        out = bundle.enhancer.forward(x)
        loss = losses.loss_slice(out, volume[k], multiscale=False)
    tape.backward(loss)
    return StepGrads(enhancer=bundle.enhancer.params.grads(), metrics={"loss_slice": float(loss.data)},
                     enhancer_input=x.data.copy())


def unsupervised_grads(bundle: GeneratorBundle, z_value: np.ndarray, volume: np.ndarray, k: int,
                       soft: bool = True, threads: int = 1, update_stats: bool = True) -> StepGrads:
    """
    Full generative chain to one enhanced slice compared with the real slice
    (MSE plus multi-scale MSE). Autodiff covers material, enhancer and the
    latent's material path; the shape branch goes through finite differences
    with the coarse slice held fixed.
    """
    z = Tensor(np.array(z_value, dtype=np.float64), requires_grad=True)
    _zero_grads(bundle)
    real = volume[k]
    height, n_regions = bundle.height, bundle.n_regions
    scale = generators.shape_scale(bundle.model, bundle.extent_mm)

    with Tape() as tape:
        tau, raw = generators.gen_shape_params(bundle.shape_net, z, bundle.model, bundle.extent_mm)
        material = generators.gen_material(bundle.material_net, z, update_stats)
        up = generators.upsample_slice(bundle.coarse_volume(material), k, height)
        out = generators.enhance_slice(bundle.enhancer, up, label_slice(bundle, tau, k, soft), k, height, n_regions)
        loss = losses.loss_slice(out, real)

    fixed = up.data.copy()

    def slice_loss(t: np.ndarray) -> float:
        with ad.no_grad():
            image = generators.enhance_slice(bundle.enhancer, fixed, label_slice(bundle, t, k, soft), k,
                                             height, n_regions)
            return float(losses.loss_slice(image, real).data)

    with ad.no_grad():
        g_tau = ssm.fd_grad(slice_loss, tau, _fd_steps(bundle), threads)
    tape.backward([(loss, None), (raw, g_tau * scale)])

    return StepGrads(
        shape=bundle.shape_net.params.grads(),
        material=bundle.material_net.params.grads(),
        enhancer=bundle.enhancer.params.grads(),
        latent=z.grad.copy() if z.grad is not None else np.zeros_like(z.data),
        metrics={"loss_unlabeled": float(loss.data)},
    )
