"""
Semi-supervised phase: labeled steps keep the supervised losses, unlabeled
steps push the full generative chain toward the real slice. Each kind has its
own Adam and its own (generators, enhancer) learning-rate pair; both pairs are
constant for ``epochs_constant`` epochs and then decay linearly to zero over
``epochs_decay`` epochs.
"""

from typing import Dict, List, Sequence, Tuple

import numpy as np

import losses
from phantoms import Sample
from schemas import TrainSection
from state import TrainState, latent_name
from steps.enhancer import pick_slice
from steps.gradients import enhancer_grads, supervised_grads, unsupervised_grads
from steps.pretrain import epoch_order, mean_metrics, update, update_latent
from utils import log


def lr_factor(epoch: int, constant: int, decay: int) -> float:
    if epoch < constant:
        return 1.0
    if decay <= 0:
        return 0.0
    return max(0.0, 1.0 - (epoch - constant) / decay)


def scaled_rates(cfg: TrainSection, epoch: int) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """((labeled nets, labeled enhancer), (unlabeled nets, unlabeled enhancer)) at this epoch."""
    f = lr_factor(epoch, cfg.epochs_constant, cfg.epochs_decay)
    return ((cfg.lr_labeled[0] * f, cfg.lr_labeled[1] * f),
            (cfg.lr_unlabeled[0] * f, cfg.lr_unlabeled[1] * f))


# =============================================================================
# Steps
# =============================================================================


def labeled_step(state: TrainState, index: int, sample: Sample, k: int, rates: Tuple[float, float],
                 cfg: TrainSection) -> Dict[str, float]:
    bundle, opt = state["bundle"], state["opt_labeled"]
    z = state["latents"][latent_name(index)].data
    grads = supervised_grads(bundle, z, sample.labels, sample.volume, cfg.soft_voxelize, state["threads"])
    update(opt, bundle.shape_net.params, grads.shape, rates[0])
    update(opt, bundle.material_net.params, grads.material, rates[0])
    update_latent(state, opt, index, grads.latent, rates[0], cfg.project_latents)
    metrics = dict(grads.metrics)
    if not cfg.freeze_enhancer:
        enh = enhancer_grads(bundle, state["latents"][latent_name(index)].data, sample.labels, sample.volume, k)
        update(opt, bundle.enhancer.params, enh.enhancer, rates[1])
        metrics.update(enh.metrics)
    return metrics


def unlabeled_step(state: TrainState, index: int, sample: Sample, k: int, rates: Tuple[float, float],
                   cfg: TrainSection) -> Dict[str, float]:
    bundle, opt = state["bundle"], state["opt_unlabeled"]
    z = state["latents"][latent_name(index)].data
    grads = unsupervised_grads(bundle, z, sample.volume, k, cfg.soft_voxelize, state["threads"])
    update(opt, bundle.shape_net.params, grads.shape, rates[0])
    update(opt, bundle.material_net.params, grads.material, rates[0])
    if not cfg.freeze_enhancer:
        update(opt, bundle.enhancer.params, grads.enhancer, rates[1])
    update_latent(state, opt, index, grads.latent, rates[0], cfg.project_latents)
    return grads.metrics


# =============================================================================
# Epochs
# =============================================================================


def interleave(first: Sequence[int], second: Sequence[int]) -> List[Tuple[str, int]]:
    """a0 b0 a1 b1 ...; whichever list is longer finishes the schedule."""
    schedule: List[Tuple[str, int]] = []
    for i in range(max(len(first), len(second))):
        if i < len(first):
            schedule.append(("labeled", first[i]))
        if i < len(second):
            schedule.append(("unlabeled", second[i]))
    return schedule


def semi_supervised_epoch(state: TrainState, samples: Sequence[Sample], cfg: TrainSection,
                          epoch: int) -> Dict[str, float]:
    labeled = [i for i, flag in enumerate(state["labeled"]) if flag]
    unlabeled = [i for i, flag in enumerate(state["labeled"]) if not flag]
    labeled_rates, unlabeled_rates = scaled_rates(cfg, epoch)
    rows = []
    for kind, i in interleave(epoch_order(state, labeled, "semi-labeled", epoch),
                              epoch_order(state, unlabeled, "semi-unlabeled", epoch)):
        k = pick_slice(state, f"semi-{kind}", epoch, i)
        if kind == "labeled":
            rows.append(labeled_step(state, i, samples[i], k, labeled_rates, cfg))
        else:
            rows.append(unlabeled_step(state, i, samples[i], k, unlabeled_rates, cfg))
    metrics = mean_metrics(rows)
    metrics["lr"] = labeled_rates[0]
    metrics["lr_enhancer"] = labeled_rates[1]
    log("SemiSupervised", f"epoch {epoch}: " + " ".join(
        f"{k}={v:.4g}" for k, v in metrics.items() if k.startswith("loss")))
    return metrics


def unlabeled_reconstruction_loss(state: TrainState, samples: Sequence[Sample]) -> float:
    """Mean slice loss on the middle slice of every unlabeled sample; 0.0 when there are none."""
    bundle = state["bundle"]
    k = bundle.height // 2
    values = []
    for i, flag in enumerate(state["labeled"]):
        if flag:
            continue
        image = bundle.render_sample(state["latents"][latent_name(i)].data, k)["slice"]
        values.append(float(losses.loss_slice(image, samples[i].volume[k]).data))
    return float(np.mean(values)) if values else 0.0
