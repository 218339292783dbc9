from typing import Dict, List, Mapping, Sequence

import numpy as np

from errors import ShapeError
from nn import Adam, ParamTensor
from phantoms import Sample
from schemas import TrainSection
from state import TrainState, latent_name
from steps.gradients import supervised_grads
from utils import log, make_rng, name_key

# =============================================================================
# Parameter Updates
# =============================================================================


def update(optimizer: Adam, params: ParamTensor, grads: Mapping[str, np.ndarray], lr: float) -> None:
    optimizer.step(dict(params.items()), lr, grads)


def update_latent(state: TrainState, optimizer: Adam, index: int, grad: np.ndarray, lr: float,
                  project: bool = False) -> None:
    name = latent_name(index)
    z = state["latents"][name]
    optimizer.step({name: z}, lr, {name: grad})
    if project:
        z.data = z.data / max(1.0, float(np.linalg.norm(z.data)))


def mean_metrics(rows: Sequence[Dict[str, float]]) -> Dict[str, float]:
    keys = sorted({k for row in rows for k in row})
    return {k: float(np.mean([row[k] for row in rows if k in row])) for k in keys}


# =============================================================================
# Supervised Pre-training
# =============================================================================


def pretrain_step(state: TrainState, index: int, sample: Sample, lr: float, soft: bool = True,
                  project: bool = False, update_nets: bool = True) -> Dict[str, float]:
    """
    One labeled step: z_i, the shape generator and the material generator
    move together under one Adam at one learning rate.
    """
    if sample.labels is None:
        raise ShapeError(f"pretrain_step needs a labeled sample, got '{sample.sample_id}'")
    bundle, opt = state["bundle"], state["opt_labeled"]
    z = state["latents"][latent_name(index)].data
    grads = supervised_grads(bundle, z, sample.labels, sample.volume, soft, state["threads"])
    if update_nets:
        update(opt, bundle.shape_net.params, grads.shape, lr)
        update(opt, bundle.material_net.params, grads.material, lr)
    update_latent(state, opt, index, grads.latent, lr, project)
    return grads.metrics


def epoch_order(state: TrainState, indices: Sequence[int], tag: str, epoch: int) -> List[int]:
    """Deterministic shuffle of sample indices for one epoch."""
    order = np.array(indices, dtype=np.int64)
    make_rng(state["seed"], name_key(tag), epoch).shuffle(order)
    return [int(i) for i in order]


def pretrain_epoch(state: TrainState, samples: Sequence[Sample], cfg: TrainSection, epoch: int) -> Dict[str, float]:
    labeled = [i for i, flag in enumerate(state["labeled"]) if flag]
    rows = [pretrain_step(state, i, samples[i], cfg.lr_pretrain, cfg.soft_voxelize, cfg.project_latents)
            for i in epoch_order(state, labeled, "pretrain", epoch)]
    metrics = mean_metrics(rows)
    log("Pretrain", f"epoch {epoch}: loss_iou={metrics.get('loss_iou', float('nan')):.4f} "
                    f"loss_material={metrics.get('loss_material', float('nan')):.3e}")
    return metrics
