from typing import Dict, Sequence

from errors import ShapeError
from phantoms import Sample
from schemas import TrainSection
from state import TrainState, latent_name
from steps.gradients import enhancer_grads
from steps.pretrain import epoch_order, mean_metrics, update
from utils import log, make_rng, name_key


def pick_slice(state: TrainState, tag: str, epoch: int, index: int) -> int:
    return int(make_rng(state["seed"], name_key(tag), epoch, index).integers(state["bundle"].height))


def pretrain_enhancer_step(state: TrainState, index: int, sample: Sample, k: int, lr: float) -> Dict[str, float]:
    """Enhancer-only update on slice k, conditioned on the ground-truth label slice."""
    if sample.labels is None:
        raise ShapeError(f"pretrain_enhancer_step needs a labeled sample, got '{sample.sample_id}'")
    bundle = state["bundle"]
    z = state["latents"][latent_name(index)].data
    grads = enhancer_grads(bundle, z, sample.labels, sample.volume, k)
    update(state["opt_labeled"], bundle.enhancer.params, grads.enhancer, lr)
    return grads.metrics


def pretrain_enhancer_epoch(state: TrainState, samples: Sequence[Sample], cfg: TrainSection,
                            epoch: int) -> Dict[str, float]:
    labeled = [i for i, flag in enumerate(state["labeled"]) if flag]
    rows = [pretrain_enhancer_step(state, i, samples[i], pick_slice(state, "enhancer", epoch, i), cfg.lr_enhancer)
            for i in epoch_order(state, labeled, "enhancer", epoch)]
    metrics = mean_metrics(rows)
    log("Enhancer", f"epoch {epoch}: loss_slice={metrics.get('loss_slice', float('nan')):.3e}")
    return metrics
