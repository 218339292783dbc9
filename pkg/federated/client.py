"""
A federated site: private samples, per-sample latents and a private enhancer.
Each round it loads the broadcast generators, takes one step on one local
sample and reports the shape/material gradients. Latent and enhancer updates
stay on the site.
"""

from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from errors import ConfigError, ProtocolError
from federated.messages import GradientReport, ModelBroadcast, is_global
from generators import GeneratorBundle
from phantoms import Sample
from schemas import TrainSection
from state import TrainState, latent_name, new_train_state
from steps.gradients import enhancer_grads, supervised_grads, unsupervised_grads
from steps.pretrain import epoch_order, update, update_latent
from steps.prior import fit_latent_prior, init_unlabeled_latents
from steps.semi_supervised import interleave, scaled_rates
from utils import log, make_rng, name_key


class Client:

    def __init__(self, site_id: str, bundle: GeneratorBundle, samples: Sequence[Sample], cfg: TrainSection,
                 seed: int = 0, phase: str = "pretrain", threads: int = 1):
        if phase not in ("pretrain", "semi_supervised"):
            raise ConfigError(f"Unknown site phase '{phase}'", key_path="phase")
        self.site_id = site_id
        self.samples = list(samples)
        self.cfg = cfg
        self.phase = phase
        self.state: TrainState = new_train_state(bundle, [s.sample_id for s in samples],
                                                 [s.labeled for s in samples], seed, threads)
        self.expected_round = 0
        labeled = [i for i, s in enumerate(self.samples) if s.labeled]
        unlabeled = [i for i, s in enumerate(self.samples) if not s.labeled]
        self._labeled, self._unlabeled = labeled, unlabeled if phase == "semi_supervised" else []
        if not self._labeled and not self._unlabeled:
            raise ConfigError(f"Site '{site_id}' has no usable samples for phase '{phase}'")
        if phase == "semi_supervised" and unlabeled and len(labeled) >= 2:
            self.state["prior"] = fit_latent_prior(self.state)
            init_unlabeled_latents(self.state, self.state["prior"])

    @property
    def bundle(self) -> GeneratorBundle:
        return self.state["bundle"]

    @property
    def rounds_per_epoch(self) -> int:
        return len(self._labeled) + len(self._unlabeled)

    # ====== parameters ======

    def load_params(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.bundle.shape_net.params.load_state_dict(arrays)
        self.bundle.material_net.params.load_state_dict(arrays)

    def global_params(self) -> Dict[str, np.ndarray]:
        arrays = {**self.bundle.shape_net.params.state_dict(), **self.bundle.material_net.params.state_dict()}
        return {k: v for k, v in arrays.items() if is_global(k)}

    def enhancer_state(self) -> Dict[str, np.ndarray]:
        return self.bundle.enhancer.params.state_dict()

    # ====== local step ======

    def pick(self, round_index: int) -> Tuple[str, int, int]:
        """(kind, sample index, epoch) for a round: one pass over a shuffled schedule per epoch."""
        epoch, pos = divmod(round_index, self.rounds_per_epoch)
        schedule = interleave(epoch_order(self.state, self._labeled, "fed-labeled", epoch),
                              epoch_order(self.state, self._unlabeled, "fed-unlabeled", epoch))
        kind, index = schedule[pos]
        return kind, index, epoch

    def report_kind(self, round_index: int) -> Tuple[str, int]:
        """(report kind, epoch) the server uses to pick its step size for this round."""
        kind, _, epoch = self.pick(round_index)
        return ("pretrain" if self.phase == "pretrain" else kind), epoch

    def compute(self, round_index: int) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
        """Gradients to share for this round; applies the local latent and enhancer updates."""
        kind, i, epoch = self.pick(round_index)
        sample, state, cfg = self.samples[i], self.state, self.cfg
        z = state["latents"][latent_name(i)].data.copy()
        k = int(make_rng(state["seed"], name_key("fed-slice"), round_index).integers(self.bundle.height))
        if self.phase == "pretrain":
            rates, opt = (cfg.lr_pretrain, cfg.lr_enhancer), state["opt_labeled"]
        else:
            labeled_rates, unlabeled_rates = scaled_rates(cfg, epoch)
            rates = labeled_rates if kind == "labeled" else unlabeled_rates
            opt = state["opt_labeled"] if kind == "labeled" else state["opt_unlabeled"]

        if kind == "labeled":
            grads = supervised_grads(self.bundle, z, sample.labels, sample.volume, cfg.soft_voxelize, state["threads"])
            shared, metrics = grads.global_grads(), dict(grads.metrics)
            if not cfg.freeze_enhancer:
                enh = enhancer_grads(self.bundle, z, sample.labels, sample.volume, k)
                update(opt, self.bundle.enhancer.params, enh.enhancer, rates[1])
                metrics.update(enh.metrics)
        else:
            grads = unsupervised_grads(self.bundle, z, sample.volume, k, cfg.soft_voxelize, state["threads"])
            shared, metrics = grads.global_grads(), dict(grads.metrics)
            if not cfg.freeze_enhancer:
                update(opt, self.bundle.enhancer.params, grads.enhancer, rates[1])
        update_latent(state, opt, i, grads.latent, rates[0], cfg.project_latents)
        return shared, metrics

    def run(self, broadcast: ModelBroadcast) -> GradientReport:
        if broadcast.round != self.expected_round:
            raise ProtocolError(f"Site '{self.site_id}' expected round {self.expected_round}, "
                                f"got broadcast for round {broadcast.round}")
        self.load_params(broadcast.params)
        shared, metrics = self.compute(broadcast.round)
        self.expected_round += 1
        log("Client", f"[{self.site_id}] round {broadcast.round}: " + " ".join(
            f"{k}={v:.4g}" for k, v in metrics.items()))
        kind, epoch = self.report_kind(broadcast.round)
        return GradientReport(broadcast.round, self.site_id, 1, shared, kind, epoch)


def initial_params(clients: List[Client]) -> Dict[str, np.ndarray]:
    """Starting global parameters: those of the first site in site_id order."""
    return sorted(clients, key=lambda c: c.site_id)[0].global_params()
