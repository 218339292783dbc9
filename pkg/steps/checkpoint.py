from pathlib import Path
from typing import Dict

import numpy as np

import fsct
from config import TRAIN_PHASES
from errors import FormatError
from generators import GeneratorBundle
from nn import Adam, ParamTensor
from state import TrainState, latent_name
from steps.prior import LatentPrior
from utils import log

_END = len(TRAIN_PHASES)


def state_arrays(state: TrainState) -> Dict[str, np.ndarray]:
    """Everything needed to resume: latents, flags, networks, batchnorm stats, optimizers, schedule."""
    n = len(state["sample_ids"])
    phase = state["phase"]
    arrays: Dict[str, np.ndarray] = {
        "meta.epoch": np.array(float(state["epoch"])),
        "meta.phase": np.array(float(TRAIN_PHASES.index(phase) if phase in TRAIN_PHASES else _END)),
        "meta.phase_epoch": np.array(float(state["phase_epoch"])),
        "meta.seed": fsct.text_array(str(state["seed"])),
        "meta.sample_ids": fsct.text_array("\n".join(state["sample_ids"])),
        "labeled": state["labeled"].astype(np.float64),
        "latents": np.stack([state["latents"][latent_name(i)].data for i in range(n)]) if n else np.zeros((0, 0)),
    }
    arrays.update(state["bundle"].state_dict())
    arrays.update(state["opt_labeled"].state_dict("opt.labeled"))
    arrays.update(state["opt_unlabeled"].state_dict("opt.unlabeled"))
    if state.get("prior") is not None:
        arrays.update(state["prior"].arrays())
    return arrays


def save_state(path, state: TrainState) -> Path:
    path = fsct.save(path, state_arrays(state))
    log("Checkpoint", f"Saved {state['phase']} state (epoch {state['epoch']}) to {path}")
    return path


def _seed(values: np.ndarray) -> int:
    # decimal text, exact for any int; a 0-d float is read as is
    if np.ndim(values) == 0:
        return int(values)
    try:
        return int(fsct.array_text(values))
    except ValueError as exc:
        raise FormatError(f"Checkpoint seed is not an integer: {exc}") from exc


def restore_state(arrays: Dict[str, np.ndarray], bundle: GeneratorBundle, threads: int = 1) -> TrainState:
    """Rebuild a TrainState around an already constructed bundle of matching architecture."""
    try:
        ids = fsct.array_text(arrays["meta.sample_ids"])
        sample_ids = ids.split("\n") if ids else []
        latents_array = arrays["latents"]
        phase_index = int(arrays["meta.phase"])
        state = TrainState(
            bundle=bundle,
            sample_ids=sample_ids,
            labeled=arrays["labeled"].astype(bool),
            opt_labeled=Adam(),
            opt_unlabeled=Adam(),
            phase=TRAIN_PHASES[phase_index] if phase_index < _END else "end",
            phase_epoch=int(arrays["meta.phase_epoch"]),
            epoch=int(arrays["meta.epoch"]),
            seed=_seed(arrays["meta.seed"]),
            threads=threads,
            prior=LatentPrior.from_arrays(arrays) if "prior.mean" in arrays else None,
            history=[],
        )
    except KeyError as exc:
        raise FormatError(f"Checkpoint is missing array {exc}") from exc
    if latents_array.shape[0] != len(sample_ids) or state["labeled"].shape[0] != len(sample_ids):
        raise FormatError("Checkpoint latents, flags and sample ids disagree in count")
    latents = ParamTensor()
    for i in range(len(sample_ids)):
        latents.add(latent_name(i), latents_array[i])
    state["latents"] = latents
    bundle.load_state_dict(arrays)
    state["opt_labeled"].load_state_dict(arrays, "opt.labeled")
    state["opt_unlabeled"].load_state_dict(arrays, "opt.unlabeled")
    return state


def load_state(path, bundle: GeneratorBundle, threads: int = 1) -> TrainState:
    state = restore_state(fsct.load(path), bundle, threads)
    log("Checkpoint", f"Loaded {state['phase']} state (epoch {state['epoch']}) from {path}")
    return state


def load_bundle_weights(path, bundle: GeneratorBundle) -> GeneratorBundle:
    """Networks only (for sampling and evaluation)."""
    bundle.load_state_dict(fsct.load(path))
    return bundle


def load_prior(path) -> LatentPrior:
    arrays = fsct.load(path)
    if "prior.mean" not in arrays:
        raise FormatError(f"{path}: checkpoint has no fitted latent prior")
    return LatentPrior.from_arrays(arrays)
