# state.py

# =============================================================================
# Training State Definition
# =============================================================================
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from typing_extensions import TypedDict

from config import LATENT_DIM, TRAIN_PHASES
from errors import ShapeError
from generators import GeneratorBundle
from nn import Adam, ParamTensor
from utils import make_rng, name_key


class TrainState(TypedDict, total=False):
    """Everything one site's GLO training run owns."""
    # Model
    bundle: GeneratorBundle
    latents: ParamTensor            # one "z.<index>" per dataset sample
    sample_ids: List[str]
    labeled: np.ndarray             # bool per sample, fixed at dataset load

    # Optimizers (labeled steps, unlabeled steps)
    opt_labeled: Adam
    opt_unlabeled: Adam

    # Schedule position
    phase: str
    phase_epoch: int
    epoch: int
    prior: Optional[Any]

    # Run settings
    seed: int
    threads: int
    history: List[Dict[str, Any]]


def latent_name(index: int) -> str:
    return f"z.{index:05d}"


def new_train_state(bundle: GeneratorBundle, sample_ids: Sequence[str], labeled: Sequence[bool],
                    seed: int, threads: int = 1, latent_dim: int = LATENT_DIM) -> TrainState:
    """Fresh state: unit-normal latents drawn in sample order from one seeded stream."""
    if len(sample_ids) != len(labeled):
        raise ShapeError(f"{len(sample_ids)} sample ids for {len(labeled)} labeled flags")
    rng = make_rng(seed, name_key("latents"))
    latents = ParamTensor()
    for i in range(len(sample_ids)):
        latents.add(latent_name(i), rng.normal(size=latent_dim))
    return TrainState(
        bundle=bundle,
        latents=latents,
        sample_ids=list(sample_ids),
        labeled=np.array(labeled, dtype=bool),
        opt_labeled=Adam(),
        opt_unlabeled=Adam(),
        phase=TRAIN_PHASES[0],
        phase_epoch=0,
        epoch=0,
        prior=None,
        seed=seed,
        threads=threads,
        history=[],
    )


def index_of(state: TrainState) -> Dict[str, int]:
    return {sid: i for i, sid in enumerate(state["sample_ids"])}
