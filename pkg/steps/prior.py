"""
Multivariate normal over the optimized latents. Fitted after pre-training on
the labeled latents; used to initialize unlabeled latents and to sample new
synthetic subjects.
"""

from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np
from scipy import linalg

from config import LATENT_PRIOR_RIDGE
from errors import ShapeError
from state import TrainState, latent_name
from utils import log, make_rng, name_key


@dataclass
class LatentPrior:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray    # lower factor of cov

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, dim) draws: mean + L eps."""
        eps = rng.normal(size=(n, self.dim))
        return self.mean[None, :] + eps @ self.chol.T

    def arrays(self, prefix: str = "prior") -> Dict[str, np.ndarray]:
        return {f"{prefix}.mean": self.mean, f"{prefix}.cov": self.cov}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], prefix: str = "prior") -> "LatentPrior":
        cov = np.array(arrays[f"{prefix}.cov"])
        return cls(np.array(arrays[f"{prefix}.mean"]), cov, linalg.cholesky(cov, lower=True))


def fit_gaussian(latents: np.ndarray, ridge: float = LATENT_PRIOR_RIDGE) -> LatentPrior:
    """Sample mean and unbiased covariance plus ridge * I."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 2 or latents.shape[0] < 2:
        raise ShapeError(f"Fitting a latent prior needs at least 2 latents, got shape {latents.shape}")
    mean = latents.mean(axis=0)
    centered = latents - mean
    cov = centered.T @ centered / (latents.shape[0] - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(latents.shape[1])
    return LatentPrior(mean, cov, linalg.cholesky(cov, lower=True))


def labeled_latents(state: TrainState) -> np.ndarray:
    idx = np.flatnonzero(state["labeled"])
    return np.stack([state["latents"][latent_name(i)].data for i in idx]) if idx.size else \
        np.zeros((0, 0))


def fit_latent_prior(state: TrainState, ridge: float = LATENT_PRIOR_RIDGE) -> LatentPrior:
    prior = fit_gaussian(labeled_latents(state), ridge)
    log("Prior", f"Fitted latent prior on {int(state['labeled'].sum())} labeled latents "
                 f"(trace {np.trace(prior.cov):.4f})")
    return prior


def init_unlabeled_latents(state: TrainState, prior: LatentPrior) -> int:
    """Draw every unlabeled latent from the prior; returns how many were set."""
    idx = np.flatnonzero(~state["labeled"])
    if idx.size:
        draws = prior.sample(make_rng(state["seed"], name_key("unlabeled-init")), idx.size)
        for row, i in enumerate(idx):
            state["latents"][latent_name(i)].data = draws[row].copy()
    return int(idx.size)
