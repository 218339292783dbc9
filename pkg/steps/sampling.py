from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

import fsct
import phantoms
from generators import GeneratorBundle
from schemas import DatasetManifest, ManifestEntry
from steps.prior import LatentPrior
from utils import log, make_rng, name_key, progress


@dataclass
class SyntheticSample:
    index: int
    z: np.ndarray
    tau: np.ndarray
    volume: np.ndarray
    labels: np.ndarray

    @property
    def sample_id(self) -> str:
        return f"synthetic-{self.index:04d}"


def sample_dataset(bundle: GeneratorBundle, prior: LatentPrior, n: int, seed: int) -> List[SyntheticSample]:
    """n (volume, labels) pairs from z ~ prior; sample i depends only on (seed, i)."""
    out = []
    for i in progress(range(n), desc="sample", total=n):
        z = prior.sample(make_rng(seed, name_key("synthetic"), i), 1)[0]
        volume, labels = bundle.render_volume(z)
        out.append(SyntheticSample(i, z, bundle.shape_params(z), volume, labels))
    if n:
        log("Sampling", f"Generated {n} synthetic volumes at {bundle.height}^3")
    return out


def write_synthetic(samples: List[SyntheticSample], out_dir, seed: int) -> DatasetManifest:
    """Synthetic pairs as a labeled train-split dataset readable by phantoms.load_manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    resolution = samples[0].volume.shape[0] if samples else 0
    for s in samples:
        volume_path, label_path = f"{s.sample_id}.vol.fsct", f"{s.sample_id}.lab.fsct"
        fsct.save(out_dir / volume_path, {"volume": s.volume, "z": s.z})
        fsct.save(out_dir / label_path, {"labels": s.labels.astype(np.float64), "tau": s.tau})
        entries.append(ManifestEntry(sample_id=s.sample_id, volume_path=volume_path, label_path=label_path,
                                     split="train", labeled=True))
    manifest = DatasetManifest(family="synthetic", seed=seed, resolution=resolution, entries=entries,
                               root=str(out_dir))
    phantoms.write_manifest(out_dir / phantoms.MANIFEST_NAME, manifest)
    return manifest
