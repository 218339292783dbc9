"""
One function per CLI workflow. Each reads its inputs, writes its artifacts
into a staged output directory together with run-info.json, and returns a
small summary dict. Errors propagate as FedSimError subclasses.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import evaluation
import fsct
import phantoms
import selftest
import ssm
from config import GRID_PHI, GRID_THETA
from errors import ConfigError, MissingArtifactError
from federated import harness
from federated.transport import parse_listen
from generators import GeneratorBundle, bundle_from_config
from graph import FULL_CHECKPOINT, run_training
from schemas import RunConfig
from state import new_train_state
from steps.checkpoint import load_bundle_weights, load_prior, load_state
from steps.sampling import sample_dataset, write_synthetic
from utils import log, make_rng, name_key, staged_output, write_pgm, write_run_info


def _require(*paths) -> None:
    missing = [Path(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise MissingArtifactError(missing)


def _load_generator(cfg: RunConfig, checkpoint, resolution: Optional[int] = None) -> GeneratorBundle:
    _require(cfg.paths.ssm, checkpoint)
    bundle = bundle_from_config(ssm.load_ssm(cfg.paths.ssm), cfg, resolution)
    return load_bundle_weights(checkpoint, bundle)


# =============================================================================
# Data
# =============================================================================


def _check_regions(found: int, regions: Optional[int], what: str) -> None:
    if regions is not None and found != regions:
        raise ConfigError(f"{what} has {found} regions, config expects {regions}", key_path="ssm.regions")


def gen_data(family: str, n: int, resolution: int, seed: int, out, views: int,
             sizes: Optional[Tuple[int, int, int]] = None, label_size: int = 4,
             threads: int = 1, noise_photons: Optional[float] = None,
             grid: Tuple[int, int] = (GRID_THETA, GRID_PHI), regions: Optional[int] = None) -> Dict[str, Any]:
    """
    Phantom family on disk; with ``sizes`` the manifest also gets a train/val/test
    split. ``noise_photons`` overrides the family's photon count (0 = noiseless).
    ``grid`` is the vertex grid of every region surface; ``regions``, when
    given, must match the family.
    """
    fam = phantoms.load_family(family)
    _check_regions(fam.n_regions, regions, f"Family '{fam.name}'")
    if noise_photons is not None:
        fam = fam.model_copy(update={"noise_photons": noise_photons})
    with staged_output(out) as stage:
        manifest = phantoms.generate_family(fam, n, resolution, seed, stage, views=views, grid=tuple(grid),
                                            threads=threads)
        if sizes is not None:
            manifest = phantoms.split(manifest, sizes, label_size, seed)
            phantoms.write_manifest(stage / phantoms.MANIFEST_NAME, manifest)
        write_run_info(stage, "gen-data", "", seed, {
            "family": fam.name, "n": n, "resolution": resolution, "views": views,
            "sizes": list(sizes) if sizes else None, "label_size": label_size,
            "noise_photons": fam.noise_photons, "grid": list(grid),
        })
    return {"samples": len(manifest.entries), "out": str(out)}


def build_ssm(shapes, modes: int, out, regions: Optional[int] = None) -> Dict[str, Any]:
    """Shape model from a dataset (labeled train point sets) or a directory of *.lab.fsct files."""
    shapes = Path(shapes)
    _require(shapes)
    if (shapes / phantoms.MANIFEST_NAME).exists() or shapes.is_file():
        points, grid = phantoms.load_shapes(phantoms.load_manifest(shapes))
    else:
        points, grid = phantoms.load_shape_dir(shapes)
    n_regions = points.shape[1] // (3 * grid[0] * grid[1])
    _check_regions(n_regions, regions, f"Shape data in {shapes}")
    model = ssm.build_ssm(points, ssm.region_labels(n_regions, grid), grid, k=min(modes, len(points) - 1))
    ssm.save_ssm(out, model)
    write_run_info(Path(out).parent, "build-ssm", "", 0, {"shapes": str(shapes), "modes": model.n_modes,
                                                           "ssm": str(out)})
    log("SSM", f"{model.n_modes} modes from {len(points)} shapes -> {out}", "SUCCESS")
    return {"modes": model.n_modes, "shapes": len(points), "out": str(out)}


# =============================================================================
# Training
# =============================================================================


def train(cfg: RunConfig, out=None, threads: int = 1, resume=None) -> Dict[str, Any]:
    """Single-site GLO training; writes metrics.csv, pre.fsct and full.fsct."""
    out = Path(out or cfg.paths.out)
    _require(cfg.paths.ssm, resume)
    view = phantoms.DatasetView(phantoms.load_manifest(cfg.paths.data))
    samples = view.split_samples("train")
    if not samples:
        raise ConfigError(f"No train samples in {cfg.paths.data}", key_path="paths.data")
    model = ssm.load_ssm(cfg.paths.ssm)
    _check_regions(model.n_regions, cfg.ssm.regions, f"Shape model {cfg.paths.ssm}")
    bundle = bundle_from_config(model, cfg, view.resolution)
    if resume:
        state = load_state(resume, bundle, threads)
        if list(state["sample_ids"]) != [s.sample_id for s in samples]:
            raise ConfigError(f"Checkpoint {resume} was trained on a different sample list", key_path="paths.data")
    else:
        state = new_train_state(bundle, [s.sample_id for s in samples], [s.labeled for s in samples],
                                cfg.train.seed, threads)
    with staged_output(out) as stage:
        state = run_training(state, samples, cfg.train, stage)
        write_run_info(stage, "train", cfg.to_toml(), cfg.seed, {"epochs": state["epoch"]})
    return {"epochs": state["epoch"], "checkpoint": str(out / FULL_CHECKPOINT)}


def federated_overrides(cfg: RunConfig, sites: Optional[Sequence] = None, rounds: Optional[int] = None,
                        listen: Optional[str] = None) -> RunConfig:
    """Config with [paths] sites, [federated] rounds and listen replaced where given, validated again."""
    raw = cfg.model_dump(mode="json")
    if sites:
        raw["paths"]["sites"] = [str(p) for p in sites]
    if rounds is not None:
        raw["federated"]["rounds"] = rounds
    if listen is not None:
        parse_listen(listen)
        raw["federated"]["listen"] = listen
    return RunConfig.from_dict(raw)


def train_federated(cfg: RunConfig, out=None, threads: int = 1, transport: Optional[str] = None,
                    sites: Optional[Sequence] = None, rounds: Optional[int] = None,
                    listen: Optional[str] = None) -> Dict[str, Any]:
    """Synchronous federated rounds over the configured sites."""
    cfg = federated_overrides(cfg, sites, rounds, listen)
    if not cfg.paths.sites:
        raise ConfigError("No site files configured", key_path="paths.sites")
    out = Path(out or cfg.paths.out)
    _require(cfg.paths.ssm, *cfg.paths.sites)
    model = ssm.load_ssm(cfg.paths.ssm)
    clients = [harness.build_client(harness.load_site(p), model, cfg, threads) for p in cfg.paths.sites]
    with staged_output(out) as stage:
        result = harness.run_federation(clients, cfg.federated.rounds, cfg.federated, transport, threads)
        fsct.save(stage / "global.fsct", result.params)
        for site_id, arrays in result.enhancers.items():
            fsct.save(stage / f"enhancer-{site_id}.fsct", arrays)
        wire_bytes = result.wire.total_bytes if result.wire else 0
        write_run_info(stage, "train-federated", cfg.to_toml(), cfg.seed, {
            "rounds": result.rounds, "sites": sorted(result.enhancers), "wire_bytes": wire_bytes,
        })
    return {"rounds": result.rounds, "sites": len(clients), "wire_bytes": wire_bytes}


# =============================================================================
# Sampling and Rendering
# =============================================================================


def sample(cfg: RunConfig, checkpoint, n: int, out, seed: Optional[int] = None) -> Dict[str, Any]:
    """n synthetic volume/label pairs from a trained generator and its latent prior."""
    seed = cfg.seed if seed is None else seed
    bundle = _load_generator(cfg, checkpoint)
    prior = load_prior(checkpoint)
    with staged_output(out) as stage:
        write_synthetic(sample_dataset(bundle, prior, n, seed), stage, seed)
        write_run_info(stage, "sample", cfg.to_toml(), seed, {"checkpoint": str(checkpoint), "n": n})
    return {"samples": n, "out": str(out)}


def write_previews(volume: np.ndarray, out_dir, prefix: str = "slice") -> List[Path]:
    """One 8-bit PGM per axial slice, windowed on the whole volume range."""
    lo, hi = float(volume.min()), float(volume.max())
    return [write_pgm(Path(out_dir) / f"{prefix}-{k:03d}.pgm", volume[k], lo, hi) for k in range(volume.shape[0])]


def render(cfg: RunConfig, out, checkpoint=None, volume=None, seed: Optional[int] = None,
           enhancer=None) -> Dict[str, Any]:
    """
    Previews of an existing volume file, or a fresh render from the generator
    (latent drawn from the prior). With ``enhancer`` the same subject is also
    rendered through that site's enhancer.
    """
    if (checkpoint is None) == (volume is None):
        raise ConfigError("render needs exactly one of a checkpoint or a volume file")
    seed = cfg.seed if seed is None else seed
    with staged_output(out) as stage:
        if volume is not None:
            _require(volume)
            arrays = fsct.load(volume)
            key = "volume" if "volume" in arrays else "labels"
            if key not in arrays:
                raise ConfigError(f"{volume} holds neither a volume nor labels")
            written = write_previews(np.asarray(arrays[key]), stage)
        else:
            bundle = _load_generator(cfg, checkpoint)
            z = load_prior(checkpoint).sample(make_rng(seed, name_key("render")), 1)[0]
            own = bundle.enhancer.params.state_dict()
            if enhancer is None:
                vol, labels = bundle.render_volume(z)
                arrays = {"volume": vol, "labels": labels.astype(np.float64), "z": z}
            else:
                _require(enhancer)
                vol, other, labels = harness.cross_site_render(bundle, z, own, fsct.load(enhancer))
                arrays = {"volume": vol, "cross_volume": other, "labels": labels.astype(np.float64), "z": z}
                write_previews(other, stage, prefix="cross")
            fsct.save(stage / "render.fsct", arrays)
            written = write_previews(vol, stage)
        write_run_info(stage, "render", cfg.to_toml(), seed, {
            "checkpoint": str(checkpoint) if checkpoint else None, "volume": str(volume) if volume else None,
            "enhancer": str(enhancer) if enhancer else None,
        })
    return {"slices": len(written), "out": str(out)}


# =============================================================================
# Evaluation and Selftest
# =============================================================================


def evaluate(cfg: RunConfig, out, threads: int = 1) -> Dict[str, Any]:
    """Arm protocol report as CSV; run-info.json is written next to it."""
    out = Path(out)
    rows = evaluation.evaluate_protocol(cfg, out, threads)
    write_run_info(out.parent, "evaluate", cfg.to_toml(), cfg.seed, {"report": str(out), "rows": len(rows)})
    return {"rows": len(rows), "out": str(out)}


def run_selftest(quick: bool = False, only: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    results = selftest.run_selftest(quick, only)
    return {"checks": len(results), "seconds": sum(r.seconds for r in results)}
