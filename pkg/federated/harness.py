"""
Federated and centralized training drivers plus cross-site rendering.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import toml

import ct
import fsct
import phantoms
import ssm
from errors import ConfigError, MissingArtifactError, ProtocolError
from federated.client import Client, initial_params
from federated.messages import GRAD_PREFIX, GradientReport, frame_names, is_global
from federated.server import Server, aggregate, apply_update, make_optimizer, round_lr, server_round
from federated.transport import InProcTransport, TcpTransport, WireLog
from generators import Enhancer, GeneratorBundle, bundle_from_config
from nn import ParamTensor
from schemas import FederatedSection, RunConfig, SiteConfig, TrainSection
from utils import log, progress


@dataclass
class FederationResult:
    params: Dict[str, np.ndarray]
    enhancers: Dict[str, Dict[str, np.ndarray]]
    rounds: int
    wire: Optional[WireLog] = None


# =============================================================================
# Site Setup
# =============================================================================


def load_site(path) -> SiteConfig:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError([path])
    try:
        site = SiteConfig.model_validate(toml.loads(path.read_text(encoding="utf-8")))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not Path(site.data).is_absolute():
        site = site.model_copy(update={"data": str(path.parent / site.data)})
    return site


def build_client(site: SiteConfig, model: ssm.ShapeModel, cfg: RunConfig, threads: int = 1) -> Client:
    """Site client with the shared network initialization and its own data, latents and enhancer."""
    view = phantoms.DatasetView(phantoms.load_manifest(site.data))
    samples = view.split_samples("train")
    bundle = bundle_from_config(model, cfg, view.resolution)
    if site.enhancer_checkpoint:
        bundle.enhancer.params.load_state_dict(fsct.load(site.enhancer_checkpoint))
    return Client(site.site_id, bundle, samples, cfg.train, seed=site.seed, phase=site.phase, threads=threads)


# =============================================================================
# Federated Run
# =============================================================================


def _schedule(clients: Sequence[Client]) -> TrainSection:
    return sorted(clients, key=lambda c: c.site_id)[0].cfg


def run_federation(clients: Sequence[Client], rounds: int, fed: FederatedSection,
                   transport: Optional[str] = None, threads: int = 1) -> FederationResult:
    """
    Synchronous rounds: broadcast, one step per site, aggregate, server step.
    The server step size is ``fed.lr`` for pretraining reports and follows the
    sites' semi-supervised schedule otherwise.
    """
    if not clients:
        raise ConfigError("A federation needs at least one site", key_path="paths.sites")
    kind = transport or fed.transport
    server = Server(initial_params(list(clients)), [c.site_id for c in clients], fed.server_optimizer, fed.lr,
                    schedule=_schedule(clients))
    if kind == "inproc":
        link = InProcTransport(clients, fed.timeout, threads)
    elif kind == "tcp":
        link = TcpTransport(clients, fed.listen, fed.timeout)
    else:
        raise ConfigError(f"Unknown transport '{kind}'", key_path="federated.transport")

    log("Federation", f"{len(clients)} site(s), {rounds} round(s) over {kind}")
    broadcast = server.broadcast()
    try:
        for _ in progress(range(rounds), desc="rounds", total=rounds):
            reports = link.exchange(broadcast)
            broadcast = server_round(server, reports)
    finally:
        link.close(server.round)
    log("Federation", f"Finished {server.round} round(s), {link.wire.total_bytes} bytes on the wire", "SUCCESS")
    return FederationResult(server.params.state_dict(), {c.site_id: c.enhancer_state() for c in clients},
                            server.round, link.wire)


# =============================================================================
# Centralized Oracle
# =============================================================================


def centralized_step(params: ParamTensor, clients: Sequence[Client], round_index: int, optimizer,
                     lr: float, schedule: Optional[TrainSection] = None) -> Dict[str, np.ndarray]:
    """
    One step of centralized training on a batch of one sample per site: the
    same local computations, gradients averaged in site order, one update at
    the scheduled step size for each site's epoch.
    """
    arrays = params.state_dict()
    reports = []
    for client in sorted(clients, key=lambda c: c.site_id):
        client.load_params(arrays)
        grads, _ = client.compute(round_index)
        kind, epoch = client.report_kind(round_index)
        reports.append(GradientReport(round_index, client.site_id, 1, grads, kind, epoch))
    mean = aggregate(reports)
    apply_update(params, mean, optimizer, round_lr(lr, schedule, reports))
    return mean


def run_centralized(clients: Sequence[Client], rounds: int, fed: FederatedSection) -> FederationResult:
    params = ParamTensor()
    for name, value in initial_params(list(clients)).items():
        params.add(name, value)
    optimizer = make_optimizer(fed.server_optimizer)
    for r in range(rounds):
        centralized_step(params, clients, r, optimizer, fed.lr, _schedule(clients))
    return FederationResult(params.state_dict(), {c.site_id: c.enhancer_state() for c in clients}, rounds)


# =============================================================================
# Privacy Scan
# =============================================================================


def scan_wire(wire: WireLog) -> List[str]:
    """Every array name that crossed the wire, excluding report metadata; raises on private names."""
    seen: List[str] = []
    for direction, frame in wire.frames:
        for name in frame_names(frame):
            if name.startswith("meta."):
                continue
            bare = name[len(GRAD_PREFIX):] if name.startswith(GRAD_PREFIX) else name
            if not is_global(bare):
                raise ProtocolError(f"Private array '{name}' found on the wire ({direction})")
            seen.append(name)
    return seen


# =============================================================================
# Cross-site Rendering
# =============================================================================


def _enhancer_from(arrays: Dict[str, np.ndarray], like: Enhancer) -> Enhancer:
    enh = Enhancer(np.random.default_rng(0), channels=like.channels)
    enh.params.load_state_dict(arrays)
    return enh


def cross_site_render(bundle: GeneratorBundle, z: np.ndarray, enh_a: Dict[str, np.ndarray],
                      enh_b: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One latent subject rendered through two sites' enhancers: (volume_a, volume_b, labels)."""
    chain = bundle.render_sample(z, 0)
    labels, coarse = chain["labels"], chain["coarse"]
    vol_a = bundle.render_from_labels(labels, coarse, _enhancer_from(enh_a, bundle.enhancer))
    vol_b = bundle.render_from_labels(labels, coarse, _enhancer_from(enh_b, bundle.enhancer))
    return vol_a, vol_b, labels


def cross_site_render_patient(bundle: GeneratorBundle, volume: np.ndarray, labels: np.ndarray,
                              enh_a: Dict[str, np.ndarray], enh_b: Dict[str, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """A real subject's labels and downsampled scan rendered through two sites' enhancers."""
    extent = bundle.material_net.extent
    coarse = ct.downsample_volume(np.asarray(volume, dtype=np.float64), (extent,) * 3)
    return (bundle.render_from_labels(labels, coarse, _enhancer_from(enh_a, bundle.enhancer)),
            bundle.render_from_labels(labels, coarse, _enhancer_from(enh_b, bundle.enhancer)))
