from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from errors import ConfigError, ProtocolError
from federated.messages import GradientReport, ModelBroadcast
from nn import Adam, ParamTensor, sgd_step
from schemas import TrainSection
from steps.semi_supervised import scaled_rates
from utils import log

# =============================================================================
# Aggregation
# =============================================================================


def aggregate(reports: Sequence[GradientReport]) -> Dict[str, np.ndarray]:
    """Sample-count weighted mean of the reported gradients, summed in site_id order."""
    if not reports:
        raise ProtocolError("No gradient reports to aggregate")
    ordered = sorted(reports, key=lambda r: r.site_id)
    total = float(sum(r.sample_count for r in ordered))
    if total <= 0:
        raise ProtocolError("Gradient reports carry no samples")
    names = list(ordered[0].grads)
    out: Dict[str, np.ndarray] = {}
    for name in names:
        acc = None
        for r in ordered:
            if name not in r.grads:
                raise ProtocolError(f"Site '{r.site_id}' did not report gradient '{name}'")
            term = float(r.sample_count) * r.grads[name]
            acc = term if acc is None else acc + term
        out[name] = acc / total
    return out


def apply_update(params: ParamTensor, grads: Mapping[str, np.ndarray], optimizer, lr: float) -> None:
    """One server step: Adam, or plain gradient descent when ``optimizer`` is None."""
    tensors = dict(params.items())
    for name, p in tensors.items():
        if name not in grads:
            raise ProtocolError(f"Aggregate is missing gradient '{name}'")
        if np.shape(grads[name]) != p.shape:
            raise ProtocolError(f"Gradient '{name}' has shape {np.shape(grads[name])}, parameter {p.shape}")
    if optimizer is None:
        sgd_step(tensors, grads, lr)
    else:
        optimizer.step(tensors, lr, grads)


def report_lr(base: float, schedule: Optional[TrainSection], kind: str, epoch: int) -> float:
    """
    Generator step size one report asks for. Pretraining reports use the
    server rate ``base``; semi-supervised reports use the scheduled labeled or
    unlabeled generator rate of their site epoch.
    """
    if schedule is None or kind == "pretrain":
        return base
    labeled, unlabeled = scaled_rates(schedule, epoch)
    return labeled[0] if kind == "labeled" else unlabeled[0]


def round_lr(base: float, schedule: Optional[TrainSection], reports: Sequence[GradientReport]) -> float:
    """Sample-count weighted mean of the per-report step sizes, summed in site_id order."""
    ordered = sorted(reports, key=lambda r: r.site_id)
    total = float(sum(r.sample_count for r in ordered))
    return sum(r.sample_count * report_lr(base, schedule, r.kind, r.epoch) for r in ordered) / total


def make_optimizer(kind: str):
    if kind == "adam":
        return Adam()
    if kind == "sgd":
        return None
    raise ConfigError(f"Unknown server optimizer '{kind}'", key_path="federated.server_optimizer")


# =============================================================================
# Server
# =============================================================================


class Server:
    """
    Owns the global shape/material parameters. A round is: broadcast, collect
    exactly one report per registered site for that round, aggregate, step.
    With a ``schedule`` the step size follows the semi-supervised learning-rate
    schedule at the epoch each report was computed in.
    """

    def __init__(self, initial: Mapping[str, np.ndarray], site_ids: Sequence[str], optimizer: str = "adam",
                 lr: float = 1e-4, schedule: Optional[TrainSection] = None):
        if not site_ids:
            raise ConfigError("A federation needs at least one site", key_path="paths.sites")
        if len(set(site_ids)) != len(site_ids):
            raise ConfigError("Site ids must be unique", key_path="paths.sites")
        self.params = ParamTensor()
        for name, value in initial.items():
            self.params.add(name, value)
        self.site_ids: List[str] = sorted(site_ids)
        self.optimizer = make_optimizer(optimizer)
        self.lr = lr
        self.schedule = schedule
        self.last_lr: Optional[float] = None
        self.round = 0
        self.pending: Dict[str, GradientReport] = {}

    def broadcast(self) -> ModelBroadcast:
        return ModelBroadcast(self.round, self.params.state_dict())

    def receive(self, report: GradientReport) -> None:
        if report.round != self.round:
            raise ProtocolError(f"Stale report from '{report.site_id}': round {report.round}, "
                                f"server is at round {self.round}")
        if report.site_id not in self.site_ids:
            raise ProtocolError(f"Report from unregistered site '{report.site_id}'")
        if report.site_id in self.pending:
            raise ProtocolError(f"Duplicate report from '{report.site_id}' for round {self.round}")
        self.pending[report.site_id] = report

    def step(self) -> ModelBroadcast:
        missing = [s for s in self.site_ids if s not in self.pending]
        if missing:
            raise ProtocolError(f"Round {self.round}: missing reports from {', '.join(missing)}")
        reports = list(self.pending.values())
        grads = aggregate(reports)
        self.last_lr = round_lr(self.lr, self.schedule, reports)
        apply_update(self.params, grads, self.optimizer, self.last_lr)
        self.pending = {}
        self.round += 1
        return self.broadcast()


def server_round(server: Server, reports: Sequence[GradientReport]) -> ModelBroadcast:
    for report in reports:
        server.receive(report)
    out = server.step()
    log("Server", f"Round {server.round - 1} aggregated from {len(reports)} site(s)")
    return out
