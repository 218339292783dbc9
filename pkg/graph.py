from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from langgraph.graph import END, START, StateGraph

# --- Custom Module Imports ---
from config import TRAIN_PHASES
from errors import ShapeError
from phantoms import Sample
from schemas import TrainSection
from state import TrainState
from steps.checkpoint import save_state
from steps.enhancer import pretrain_enhancer_epoch
from steps.pretrain import pretrain_epoch
from steps.prior import fit_latent_prior, init_unlabeled_latents
from steps.semi_supervised import semi_supervised_epoch, unlabeled_reconstruction_loss
from utils import MetricsWriter, log

PRE_CHECKPOINT = "pre.fsct"
FULL_CHECKPOINT = "full.fsct"
METRIC_FIELDS = ("epoch", "phase", "phase_epoch", "loss_iou", "loss_material", "loss_slice",
                 "loss_unlabeled", "loss_recon", "lr", "lr_enhancer")
NODE_NAMES = ("pretrain_params", "pretrain_enhancer", "fit_prior", "semi_supervised", "finish")

# =============================================================================
# Routing Functions
# =============================================================================


def phase_epochs(cfg: TrainSection) -> Dict[str, int]:
    return {
        "pretrain_params": cfg.epochs_pretrain,
        "pretrain_enhancer": cfg.epochs_enhancer,
        "semi_supervised": cfg.epochs_constant + cfg.epochs_decay,
    }


def route_phase(state: TrainState, cfg: TrainSection) -> str:
    """
    pretrain_params -> pretrain_enhancer -> fit_prior -> semi_supervised -> finish.
    A phase runs until its epoch budget is spent, then the router hands over.
    Phases with a zero budget are skipped.
    """
    phase = state["phase"]
    if phase not in TRAIN_PHASES:
        log("Router", "All phases complete. -> __end__", "SUCCESS")
        return END

    budgets = phase_epochs(cfg)
    if state["phase_epoch"] < budgets[phase]:
        return phase

    if phase == "pretrain_params" and budgets["pretrain_enhancer"] > 0:
        log("Router", f"pretrain_params done after {budgets[phase]} epochs. -> pretrain_enhancer")
        return "pretrain_enhancer"
    if phase in ("pretrain_params", "pretrain_enhancer"):
        log("Router", f"{phase} done after {budgets[phase]} epochs. -> fit_prior")
        return "fit_prior"
    log("Router", f"semi_supervised done after {budgets[phase]} epochs. -> finish")
    return "finish"


# =============================================================================
# Graph Assembly
# =============================================================================


def build_training_graph(samples: Sequence[Sample], cfg: TrainSection, out_dir=None):
    """
    Compiled StateGraph over TrainState. Epoch nodes return the schedule
    update and their metric row; fit_prior writes pre.fsct and finish writes
    full.fsct when ``out_dir`` is set.
    """
    out_dir = Path(out_dir) if out_dir else None
    writer = MetricsWriter(out_dir / "metrics.csv", METRIC_FIELDS) if out_dir else None

    def epoch_update(state: TrainState, phase: str, run_epoch) -> dict:
        phase_epoch = state["phase_epoch"] if state["phase"] == phase else 0
        metrics = run_epoch(phase_epoch)
        row = {"epoch": state["epoch"], "phase": phase, "phase_epoch": phase_epoch, **metrics}
        if writer:
            writer.write(row)
        if not all(np.isfinite(v) for k, v in row.items() if k.startswith("loss")):
            log("Graph", f"Non-finite loss at epoch {row['epoch']}: {row}", "WARNING")
        return {"phase": phase, "phase_epoch": phase_epoch + 1, "epoch": state["epoch"] + 1,
                "history": state["history"] + [row]}

    def pretrain_params_node(state: TrainState) -> dict:
        def run(epoch):
            return {**pretrain_epoch(state, samples, cfg, epoch), "lr": cfg.lr_pretrain}
        return epoch_update(state, "pretrain_params", run)

    def pretrain_enhancer_node(state: TrainState) -> dict:
        def run(epoch):
            return {**pretrain_enhancer_epoch(state, samples, cfg, epoch), "lr_enhancer": cfg.lr_enhancer}
        return epoch_update(state, "pretrain_enhancer", run)

    def fit_prior_node(state: TrainState) -> dict:
        """Fit the latent Gaussian, draw the unlabeled latents from it and enter the semi-supervised phase."""
        has_unlabeled = not state["labeled"].all()
        try:
            fitted = fit_latent_prior(state)
        except ShapeError:
            if has_unlabeled:
                raise
            log("Prior", "Fewer than 2 labeled latents; continuing without a latent prior", "WARNING")
            fitted = None
        if fitted is not None and has_unlabeled:
            count = init_unlabeled_latents(state, fitted)
            log("Prior", f"Initialized {count} unlabeled latents from the prior")
        update = {"prior": fitted, "phase": "semi_supervised", "phase_epoch": 0}
        if out_dir:
            save_state(out_dir / PRE_CHECKPOINT, {**state, **update})
        return update

    def semi_supervised_node(state: TrainState) -> dict:
        def run(epoch):
            metrics = semi_supervised_epoch(state, samples, cfg, epoch)
            if not state["labeled"].all():
                metrics["loss_recon"] = unlabeled_reconstruction_loss(state, samples)
            return metrics
        return epoch_update(state, "semi_supervised", run)

    def finish_node(state: TrainState) -> dict:
        update = {"phase": "end", "phase_epoch": 0}
        if out_dir:
            save_state(out_dir / FULL_CHECKPOINT, {**state, **update})
        return update

    def router(state: TrainState) -> str:
        return route_phase(state, cfg)

    builder = StateGraph(TrainState)

    # Add nodes
    builder.add_node("pretrain_params", pretrain_params_node)
    builder.add_node("pretrain_enhancer", pretrain_enhancer_node)
    builder.add_node("fit_prior", fit_prior_node)
    builder.add_node("semi_supervised", semi_supervised_node)
    builder.add_node("finish", finish_node)

    # Add edges
    path_map = {name: name for name in NODE_NAMES}
    path_map[END] = END
    builder.add_conditional_edges(START, router, path_map)
    for name in ("pretrain_params", "pretrain_enhancer", "fit_prior", "semi_supervised"):
        builder.add_conditional_edges(name, router, path_map)
    builder.add_edge("finish", END)

    return builder.compile()


# =============================================================================
# Driver
# =============================================================================


def run_training(state: TrainState, samples: Sequence[Sample], cfg: TrainSection,
                 out_dir=None) -> TrainState:
    """
    Run the training graph from the state's current phase to the end. With
    ``out_dir`` set, metric rows go to metrics.csv, the state after
    pre-training (prior included) goes to pre.fsct and the final state to
    full.fsct.
    """
    if len(samples) != len(state["sample_ids"]):
        raise ShapeError(f"{len(samples)} samples for {len(state['sample_ids'])} latents")
    log("Graph", f"Training {int(state['labeled'].sum())} labeled + "
                 f"{int((~state['labeled']).sum())} unlabeled samples from phase '{state['phase']}'")

    graph = build_training_graph(samples, cfg, out_dir)
    # one superstep per epoch plus fit_prior, finish and the entry hop
    limit = sum(phase_epochs(cfg).values()) + 8
    final: Optional[TrainState] = graph.invoke(state, config={"recursion_limit": limit})
    state = TrainState(**final)

    log("Graph", f"Training finished after {state['epoch']} epochs", "SUCCESS")
    return state
