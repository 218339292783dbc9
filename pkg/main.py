"""
Command-line entry point for the federated CT simulator.

    python main.py gen-data --family siteA --n 20 --res 32 --seed 7 --out data/siteA/
    python main.py build-ssm --shapes data/siteA/ --modes 14 --out ssm.fsct
    python main.py train --config train.toml
    python main.py train-federated --config fed.toml --sites a.toml b.toml c.toml --rounds 100 --listen 127.0.0.1:7431
    python main.py sample --config train.toml --checkpoint runs/full.fsct --n 3 --out synth/
    python main.py evaluate --config eval.toml --out report.csv
    python main.py selftest --quick

Exit codes: 0 success, 2 bad config or input, 3 federation protocol error,
4 selftest failure, 1 anything else.
"""

from pathlib import Path
from typing import List, Optional

import typer

import services
from config import DEFAULT_THREADS, RENDER_VIEWS
from errors import EXIT_CONFIG, EXIT_FAILURE, FedSimError
from schemas import RunConfig
from utils import log, set_quiet

app = typer.Typer(add_completion=False, no_args_is_help=True,
                  help="Federated, privacy-preserving CT simulation and evaluation.")

_threads = {"value": None}


@app.callback()
def main(
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Only warnings and errors."),
    threads: Optional[int] = typer.Option(None, "--threads", min=1,
                                         help="Worker threads (default: config threads, else logical cores)."),
):
    set_quiet(quiet)
    _threads["value"] = threads


def _config(path: Optional[Path]) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _workers(cfg: RunConfig) -> int:
    return _threads["value"] or cfg.threads or DEFAULT_THREADS


def _with_config(path: Path, workflow, out, **kwargs):
    cfg = _config(path)
    return workflow(cfg, out, threads=_workers(cfg), **kwargs)


def _run(component: str, fn, *args, **kwargs):
    """Call a workflow and turn library errors into exit codes."""
    try:
        summary = fn(*args, **kwargs)
    except FedSimError as exc:
        log("CLI", f"{type(exc).__name__}: {exc}", "ERROR")
        raise typer.Exit(exc.exit_code)
    except (OSError, ValueError) as exc:
        log("CLI", f"{type(exc).__name__}: {exc}", "ERROR")
        raise typer.Exit(EXIT_FAILURE)
    log(component, ", ".join(f"{k}={v}" for k, v in summary.items()), "SUCCESS")
    return summary


# ====== Data ======

@app.command("gen-data")
def gen_data(
    family: str = typer.Option(..., help="Built-in family name (siteA, siteB, siteC) or a TOML file."),
    n: int = typer.Option(..., min=1, help="Number of samples."),
    res: int = typer.Option(32, "--res", min=4, help="Volume resolution (voxels per side)."),
    seed: int = typer.Option(0),
    out: Path = typer.Option(..., help="Output dataset directory."),
    views: int = typer.Option(RENDER_VIEWS, min=1, help="Projection views per slice."),
    split: Optional[str] = typer.Option(None, help="train,val,test sizes, e.g. 14,2,4."),
    label_size: Optional[int] = typer.Option(None, min=0,
                                             help="Labeled samples in the train split (default: [train] label_size)."),
    noise_photons: Optional[float] = typer.Option(None, min=0, help="Photons per ray (0 = noiseless)."),
    config: Optional[Path] = typer.Option(None, "--config", "-c",
                                          help="Take noise photons, the [ssm] grid and regions and the label size from here."),
):
    """Generate a procedural phantom family with volumes, labels and a manifest."""
    sizes = None
    if split:
        try:
            sizes = tuple(int(v) for v in split.split(","))
        except ValueError:
            sizes = ()
        if len(sizes) != 3:
            log("CLI", f"--split must be three comma-separated integers, got '{split}'", "ERROR")
            raise typer.Exit(EXIT_CONFIG)

    def workflow():
        cfg = _config(config)
        photons = noise_photons
        if photons is None and config is not None:
            photons = cfg.render.noise_photons or None
        return services.gen_data(family, n, res, seed, out, views, sizes,
                                 cfg.train.label_size if label_size is None else label_size,
                                 _threads["value"] or DEFAULT_THREADS, photons,
                                 grid=(cfg.ssm.grid_theta, cfg.ssm.grid_phi),
                                 regions=cfg.ssm.regions if config is not None else None)

    _run("Data", workflow)


@app.command("build-ssm")
def build_ssm(
    shapes: Path = typer.Option(..., help="Dataset directory, manifest, or directory of *.lab.fsct files."),
    modes: Optional[int] = typer.Option(None, min=1, help="Principal modes to keep (default: [ssm] modes)."),
    out: Path = typer.Option(Path("ssm.fsct"), help="Shape model file."),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="Take [ssm] modes and regions from here."),
):
    """Build the statistical shape model from labeled point sets."""
    def workflow():
        cfg = _config(config)
        return services.build_ssm(shapes, modes or cfg.ssm.modes, out,
                                  regions=cfg.ssm.regions if config is not None else None)

    _run("SSM", workflow)


# ====== Training ======

@app.command()
def train(
    config: Path = typer.Option(..., "--config", "-c"),
    out: Optional[Path] = typer.Option(None, help="Run directory (default: paths.out)."),
    resume: Optional[Path] = typer.Option(None, help="Continue from a saved training state."),
):
    """Single-site generator training: pretrain on labeled data, then semi-supervised."""
    _run("Train", lambda: _with_config(config, services.train, out, resume=resume))


@app.command("train-federated")
def train_federated(
    config: Path = typer.Option(..., "--config", "-c"),
    out: Optional[Path] = typer.Option(None, help="Run directory (default: paths.out)."),
    transport: Optional[str] = typer.Option(None, help="inproc or tcp (default: federated.transport)."),
    sites: Optional[List[Path]] = typer.Option(None, "--sites",
                                               help="Site files, replacing [paths] sites: --sites a.toml b.toml c.toml"),
    more_sites: Optional[List[Path]] = typer.Argument(None, metavar="[SITE]...", help="Further site files."),
    rounds: Optional[int] = typer.Option(None, min=0, help="Number of rounds (default: federated.rounds)."),
    listen: Optional[str] = typer.Option(None, help="host:port for the tcp transport (default: federated.listen)."),
):
    """Synchronous federated training over the configured sites."""
    site_files = [*(sites or []), *(more_sites or [])] or None
    _run("Federation", lambda: _with_config(config, services.train_federated, out, transport=transport,
                                            sites=site_files, rounds=rounds, listen=listen))


# ====== Sampling ======

@app.command()
def sample(
    checkpoint: Path = typer.Option(..., help="Trained generator checkpoint (full.fsct)."),
    n: int = typer.Option(..., min=1),
    out: Path = typer.Option(...),
    config: Optional[Path] = typer.Option(None, "--config", "-c"),
    seed: Optional[int] = typer.Option(None, help="Sampling seed (default: config seed)."),
):
    """Draw labeled synthetic volumes from a trained generator."""
    _run("Sample", lambda: services.sample(_config(config), checkpoint, n, out, seed))


@app.command()
def render(
    out: Path = typer.Option(...),
    checkpoint: Optional[Path] = typer.Option(None, help="Render a new subject from this generator."),
    volume: Optional[Path] = typer.Option(None, help="Preview an existing .vol.fsct or .lab.fsct file."),
    enhancer: Optional[Path] = typer.Option(None, help="Also render through another site's enhancer."),
    config: Optional[Path] = typer.Option(None, "--config", "-c"),
    seed: Optional[int] = typer.Option(None),
):
    """Write a rendered volume and per-slice PGM previews."""
    _run("Render", lambda: services.render(_config(config), out, checkpoint, volume, seed, enhancer))


# ====== Evaluation ======

@app.command()
def evaluate(
    config: Path = typer.Option(..., "--config", "-c"),
    out: Path = typer.Option(Path("report.csv")),
):
    """Train and score segmenters for every configured arm and site."""
    _run("Eval", lambda: _with_config(config, services.evaluate, out))


@app.command()
def selftest(
    quick: bool = typer.Option(False, help="Smaller problem sizes."),
    only: Optional[List[str]] = typer.Option(None, help="Run only the named checks."),
):
    """Numerical self-checks: adjoints, oracles, gradients, SSM, federation, determinism."""
    _run("Selftest", services.run_selftest, quick, only or None)


if __name__ == "__main__":
    app()
