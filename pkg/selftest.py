"""
Acceptance-size self checks: projector adjointness and the explicit-matrix
oracle, FBP fidelity, finite-difference gradient checks, the shape model,
federated/centralized equivalence and run determinism.

Every check returns (passed, detail); run_selftest raises SelftestFailure
when any check fails.
"""

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

import autodiff as ad
import ct
import evaluation
import generators
import losses
import ssm
from autodiff import Tape, Tensor
from errors import SelftestFailure
from federated import harness
from federated.client import Client
from graph import run_training
from phantoms import Sample
from schemas import FederatedSection, TrainSection
from state import new_train_state
from utils import log, make_rng, name_key

ADJOINT_TOL = 1e-8
ORACLE_TOL = 1e-10
FBP_TOL = 0.05
GRAD_TOL = 1e-4
SSM_TOL = 1e-8
EQUIVALENCE_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# =============================================================================
# Toy Fixtures
# =============================================================================


def toy_model(seed: int = 7, n_shapes: int = 8, grid: Tuple[int, int] = (4, 8)) -> ssm.ShapeModel:
    """Two nested ellipsoid regions with a little per-shape jitter."""
    rng = np.random.default_rng(seed)
    shapes = []
    for _ in range(n_shapes):
        parts = [ssm.ellipsoid_points(np.array([3.0, 2.6, 2.8]) * f * (1 + 0.08 * rng.normal(size=3)),
                                      0.2 * rng.normal(size=3), grid)
                 for f in (1.0, 0.55)]
        shapes.append(np.concatenate(parts).reshape(-1))
    return ssm.build_ssm(np.array(shapes), ssm.region_labels(2, grid), grid, k=3)


def toy_bundle(model: ssm.ShapeModel, seed: int = 0) -> generators.GeneratorBundle:
    return generators.build_bundle(model, ct.cone_geometry(8, 8), material_extent=4, seed=seed,
                                   shape_hidden=(16, 8), material_channels=(6, 4), enhancer_channels=4)


def toy_samples(model: ssm.ShapeModel, n: int, seed: int = 99, labeled: Optional[Sequence[bool]] = None) -> List[Sample]:
    reference = toy_bundle(model, seed=seed)
    rng = np.random.default_rng(seed)
    labeled = [True] * n if labeled is None else labeled
    out = []
    for i in range(n):
        volume, labels = reference.render_volume(rng.normal(size=32))
        out.append(Sample(f"toy-{i:02d}", volume, labels if labeled[i] else None, bool(labeled[i])))
    return out


# =============================================================================
# Projector
# =============================================================================


def check_adjoint(quick: bool = False) -> Tuple[bool, str]:
    rng = make_rng(0, name_key("selftest-adjoint"))
    geoms = ([ct.parallel_geometry(32, 30), ct.cone_geometry(8, 8)] if quick
             else [ct.parallel_geometry(128, 180), ct.cone_geometry(32, 32)])
    worst = 0.0
    for geom in geoms:
        for _ in range(10):
            x = rng.normal(size=geom.volume_shape)
            y = rng.normal(size=geom.sinogram_shape)
            ax = ct.forward_project(x, geom)
            gap = abs(np.vdot(ax, y) - np.vdot(x, ct.back_project(y, geom)))
            worst = max(worst, gap / (np.linalg.norm(ax) * np.linalg.norm(y)))
    return worst < ADJOINT_TOL, f"max normalized adjoint gap {worst:.2e}"


def check_matrix_oracle(quick: bool = False) -> Tuple[bool, str]:
    geom = ct.parallel_geometry(16, 8)
    n = int(np.prod(geom.volume_shape))
    dense = np.empty((int(np.prod(geom.sinogram_shape)), n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        dense[:, j] = ct.forward_project(e.reshape(geom.volume_shape), geom).reshape(-1)
    rng = make_rng(0, name_key("selftest-oracle"))
    x, y = rng.normal(size=geom.volume_shape), rng.normal(size=geom.sinogram_shape)
    fwd = np.max(np.abs(ct.forward_project(x, geom).reshape(-1) - dense @ x.reshape(-1)))
    adj = np.max(np.abs(ct.back_project(y, geom).reshape(-1) - dense.T @ y.reshape(-1)))
    return max(fwd, adj) <= ORACLE_TOL, f"forward {fwd:.1e}, back {adj:.1e}"


def check_fbp(quick: bool = False) -> Tuple[bool, str]:
    geom = ct.parallel_geometry(128, 180)
    phantom = gaussian_filter(ct.shepp_logan(128)[0], sigma=2.0)[None]
    recon = ct.reconstruct(phantom, geom)
    c = (128 - 1) / 2.0
    yy, xx = np.mgrid[:128, :128]
    mask = (yy - c) ** 2 + (xx - c) ** 2 <= (0.45 * 128) ** 2
    err = np.linalg.norm((recon - phantom)[0][mask]) / np.linalg.norm(phantom[0][mask])
    return err <= FBP_TOL, f"Shepp-Logan relative RMSE {err:.4f}"


# =============================================================================
# Gradients
# =============================================================================


def grad_check(build: Callable[[], Tensor], leaves: Dict[str, Tensor], rng: np.random.Generator,
               per_leaf: int = 5, h: float = 1e-5) -> float:
    """Worst relative error between taped and central-difference gradients of a scalar."""
    for t in leaves.values():
        t.grad = None
    with Tape() as tape:
        out = build()
    tape.backward(out)
    worst = 0.0
    for name, leaf in leaves.items():
        analytic = leaf.grad.reshape(-1) if leaf.grad is not None else np.zeros(leaf.size)
        flat = leaf.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(per_leaf, flat.size), replace=False)
        fd = np.empty(idx.size)
        for n, i in enumerate(idx):
            keep = flat[i]
            with ad.no_grad():
                flat[i] = keep + h
                up = float(build().data)
                flat[i] = keep - h
                down = float(build().data)
            flat[i] = keep
            fd[n] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(analytic[idx]), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - analytic[idx]) / scale))
    return worst


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def check_gradients(quick: bool = False) -> Tuple[bool, str]:
    rng = make_rng(0, name_key("selftest-grad"))
    errors: Dict[str, float] = {}

    x3, w3 = _leaf(rng, 2, 4, 4, 4), _leaf(rng, 3, 2, 3, 3, 3)
    weight = rng.normal(size=(3, 2, 2, 2))
    errors["conv3d+pool"] = grad_check(
        lambda: ad.total(ad.mul(ad.avg_pool(ad.conv3d(x3, w3)), Tensor(weight))), {"x": x3, "w": w3}, rng)

    xb, gamma, beta = _leaf(rng, 3, 5), _leaf(rng, 3), _leaf(rng, 3)
    wb = rng.normal(size=(3, 5))
    errors["batchnorm"] = grad_check(
        lambda: ad.total(ad.mul(ad.leaky_relu(ad.batchnorm(xb, gamma, beta)), Tensor(wb))),
        {"x": xb, "gamma": gamma, "beta": beta}, rng)

    logits, target = _leaf(rng, 4, 4), Tensor((rng.random((4, 4)) > 0.5).astype(np.float64))
    errors["bce"] = grad_check(lambda: ad.bce_with_logits(logits, target), {"logits": logits}, rng)

    soft = Tensor(rng.uniform(0.1, 0.9, size=(4, 4, 4)), requires_grad=True)
    gt = (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
    errors["loss_iou"] = grad_check(lambda: losses.loss_iou(soft, gt), {"pred": soft}, rng)

    gen, real = _leaf(rng, 4, 4, 4), rng.normal(size=(4, 4, 4))
    errors["loss_material"] = grad_check(lambda: losses.loss_material(gen, real), {"gen": gen}, rng)

    model = toy_model()
    bundle = toy_bundle(model)
    z = rng.normal(size=32)
    wm = rng.normal(size=(4, 4, 4))
    errors["MaterialNet"] = grad_check(
        lambda: ad.total(ad.mul(bundle.material_net.forward(Tensor(z)), Tensor(wm))),
        dict(bundle.material_net.params.items()), rng, per_leaf=3)
    ws = rng.normal(size=bundle.shape_net.out_dim)
    errors["ShapeNet"] = grad_check(
        lambda: ad.total(ad.mul(bundle.shape_net.forward(Tensor(z)), Tensor(ws))),
        dict(bundle.shape_net.params.items()), rng, per_leaf=3)
    enh_in, we = rng.normal(size=(3, 8, 8)), rng.normal(size=(8, 8))
    errors["Enhancer"] = grad_check(
        lambda: ad.total(ad.mul(bundle.enhancer.forward(Tensor(enh_in)), Tensor(we))),
        dict(bundle.enhancer.params.items()), rng, per_leaf=3)

    seg = evaluation.SegNet(rng, channels=3)
    volume, mask = rng.normal(size=(8, 8, 8)), (rng.random((8, 8, 8)) > 0.5).astype(np.float64)
    errors["SegNet"] = grad_check(
        lambda: ad.bce_with_logits(seg.forward(Tensor(evaluation.normalize(volume))), Tensor(mask)),
        dict(seg.params.items()), rng, per_leaf=3)

    worst = max(errors, key=errors.get)
    return errors[worst] < GRAD_TOL, f"worst {worst} rel err {errors[worst]:.2e} over {len(errors)} checks"


# =============================================================================
# Shape Model
# =============================================================================


def check_ssm(quick: bool = False) -> Tuple[bool, str]:
    rng = make_rng(0, name_key("selftest-ssm"))
    grid = (4, 8)
    regions = ssm.region_labels(2, grid)
    base = np.concatenate([ssm.sphere_points(5.0, np.zeros(3), grid),
                           ssm.sphere_points(2.5, np.zeros(3), grid)]).reshape(-1)
    shapes = base + 0.3 * rng.normal(size=(20, base.size))

    model = ssm.build_ssm(shapes, regions, grid, k=14)
    centered = shapes - shapes.mean(axis=0)
    dense = np.linalg.eigvalsh(centered.T @ centered / (len(shapes) - 1))[::-1][:14]
    eig_err = float(np.max(np.abs(model.eigvals - dense) / dense))

    mean_exact = np.array_equal(ssm.synthesize(model, ssm.ShapeParams.zeros(model.n_modes)), model.mean)

    over, limit = np.zeros(model.n_modes), np.zeros(model.n_modes)
    over[0] = 2.0 * math.sqrt(model.eigvals[0])
    limit[0] = model.mode_limits()[0]
    clamped = np.array_equal(ssm.synthesize(model, ssm.ShapeParams(over, np.zeros(3), np.zeros(3))),
                             ssm.synthesize(model, ssm.ShapeParams(limit, np.zeros(3), np.zeros(3))))

    full = ssm.build_ssm(shapes, regions, grid, k=19)
    discarded = (len(shapes) - 1) * full.eigvals[14:].sum()
    recon = float(ssm.reconstruction_error(model, shapes).sum())
    energy_ok = recon <= discarded * (1 + SSM_TOL)

    passed = eig_err < SSM_TOL and mean_exact and clamped and energy_ok
    return passed, (f"eig rel err {eig_err:.1e}, mean exact={mean_exact}, clamp={clamped}, "
                    f"recon {recon:.4g} <= discarded {discarded:.4g}")


# =============================================================================
# Federated Equivalence
# =============================================================================


def _clients(model: ssm.ShapeModel, n_sites: int = 3) -> List[Client]:
    return [Client(f"site{chr(ord('A') + j)}", toy_bundle(model), toy_samples(model, 2, seed=10 + j),
                   TrainSection(), seed=j) for j in range(n_sites)]


def check_federated(quick: bool = False) -> Tuple[bool, str]:
    model = toy_model()
    rounds = 3 if quick else 50
    fed = FederatedSection(lr=1e-3, listen="127.0.0.1:0", timeout=60.0)

    federated = harness.run_federation(_clients(model), rounds, fed, threads=3)
    central = harness.run_centralized(_clients(model), rounds, fed)
    rel = max(float(np.linalg.norm(federated.params[k] - central.params[k]) /
                    max(np.linalg.norm(central.params[k]), 1e-300)) for k in central.params)

    inproc = harness.run_federation(_clients(model, 2), 2, fed, transport="inproc")
    tcp = harness.run_federation(_clients(model, 2), 2, fed, transport="tcp")
    bitwise = all(np.array_equal(inproc.params[k], tcp.params[k]) for k in inproc.params)

    names = harness.scan_wire(federated.wire) + harness.scan_wire(tcp.wire)
    private = [n for n in names if "enh." in n]

    passed = rel < EQUIVALENCE_TOL and bitwise and not private
    return passed, (f"{rounds} rounds rel diff {rel:.1e}, inproc==tcp {bitwise}, "
                    f"{len(names)} arrays on the wire, {len(private)} private")


# =============================================================================
# Determinism
# =============================================================================


def _short_run(model: ssm.ShapeModel) -> Dict[str, np.ndarray]:
    samples = toy_samples(model, 4, seed=5, labeled=[True, True, True, False])
    state = new_train_state(toy_bundle(model), [s.sample_id for s in samples], [s.labeled for s in samples],
                            seed=3)
    cfg = TrainSection(epochs_pretrain=2, epochs_enhancer=1, epochs_constant=1, epochs_decay=1)
    state = run_training(state, samples, cfg)
    return {**state["bundle"].state_dict(), **state["latents"].state_dict()}


def check_determinism(quick: bool = False) -> Tuple[bool, str]:
    model = toy_model()
    first, second = _short_run(model), _short_run(model)
    same = first.keys() == second.keys() and all(np.array_equal(first[k], second[k]) for k in first)
    return same, f"{len(first)} arrays bitwise equal across two runs" if same else "runs differ"


# =============================================================================
# Runner
# =============================================================================

CHECKS: Dict[str, Callable[[bool], Tuple[bool, str]]] = {
    "adjoint": check_adjoint,
    "matrix_oracle": check_matrix_oracle,
    "fbp": check_fbp,
    "gradients": check_gradients,
    "ssm": check_ssm,
    "federated": check_federated,
    "determinism": check_determinism,
}


def run_selftest(quick: bool = False, only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    names = list(only) if only else list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise SelftestFailure(f"Unknown selftest check(s): {', '.join(unknown)}")
    results = []
    for name in names:
        start = time.perf_counter()
        try:
            passed, detail = CHECKS[name](quick)
        except Exception as exc:  # a crashing check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        result = CheckResult(name, bool(passed), detail, time.perf_counter() - start)
        log("Selftest", f"{name}: {detail} ({result.seconds:.1f}s)", "SUCCESS" if passed else "ERROR")
        results.append(result)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise SelftestFailure(f"Failed checks: {', '.join(failed)}")
    log("Selftest", f"All {len(results)} checks passed", "SUCCESS")
    return results
