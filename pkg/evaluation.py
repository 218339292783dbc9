"""
Task-based evaluation: a small volumetric segmentation network trained on
real and/or synthetic samples, scored with Dice and IoU on each site's
test split.

Arms (all share the test samples and the seeds):
    LowerBound   labeled train subset only
    OursFixMat   synthetic pairs rendered with a fixed attenuation atlas, then finetuned
    OursPre      synthetic pairs from the pre-trained generator, then finetuned
    OursFull     synthetic pairs from the semi-supervised generator, then finetuned
    UpperBound   every train sample with its label
"""

import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import autodiff as ad
import generators
import phantoms
import ssm
from autodiff import Tape, Tensor
from config import EVAL_ARMS, FIXED_ATLAS, SEG_CHANNELS
from errors import ConfigError, MissingArtifactError, ShapeError
from federated.harness import load_site
from generators import GeneratorBundle
from nn import Adam, ParamTensor, conv_fans, glorot_uniform
from phantoms import DatasetView
from schemas import EvalSection, RunConfig
from steps.checkpoint import load_bundle_weights, load_prior
from steps.prior import LatentPrior
from steps.sampling import sample_dataset
from utils import MetricsWriter, log, make_rng, name_key

Pair = Tuple[np.ndarray, np.ndarray]    # (volume, binary mask)

REPORT_FIELDS = ["arm", "site", "n_labels", "n_synthetic", "n_test", "dice_mean", "dice_std",
                 "iou_mean", "iou_std", "seeds", "test_ids"]

# Checkpoint each generator-based arm renders from.
ARM_CHECKPOINT = {"OursFixMat": "full_checkpoint", "OursPre": "pre_checkpoint", "OursFull": "full_checkpoint"}


# =============================================================================
# Metrics
# =============================================================================


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: mask shapes differ {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|P & G| / |P | G|; two empty masks score 1."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"iou: mask shapes differ {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def foreground(labels: np.ndarray) -> np.ndarray:
    """Binary target: every labeled region against background."""
    return (np.asarray(labels) > 0).astype(np.float64)


def nearest_training_neighbor(volume: np.ndarray, train_volumes: Sequence[np.ndarray]) -> Tuple[int, float]:
    """Index of and L2 distance to the closest training volume."""
    if not train_volumes:
        raise ConfigError("No training volumes to compare against")
    volume = np.asarray(volume, dtype=np.float64)
    dists = []
    for i, other in enumerate(train_volumes):
        if np.shape(other) != volume.shape:
            raise ShapeError(f"Training volume {i} has shape {np.shape(other)}, expected {volume.shape}")
        dists.append(float(np.linalg.norm(volume - other)))
    best = int(np.argmin(dists))
    return best, dists[best]


# =============================================================================
# Segmentation Network
# =============================================================================


class SegNet:
    """
    Two-level encoder-decoder on a single-channel volume:
    conv(1->c) relu, pool/2, conv(c->2c) relu, upsample x2,
    concat skip, conv(3c->c) relu, conv(c->1). Outputs logits.
    """

    prefix = "seg"

    def __init__(self, rng: np.random.Generator, channels: int = SEG_CHANNELS):
        c = channels
        self.channels = c
        self.params = ParamTensor()
        for name, (c_out, c_in) in (("enc1", (c, 1)), ("enc2", (2 * c, c)), ("dec1", (c, 3 * c)),
                                    ("out", (1, c))):
            fan_in, fan_out = conv_fans(c_in, c_out, 3)
            self.params.add(f"seg.{name}.w", glorot_uniform(rng, (c_out, c_in, 3, 3, 3), fan_in, fan_out))
            self.params.add(f"seg.{name}.b", np.zeros(c_out))

    def _conv(self, x: Tensor, name: str) -> Tensor:
        return ad.add_channel_bias(ad.conv3d(x, self.params[f"seg.{name}.w"]), self.params[f"seg.{name}.b"])

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3 or any(n % 2 for n in x.shape):
            raise ShapeError(f"SegNet needs a volume with even extents, got {x.shape}")
        h0 = ad.reshape(x, (1,) + x.shape)
        e1 = ad.relu(self._conv(h0, "enc1"))
        e2 = ad.relu(self._conv(ad.avg_pool(e1, 2), "enc2"))
        d1 = ad.relu(self._conv(ad.concat([ad.upsample_nn(e2, 2), e1], axis=0), "dec1"))
        return ad.reshape(self._conv(d1, "out"), x.shape)

    def predict(self, volume: np.ndarray) -> np.ndarray:
        """Foreground probability per voxel."""
        with ad.no_grad():
            return ad.sigmoid(self.forward(Tensor(normalize(volume)))).data


def normalize(volume: np.ndarray) -> np.ndarray:
    volume = np.asarray(volume, dtype=np.float64)
    std = float(volume.std())
    return (volume - volume.mean()) / (std if std > 0 else 1.0)


def segmenter_grads(net: SegNet, volume: np.ndarray, mask: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Binary cross-entropy on one volume and its parameter gradients."""
    net.params.zero_grad()
    with Tape() as tape:
        logits = net.forward(Tensor(normalize(volume)))
        loss = ad.bce_with_logits(logits, Tensor(np.asarray(mask, dtype=np.float64)))
    tape.backward(loss)
    return float(loss.data), net.params.grads()


def _fit(net: SegNet, pairs: Sequence[Pair], epochs: int, lr: float, seed: int, stage: str) -> Optional[float]:
    optimizer = Adam()
    loss = None
    for epoch in range(epochs):
        order = np.arange(len(pairs))
        make_rng(seed, name_key(stage), epoch).shuffle(order)
        losses = []
        for i in order:
            value, grads = segmenter_grads(net, *pairs[i])
            optimizer.step(dict(net.params.items()), lr, grads)
            losses.append(value)
        loss = float(np.mean(losses))
    return loss


def train_segmenter(pairs: Sequence[Pair], epochs: int, lr: float, seed: int,
                    finetune: Sequence[Pair] = (), finetune_epochs: int = 0,
                    channels: int = SEG_CHANNELS) -> SegNet:
    """
    Pretrain on ``pairs``, then finetune on ``finetune`` with a fresh optimizer.
    An empty stage is skipped.
    """
    if not pairs and not finetune:
        raise ConfigError("A segmenter needs at least one training sample")
    net = SegNet(make_rng(seed, name_key("segnet-init")), channels)
    if pairs:
        loss = _fit(net, pairs, epochs, lr, seed, "seg-pretrain")
        if loss is not None:
            log("Segmenter", f"Pretrained on {len(pairs)} sample(s), final bce={loss:.4f}")
    if finetune:
        loss = _fit(net, finetune, finetune_epochs, lr, seed, "seg-finetune")
        if loss is not None:
            log("Segmenter", f"Finetuned on {len(finetune)} sample(s), final bce={loss:.4f}")
    return net


def score(net: SegNet, pairs: Sequence[Pair], threshold: float = 0.5) -> Tuple[float, float]:
    """Mean (dice, iou) over the given test pairs."""
    dices, ious = [], []
    for volume, mask in pairs:
        pred = net.predict(volume) > threshold
        dices.append(dice(pred, mask > 0.5))
        ious.append(iou(pred, mask > 0.5))
    return float(np.mean(dices)), float(np.mean(ious))


# =============================================================================
# Protocol Inputs
# =============================================================================


@dataclass
class SiteData:
    site_id: str
    labeled: List[Pair]
    full: List[Pair]          # every train sample with its label
    test: List[Pair]
    test_ids: List[str]


@dataclass
class SyntheticSource:
    bundle: GeneratorBundle
    prior: LatentPrior
    atlas: Optional[Sequence[float]] = None


def _oracle_sample(view: DatasetView, entry) -> phantoms.Sample:
    if not entry.label_path:
        raise ConfigError(f"Train sample '{entry.sample_id}' has no label file for the upper bound arm")
    return phantoms.load_sample(view.manifest, entry.model_copy(update={"labeled": True}))


def site_data(site_id: str, view: DatasetView) -> SiteData:
    labeled = [(s.volume, foreground(s.labels)) for s in view.labeled()]
    full = []
    for entry in view.entries("train"):
        s = _oracle_sample(view, entry)
        full.append((s.volume, foreground(s.labels)))
    test = view.split_samples("test")
    if not test:
        raise ConfigError(f"Site '{site_id}' has no test samples", key_path="paths.data")
    return SiteData(site_id, labeled, full, [(s.volume, foreground(s.labels)) for s in test],
                    [s.sample_id for s in test])


def synthetic_pairs(source: SyntheticSource, n: int, seed: int) -> List[Pair]:
    """n synthetic pairs; with an atlas the material comes from the labels instead of the network."""
    if source.atlas is None:
        return [(s.volume, foreground(s.labels)) for s in sample_dataset(source.bundle, source.prior, n, seed)]
    bundle, out = source.bundle, []
    for i in range(n):
        z = source.prior.sample(make_rng(seed, name_key("synthetic-fixmat"), i), 1)[0]
        labels = bundle.labels(bundle.shape_params(z))
        material = generators.fixed_material_map(labels, source.atlas, bundle.material_net.extent)
        volume, labels = bundle.render_volume(z, material)
        out.append((volume, foreground(labels)))
    return out


def _site_paths(cfg: RunConfig) -> List[Tuple[str, Path]]:
    if not cfg.paths.sites:
        return [("data", Path(cfg.paths.data))]
    return [(site.site_id, Path(site.data)) for site in (load_site(p) for p in cfg.paths.sites)]


def _manifest_path(path: Path) -> Path:
    return path / phantoms.MANIFEST_NAME if path.is_dir() or not path.suffix else path


def load_protocol_inputs(cfg: RunConfig) -> Tuple[Dict[str, DatasetView], Dict[str, SyntheticSource]]:
    """
    Site datasets and the generator sources of the configured arms. Arms whose
    checkpoint is not configured are dropped; configured but absent files are
    reported together.
    """
    sites = _site_paths(cfg)
    arms = [a for a in cfg.eval.arms if a not in ARM_CHECKPOINT or getattr(cfg.paths, ARM_CHECKPOINT[a])]
    for arm in cfg.eval.arms:
        if arm not in arms:
            log("Evaluate", f"Skipping {arm}: paths.{ARM_CHECKPOINT[arm]} is not set", "WARNING")

    required = [_manifest_path(p) for _, p in sites]
    generator_arms = [a for a in arms if a in ARM_CHECKPOINT]
    if generator_arms:
        required.append(Path(cfg.paths.ssm))
        required += sorted({Path(getattr(cfg.paths, ARM_CHECKPOINT[a])) for a in generator_arms})
    missing = [p for p in required if not p.exists()]
    if missing:
        raise MissingArtifactError(missing)

    views = {site_id: DatasetView(phantoms.load_manifest(path)) for site_id, path in sites}
    sources: Dict[str, SyntheticSource] = {}
    if generator_arms:
        model = ssm.load_ssm(cfg.paths.ssm)
        resolution = next(iter(views.values())).resolution
        for arm in generator_arms:
            path = getattr(cfg.paths, ARM_CHECKPOINT[arm])
            bundle = load_bundle_weights(path, generators.bundle_from_config(model, cfg, resolution))
            atlas = FIXED_ATLAS[:model.n_regions + 1] if arm == "OursFixMat" else None
            sources[arm] = SyntheticSource(bundle, load_prior(path), atlas)
    return views, sources


# =============================================================================
# Protocol
# =============================================================================


@dataclass
class ArmResult:
    arm: str
    site: str
    n_labels: int
    n_synthetic: int
    test_ids: List[str]
    dice: List[float] = field(default_factory=list)
    iou: List[float] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    def row(self) -> Dict[str, object]:
        return {
            "arm": self.arm, "site": self.site, "n_labels": self.n_labels, "n_synthetic": self.n_synthetic,
            "n_test": len(self.test_ids),
            "dice_mean": float(np.mean(self.dice)), "dice_std": float(np.std(self.dice)),
            "iou_mean": float(np.mean(self.iou)), "iou_std": float(np.std(self.iou)),
            "seeds": " ".join(str(s) for s in self.seeds), "test_ids": " ".join(self.test_ids),
        }


def run_arm(arm: str, data: SiteData, source: Optional[SyntheticSource], cfg: EvalSection) -> ArmResult:
    """One arm on one site over every seed; single-threaded training."""
    if arm == "LowerBound":
        n_labels, n_synthetic = len(data.labeled), 0
    elif arm == "UpperBound":
        n_labels, n_synthetic = len(data.full), 0
    else:
        n_labels, n_synthetic = len(data.labeled), cfg.n_synthetic
    result = ArmResult(arm, data.site_id, n_labels, n_synthetic, list(data.test_ids))
    for seed in cfg.seeds:
        if arm == "LowerBound":
            net = train_segmenter(data.labeled, cfg.epochs, cfg.lr, seed, channels=cfg.seg_channels)
        elif arm == "UpperBound":
            net = train_segmenter(data.full, cfg.epochs, cfg.lr, seed, channels=cfg.seg_channels)
        else:
            synthetic = synthetic_pairs(source, cfg.n_synthetic, seed)
            net = train_segmenter(synthetic, cfg.epochs, cfg.lr, seed, data.labeled, cfg.finetune_epochs,
                                  channels=cfg.seg_channels)
        d, j = score(net, data.test, cfg.threshold)
        result.dice.append(d)
        result.iou.append(j)
        result.seeds.append(seed)
        log("Evaluate", f"[{arm}/{data.site_id}] seed {seed}: dice={d:.4f} iou={j:.4f}")
    return result


def run_protocol(views: Dict[str, DatasetView], sources: Dict[str, SyntheticSource], cfg: EvalSection,
                 threads: int = 1) -> List[Dict[str, object]]:
    """Rows ordered by arm, then site id; arms run concurrently."""
    if not cfg.seeds:
        raise ConfigError("Evaluation needs at least one seed", key_path="eval.seeds")
    arms = [a for a in EVAL_ARMS if a in cfg.arms and (a not in ARM_CHECKPOINT or a in sources)]
    data = {site_id: site_data(site_id, view) for site_id, view in sorted(views.items())}
    jobs = [(arm, site_id) for arm in arms for site_id in data]
    log("Evaluate", f"{len(arms)} arm(s) x {len(data)} site(s) x {len(cfg.seeds)} seed(s)")

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(run_arm, arm, data[site_id], sources.get(arm), cfg) for arm, site_id in jobs]
        results = [f.result() for f in futures]

    rows = [r.row() for r in results]
    _report_comparison(rows)
    return rows


def _report_comparison(rows: List[Dict[str, object]]) -> None:
    lower = {r["site"]: r["dice_mean"] for r in rows if r["arm"] == "LowerBound"}
    for r in rows:
        if r["arm"] in ARM_CHECKPOINT and r["site"] in lower:
            better = r["dice_mean"] >= lower[r["site"]]
            log("Evaluate", f"[{r['site']}] {r['arm']} {'>=' if better else '<'} LowerBound "
                            f"({r['dice_mean']:.4f} vs {lower[r['site']]:.4f})", "SUCCESS" if better else "WARNING")


def write_report(rows: Sequence[Dict[str, object]], path) -> Path:
    writer = MetricsWriter(path, REPORT_FIELDS)
    for row in rows:
        writer.write(row)
    return writer.path


def evaluate_protocol(cfg: RunConfig, out_path=None, threads: int = 1) -> List[Dict[str, object]]:
    views, sources = load_protocol_inputs(cfg)
    rows = run_protocol(views, sources, cfg.eval, threads)
    if out_path is not None:
        write_report(rows, out_path)
        log("Evaluate", f"Wrote {len(rows)} row(s) to {out_path}", "SUCCESS")
    return rows

