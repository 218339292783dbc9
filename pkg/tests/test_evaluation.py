"""
Segmentation evaluation: Dice/IoU, the segmenter network and the arm protocol.

Run with:
    PYTHONPATH=. pytest -q tests/test_evaluation.py
"""
import numpy as np
import pytest

import autodiff as ad
import evaluation
import fsct
import phantoms
from autodiff import Tensor
from config import FIXED_ATLAS
from conftest import numerical_grad, rel_err, toy_bundle, toy_samples
from errors import ConfigError, MissingArtifactError, ShapeError
from phantoms import DatasetView
from schemas import DatasetManifest, EvalSection, ManifestEntry, PathsSection, RunConfig
from steps.prior import fit_gaussian
from utils import read_metrics


def _sphere(n=8, radius=2.6):
    c = (n - 1) / 2.0
    z, y, x = np.mgrid[:n, :n, :n]
    return ((z - c) ** 2 + (y - c) ** 2 + (x - c) ** 2 <= radius ** 2).astype(np.float64)


def _site_dir(root, model, seed, n_train=3, n_labeled=1, n_test=2):
    """Toy renders written as a split dataset: train (first n_labeled labeled) then test."""
    root.mkdir(parents=True, exist_ok=True)
    samples = toy_samples(model, n_train + n_test, seed=seed)
    entries = []
    for i, s in enumerate(samples):
        fsct.save(root / f"s{i}.vol.fsct", {"volume": s.volume})
        fsct.save(root / f"s{i}.lab.fsct", {"labels": s.labels.astype(np.float64)})
        split = "train" if i < n_train else "test"
        entries.append(ManifestEntry(sample_id=f"{root.name}-{i:02d}", volume_path=f"s{i}.vol.fsct",
                                     label_path=f"s{i}.lab.fsct", split=split,
                                     labeled=split == "test" or i < n_labeled))
    manifest = DatasetManifest(family="toy", seed=seed, resolution=8, entries=entries, root=str(root))
    phantoms.write_manifest(root / phantoms.MANIFEST_NAME, manifest)
    return root


def _eval_cfg(**overrides):
    return EvalSection(**{"epochs": 2, "finetune_epochs": 1, "lr": 1e-2, "n_synthetic": 2, "seeds": [0, 1],
                          "seg_channels": 4, **overrides})


# ====== metrics ======

def test_dice_and_iou_closed_forms():
    gt = np.ones((4, 4, 4), dtype=bool)
    left = np.zeros_like(gt)
    left[:, :, :2] = True
    assert evaluation.dice(gt, gt) == 1.0 and evaluation.iou(gt, gt) == 1.0
    assert evaluation.dice(left, ~left) == 0.0 and evaluation.iou(left, ~left) == 0.0
    assert evaluation.dice(left, gt) == pytest.approx(2.0 / 3.0)
    assert evaluation.iou(left, gt) == pytest.approx(0.5)
    empty = np.zeros_like(gt)
    assert evaluation.dice(empty, empty) == 1.0 and evaluation.iou(empty, empty) == 1.0
    with pytest.raises(ShapeError):
        evaluation.dice(gt, gt[:2])


def test_dice_symmetric_and_monotone(rng):
    gt = rng.random((6, 6, 6)) > 0.5
    pred = rng.random((6, 6, 6)) > 0.5
    assert evaluation.dice(pred, gt) == evaluation.dice(gt, pred)
    more = pred | (gt & (rng.random(gt.shape) > 0.5))
    assert evaluation.dice(more, gt) >= evaluation.dice(pred, gt)


def test_nearest_training_neighbor(rng):
    train = [rng.normal(size=(4, 4, 4)) for _ in range(3)]
    index, dist = evaluation.nearest_training_neighbor(train[1] + 1e-3, train)
    assert index == 1 and dist == pytest.approx(1e-3 * 8.0)
    with pytest.raises(ConfigError):
        evaluation.nearest_training_neighbor(train[0], [])
    with pytest.raises(ShapeError):
        evaluation.nearest_training_neighbor(train[0], [np.zeros((2, 2, 2))])


# ====== segmenter ======

def test_segnet_shapes(rng):
    net = evaluation.SegNet(rng, channels=4)
    prob = net.predict(rng.normal(size=(8, 8, 8)))
    assert prob.shape == (8, 8, 8) and np.all((prob > 0) & (prob < 1))
    with pytest.raises(ShapeError):
        net.predict(rng.normal(size=(7, 8, 8)))


def test_segnet_gradients_match_finite_differences(rng):
    net = evaluation.SegNet(rng, channels=3)
    volume, mask = rng.normal(size=(4, 4, 4)), (rng.random((4, 4, 4)) > 0.5).astype(np.float64)
    _, grads = evaluation.segmenter_grads(net, volume, mask)
    for name, param in net.params.items():
        keep = param.data.copy()

        def loss(x):
            param.data = x
            with ad.no_grad():
                logits = net.forward(Tensor(evaluation.normalize(volume)))
                return float(ad.bce_with_logits(logits, Tensor(mask)).data)

        idx = rng.choice(keep.size, size=min(6, keep.size), replace=False)
        fd = numerical_grad(loss, keep, indices=idx)
        param.data = keep
        assert rel_err(grads[name].reshape(-1)[idx], fd.reshape(-1)[idx]) < 1e-4, name


def test_segmenter_overfits_one_sample(rng):
    mask = _sphere()
    volume = mask + 0.05 * rng.normal(size=mask.shape)
    net = evaluation.train_segmenter([(volume, mask)], epochs=300, lr=1e-2, seed=0)
    assert evaluation.dice(net.predict(volume) > 0.5, mask > 0.5) > 0.95


def test_segmenter_is_reproducible_and_skips_empty_stage(rng):
    mask = _sphere()
    pairs = [(mask + 0.1 * rng.normal(size=mask.shape), mask)]
    a = evaluation.train_segmenter(pairs, 3, 1e-2, seed=5, channels=4)
    b = evaluation.train_segmenter(pairs, 3, 1e-2, seed=5, channels=4, finetune=(), finetune_epochs=4)
    assert np.array_equal(a.predict(pairs[0][0]), b.predict(pairs[0][0]))
    c = evaluation.train_segmenter([], 3, 1e-2, seed=5, channels=4, finetune=pairs, finetune_epochs=3)
    assert np.array_equal(a.predict(pairs[0][0]), c.predict(pairs[0][0]))
    with pytest.raises(ConfigError):
        evaluation.train_segmenter([], 3, 1e-2, seed=5)


# ====== protocol ======

def _sources(model, rng):
    prior = fit_gaussian(rng.normal(size=(6, 32)))
    bundle = toy_bundle(model)
    return {
        "OursFixMat": evaluation.SyntheticSource(bundle, prior, FIXED_ATLAS[:3]),
        "OursPre": evaluation.SyntheticSource(bundle, prior),
        "OursFull": evaluation.SyntheticSource(bundle, prior),
    }


def test_protocol_rows_and_shared_test_sets(tmp_path, small_model, rng):
    views = {name: DatasetView(phantoms.load_manifest(_site_dir(tmp_path / name, small_model, seed)))
             for name, seed in (("siteB", 21), ("siteA", 22))}
    rows = evaluation.run_protocol(views, _sources(small_model, rng), _eval_cfg(), threads=3)

    assert [(r["arm"], r["site"]) for r in rows] == [
        (arm, site) for arm in ("LowerBound", "OursFixMat", "OursPre", "OursFull", "UpperBound")
        for site in ("siteA", "siteB")]
    for site in ("siteA", "siteB"):
        mine = [r for r in rows if r["site"] == site]
        assert len({r["test_ids"] for r in mine}) == 1 and mine[0]["n_test"] == 2
        by_arm = {r["arm"]: r for r in mine}
        assert by_arm["LowerBound"]["n_labels"] == 1 < by_arm["UpperBound"]["n_labels"] == 3
        assert by_arm["OursFull"]["n_synthetic"] == 2 and by_arm["LowerBound"]["n_synthetic"] == 0
    assert all(0.0 <= r["dice_mean"] <= 1.0 and r["seeds"] == "0 1" for r in rows)


def test_protocol_is_deterministic(tmp_path, small_model, rng):
    views = {"siteA": DatasetView(phantoms.load_manifest(_site_dir(tmp_path / "siteA", small_model, 31)))}
    cfg = _eval_cfg(arms=["LowerBound", "OursPre"], seeds=[3])
    sources = _sources(small_model, rng)
    first = evaluation.run_protocol(views, sources, cfg)
    second = evaluation.run_protocol(views, sources, cfg, threads=2)
    assert first == second


def test_synthetic_pairs_with_fixed_atlas(small_model, rng):
    source = _sources(small_model, rng)["OursFixMat"]
    (volume, mask), = evaluation.synthetic_pairs(source, 1, seed=4)
    again, = evaluation.synthetic_pairs(source, 1, seed=4)
    assert volume.shape == mask.shape == (8, 8, 8) and set(np.unique(mask)) <= {0.0, 1.0}
    assert np.array_equal(volume, again[0])


def test_evaluate_protocol_writes_report(tmp_path, small_model):
    data = _site_dir(tmp_path / "data", small_model, 41)
    cfg = RunConfig(paths=PathsSection(data=str(data)), eval=_eval_cfg(seeds=[0]))
    rows = evaluation.evaluate_protocol(cfg, tmp_path / "report.csv")
    assert [r["arm"] for r in rows] == ["LowerBound", "UpperBound"]
    written = read_metrics(tmp_path / "report.csv")
    assert [r["arm"] for r in written] == ["LowerBound", "UpperBound"]
    assert list(written[0]) == evaluation.REPORT_FIELDS


def test_evaluate_protocol_lists_missing_artifacts(tmp_path):
    cfg = RunConfig(paths=PathsSection(data=str(tmp_path / "nodata"), ssm=str(tmp_path / "ssm.fsct"),
                                       full_checkpoint=str(tmp_path / "full.fsct")))
    with pytest.raises(MissingArtifactError) as info:
        evaluation.evaluate_protocol(cfg)
    missing = " ".join(info.value.paths)
    assert "nodata" in missing and "ssm.fsct" in missing and "full.fsct" in missing
