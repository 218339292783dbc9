"""
Procedural phantom families, dataset files, manifests and splits.

Run with:
    PYTHONPATH=. pytest -q tests/test_phantoms.py
"""
import numpy as np
import pytest

import phantoms
import ssm
from config import DEFAULT_FAMILIES
from errors import ConfigError, FormatError
from schemas import DatasetManifest, ManifestEntry, PhantomFamily

GRID = (4, 8)


def _family(name="siteA", **overrides):
    raw = dict(DEFAULT_FAMILIES[name])
    raw.update(overrides)
    return PhantomFamily.model_validate(raw)


def _fake_manifest(n):
    entries = [ManifestEntry(sample_id=f"s{i:02d}", volume_path=f"s{i:02d}.vol.fsct",
                             label_path=f"s{i:02d}.lab.fsct") for i in range(n)]
    return DatasetManifest(family="siteA", seed=0, resolution=16, entries=entries)


# ====== families and draws ======

def test_builtin_and_unknown_families():
    assert phantoms.load_family("siteB").name == "siteB"
    with pytest.raises(ConfigError):
        phantoms.load_family("no-such-site")


def test_zero_variation_reproduces_base_geometry():
    family = _family(axis_sigma=0.0, center_sigma=0.0, bump_sigma=0.0)
    points = phantoms.draw_shape(family, np.random.default_rng(3), 32, GRID)
    expected = np.concatenate([ssm.ellipsoid_points(np.asarray(a) * 16.0, (0, 0, 0), GRID)
                               for a in family.semi_axes]).reshape(-1)
    assert np.array_equal(points, expected)


def test_every_region_gets_voxels():
    family = _family()
    sample = phantoms.generate_sample(family, 0, 16, seed=5, grid=GRID)
    counts = np.bincount(sample.labels.reshape(-1), minlength=8)
    assert np.all(counts[1:] > 0)
    assert sample.volume.shape == (16, 16, 16) and np.all(np.isfinite(sample.volume))
    assert sample.mu[sample.labels == 0].max() <= family.background_mu


def test_site_offset_shifts_attenuation():
    labels = np.ones((4, 4, 4), dtype=np.int64)
    base = phantoms.attenuation_map(_family(mu_sigma=0.0), labels, np.random.default_rng(0))
    shifted = phantoms.attenuation_map(_family(mu_sigma=0.0, mu_offset=0.003), labels, np.random.default_rng(0))
    assert np.allclose(shifted - base, 0.003)


def test_region_fractions_follow_the_family():
    family = _family("siteB")
    regions = ssm.region_labels(family.n_regions, GRID)
    base = _family("siteB", axis_sigma=0.0, center_sigma=0.0, bump_sigma=0.0)
    base_points = phantoms.draw_shape(base, np.random.default_rng(0), 16, GRID)
    base_fraction = phantoms.region_fractions(ssm.voxelize(base_points, regions, (16,) * 3, 1.0, GRID), 7).sum()
    rng = np.random.default_rng(11)
    fractions = []
    for _ in range(40):
        points = phantoms.draw_shape(family, rng, 16, GRID)
        fractions.append(phantoms.region_fractions(ssm.voxelize(points, regions, (16,) * 3, 1.0, GRID), 7).sum())
    fractions = np.array(fractions)
    stderr = fractions.std(ddof=1) / np.sqrt(len(fractions))
    assert abs(fractions.mean() - base_fraction) <= 3.0 * stderr + 0.01 * base_fraction


# ====== files ======

def test_generation_is_bitwise_reproducible(tmp_path):
    family = _family()
    a = phantoms.generate_family(family, 2, 16, seed=7, out_dir=tmp_path / "a", views=8, grid=GRID)
    phantoms.generate_family(family, 2, 16, seed=7, out_dir=tmp_path / "b", views=8, grid=GRID)
    for e in a.entries:
        for name in (e.volume_path, e.label_path):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_round_trip(tmp_path):
    family = _family()
    manifest = phantoms.generate_family(family, 3, 16, seed=1, out_dir=tmp_path, views=8, grid=GRID, threads=2)
    manifest = phantoms.split(manifest, (1, 1, 1), 1, seed=0)
    phantoms.write_manifest(tmp_path / phantoms.MANIFEST_NAME, manifest)
    loaded = phantoms.load_manifest(tmp_path)
    assert loaded.entries == manifest.entries
    assert (loaded.family, loaded.seed, loaded.resolution) == ("siteA", 1, 16)

    view = phantoms.DatasetView(loaded)
    assert len(view.labeled()) == 1 and view.unlabeled() == []
    test_sample = view.split_samples("test")[0]
    assert test_sample.labels.dtype == np.int64 and test_sample.labels.max() == 7

    shapes, grid = phantoms.load_shapes(loaded, loaded.entries)
    assert grid == GRID and shapes.shape == (3, 7 * 32 * 3)
    dir_shapes, _ = phantoms.load_shape_dir(tmp_path)
    assert np.array_equal(dir_shapes, shapes)


def test_unlabeled_sample_hides_labels(tmp_path):
    manifest = phantoms.generate_family(_family(), 2, 16, seed=3, out_dir=tmp_path, views=8, grid=GRID)
    manifest = phantoms.split(manifest, (2, 0, 0), 1, seed=0)
    view = phantoms.DatasetView(manifest)
    assert len(view.labeled()) == 1
    (unlabeled,) = view.unlabeled()
    assert unlabeled.labels is None and not unlabeled.labeled


def test_malformed_manifest(tmp_path):
    path = tmp_path / phantoms.MANIFEST_NAME
    path.write_text("sample_id\tvolume_path\n", encoding="utf-8")
    with pytest.raises(FormatError):
        phantoms.load_manifest(path)
    path.write_text("# fsct-manifest family=x seed=1 resolution=8\n"
                    "sample_id\tvolume_path\tlabel_path\tsplit\tlabeled\n"
                    "a\ta.vol\t-\ttest\t1\n", encoding="utf-8")
    with pytest.raises(FormatError):
        phantoms.load_manifest(path)


# ====== splits ======

def test_split_sizes_and_label_subset():
    manifest = phantoms.split(_fake_manifest(20), (12, 4, 4), 4, seed=9)
    by = {s: {e.sample_id for e in manifest.by_split(s)} for s in ("train", "val", "test")}
    assert [len(by[s]) for s in ("train", "val", "test")] == [12, 4, 4]
    assert not (by["train"] & by["val"]) and not (by["train"] & by["test"]) and not (by["val"] & by["test"])
    assert sum(e.labeled for e in manifest.by_split("train")) == 4
    assert all(e.labeled for e in manifest.by_split("val") + manifest.by_split("test"))
    again = phantoms.split(_fake_manifest(20), (12, 4, 4), 4, seed=9)
    assert again.entries == manifest.entries


def test_fully_supervised_and_infeasible_splits():
    full = phantoms.split(_fake_manifest(8), (6, 1, 1), 6, seed=0)
    assert all(e.labeled for e in full.by_split("train"))
    with pytest.raises(ConfigError):
        phantoms.split(_fake_manifest(8), (6, 2, 2), 2, seed=0)
    with pytest.raises(ConfigError):
        phantoms.split(_fake_manifest(8), (4, 2, 2), 5, seed=0)
