"""
CLI workflows end to end on tiny problems, plus exit-code mapping.

Run with:
    PYTHONPATH=. pytest -q tests/test_cli.py
"""
import json

import numpy as np
import pytest
import toml
from typer.testing import CliRunner

import fsct
import phantoms
import ssm
from main import app

runner = CliRunner()


def _invoke(*args):
    return runner.invoke(app, ["--quiet", "--threads", "2", *[str(a) for a in args]])


def _config(tmp_path, data, ssm_path, out, name="train.toml", **train):
    path = tmp_path / name
    path.write_text(toml.dumps({
        "seed": 3,
        "render": {"resolution": 16, "views": 8, "material": 4},
        "train": {"epochs_pretrain": 1, "epochs_enhancer": 1, "epochs_constant": 1, "epochs_decay": 0, **train},
        "networks": {"shape_hidden": [16, 16], "material_channels": [4, 4], "enhancer_channels": 4},
        "paths": {"data": str(data), "ssm": str(ssm_path), "out": str(out)},
    }), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> build-ssm -> train on a 16^3 dataset; shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    data, ssm_path, run = root / "data", root / "ssm.fsct", root / "run"
    result = _invoke("gen-data", "--family", "siteA", "--n", 6, "--res", 16, "--seed", 7, "--out", data,
                     "--views", 8, "--split", "4,0,2", "--label-size", 3)
    assert result.exit_code == 0, result.output
    result = _invoke("build-ssm", "--shapes", data, "--modes", 14, "--out", ssm_path)
    assert result.exit_code == 0, result.output
    cfg = _config(root, data, ssm_path, run)
    result = _invoke("train", "--config", cfg)
    assert result.exit_code == 0, result.output
    return root, data, ssm_path, run, cfg


def test_gen_data_writes_split_dataset(pipeline):
    _, data, _, _, _ = pipeline
    manifest = phantoms.load_manifest(data)
    assert len(manifest.entries) == 6 and manifest.resolution == 16
    assert [e.split for e in manifest.entries].count("test") == 2
    assert sum(e.labeled for e in manifest.by_split("train")) == 3
    info = json.loads((data / "run-info.json").read_text(encoding="utf-8"))
    assert info["command"] == "gen-data" and info["seed"] == 7
    assert not (data.parent / "data.partial").exists()


def test_train_writes_checkpoints_and_metrics(pipeline):
    _, _, _, run, _ = pipeline
    for name in ("pre.fsct", "full.fsct", "metrics.csv", "run-info.json"):
        assert (run / name).exists(), name


def test_train_seed_sets_the_latent_stream(pipeline):
    root, data, ssm_path, _, _ = pipeline
    latents = []
    for name, seed in (("seed1", 1), ("seed1-again", 1), ("seed2", 2)):
        cfg = _config(root, data, ssm_path, root / name, f"{name}.toml", seed=seed, epochs_pretrain=0,
                      epochs_enhancer=0, epochs_constant=0)
        result = _invoke("train", "--config", cfg)
        assert result.exit_code == 0, result.output
        latents.append(fsct.load(root / name / "full.fsct")["latents"])
    assert np.array_equal(latents[0], latents[1])
    assert not np.array_equal(latents[0], latents[2])


def test_sample_writes_requested_pairs(pipeline):
    root, _, _, run, cfg = pipeline
    result = _invoke("sample", "--config", cfg, "--checkpoint", run / "full.fsct", "--n", 3, "--out", root / "synth")
    assert result.exit_code == 0, result.output
    assert len(list((root / "synth").glob("*.vol.fsct"))) == 3
    assert len(list((root / "synth").glob("*.lab.fsct"))) == 3
    assert len(phantoms.load_manifest(root / "synth").entries) == 3


def test_render_previews(pipeline):
    root, data, _, run, cfg = pipeline
    volume = sorted(data.glob("*.vol.fsct"))[0]
    result = _invoke("render", "--volume", volume, "--out", root / "preview")
    assert result.exit_code == 0, result.output
    assert len(list((root / "preview").glob("slice-*.pgm"))) == 16
    result = _invoke("render", "--config", cfg, "--checkpoint", run / "full.fsct", "--out", root / "fresh")
    assert result.exit_code == 0, result.output
    assert (root / "fresh" / "render.fsct").exists()


def test_train_federated_flags_override_config(pipeline):
    root, data, _, _, cfg = pipeline
    for seed, site in enumerate(("siteA", "siteB")):
        (root / f"{site}.toml").write_text(toml.dumps({"site_id": site, "data": str(data), "seed": seed}),
                                          encoding="utf-8")
    out = root / "fed"
    result = _invoke("train-federated", "--config", cfg, "--sites", root / "siteA.toml", root / "siteB.toml",
                     "--rounds", 2, "--listen", "127.0.0.1:0", "--transport", "tcp", "--out", out)
    assert result.exit_code == 0, result.output
    assert (out / "global.fsct").exists()
    assert sorted(p.name for p in out.glob("enhancer-*.fsct")) == ["enhancer-siteA.fsct", "enhancer-siteB.fsct"]
    info = json.loads((out / "run-info.json").read_text(encoding="utf-8"))
    used = toml.loads(info["config"])
    assert info["rounds"] == 2 and info["wire_bytes"] > 0
    assert used["federated"]["rounds"] == 2 and used["federated"]["listen"] == "127.0.0.1:0"
    assert used["paths"]["sites"] == [str(root / "siteA.toml"), str(root / "siteB.toml")]


def test_train_federated_bad_listen_exits_two(pipeline):
    root, _, _, _, cfg = pipeline
    result = _invoke("train-federated", "--config", cfg, "--sites", root / "siteA.toml", "--listen", "nowhere",
                     "--out", root / "fed-bad")
    assert result.exit_code == 2
    assert not (root / "fed-bad").exists()


def test_build_ssm_reads_ssm_section(pipeline):
    root, data, _, _, _ = pipeline
    cfg = root / "ssm.toml"
    cfg.write_text(toml.dumps({"ssm": {"modes": 1}}), encoding="utf-8")
    result = _invoke("build-ssm", "--config", cfg, "--shapes", data, "--out", root / "ssm1" / "ssm.fsct")
    assert result.exit_code == 0, result.output
    assert ssm.load_ssm(root / "ssm1" / "ssm.fsct").n_modes == 1
    cfg.write_text(toml.dumps({"ssm": {"regions": 5}}), encoding="utf-8")
    assert _invoke("build-ssm", "--config", cfg, "--shapes", data, "--out", root / "ssm5.fsct").exit_code == 2
    assert not (root / "ssm5.fsct").exists()


def test_gen_data_reads_label_size_and_grid_from_config(tmp_path):
    cfg = tmp_path / "data.toml"
    cfg.write_text(toml.dumps({"ssm": {"grid_theta": 6, "grid_phi": 12}, "train": {"label_size": 2}}),
                   encoding="utf-8")
    out = tmp_path / "d"
    result = _invoke("gen-data", "--config", cfg, "--family", "siteA", "--n", 4, "--res", 16, "--seed", 2,
                     "--views", 8, "--split", "3,0,1", "--out", out)
    assert result.exit_code == 0, result.output
    manifest = phantoms.load_manifest(out)
    assert sum(e.labeled for e in manifest.by_split("train")) == 2
    points, grid = phantoms.load_shapes(manifest)
    assert grid == (6, 12) and points.shape == (2, 3 * 7 * 6 * 12)
    cfg.write_text(toml.dumps({"ssm": {"regions": 3}}), encoding="utf-8")
    assert _invoke("gen-data", "--config", cfg, "--family", "siteA", "--n", 1, "--out", tmp_path / "e").exit_code == 2


def test_missing_checkpoint_exits_one_and_leaves_nothing(pipeline):
    root, _, _, _, cfg = pipeline
    result = _invoke("sample", "--config", cfg, "--checkpoint", root / "nope.fsct", "--n", 1, "--out", root / "x")
    assert result.exit_code == 1
    assert not (root / "x").exists() and not (root / "x.partial").exists()


def test_bad_config_exits_two(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[train]\nepochs_pretrain = -1\n", encoding="utf-8")
    assert _invoke("train", "--config", cfg).exit_code == 2
    cfg.write_text("[train\n", encoding="utf-8")
    assert _invoke("train", "--config", cfg).exit_code == 2
    assert _invoke("train", "--config", tmp_path / "absent.toml").exit_code == 2


def test_bad_split_and_family_exit_two(tmp_path):
    assert _invoke("gen-data", "--family", "siteA", "--n", 2, "--out", tmp_path / "d", "--split", "1,1").exit_code == 2
    assert _invoke("gen-data", "--family", "nowhere", "--n", 2, "--out", tmp_path / "d").exit_code == 2
    assert not (tmp_path / "d").exists()


def test_unknown_selftest_exits_four():
    assert _invoke("selftest", "--only", "no_such_check").exit_code == 4
