"""
RunConfig parsing plus the run-artifact helpers in utils.

Run with:
    PYTHONPATH=. pytest -q tests/test_config.py
"""
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import services
from errors import ConfigError
from schemas import RunConfig
from utils import MetricsWriter, make_rng, name_key, read_metrics, staged_output, write_pgm, write_run_info

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ====== RunConfig ======

def test_defaults_round_trip_through_toml():
    cfg = RunConfig()
    assert RunConfig.from_toml(cfg.to_toml()) == cfg


def test_custom_values_round_trip():
    cfg = RunConfig.from_toml(
        "seed = 5\n[render]\nresolution = 16\nmaterial = 4\n"
        "[train]\nlr_labeled = [0.002, 0.0001]\nproject_latents = true\n"
        "[paths]\nsites = [\"a.toml\", \"b.toml\"]\nfull_checkpoint = \"run/full.fsct\"\n")
    again = RunConfig.from_toml(cfg.to_toml())
    assert again == cfg
    assert again.train.lr_labeled == (0.002, 0.0001) and again.paths.sites == ["a.toml", "b.toml"]
    assert cfg.to_toml() == again.to_toml()


@pytest.mark.parametrize("text, key_path", [
    ("[train]\ncolour = 1\n", "train.colour"),
    ("[train]\nepochs_pretrain = -1\n", "train.epochs_pretrain"),
    ("[eval]\narms = [\"LowerBound\", \"Oracle\"]\n", "eval.arms"),
    ("[federated]\ntransport = \"udp\"\n", "federated.transport"),
    ("wibble = 3\n", "wibble"),
    ("[render]\nmode = \"parallel2d\"\n", "render.mode"),
    ("[ssm]\ngrid_phi = 2\n", "ssm.grid_phi"),
])
def test_invalid_keys_report_their_path(text, key_path):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_toml(text)
    assert info.value.key_path == key_path and str(info.value).startswith(key_path)


def test_material_must_divide_render_resolution():
    with pytest.raises(ConfigError):
        RunConfig.from_toml("[render]\nresolution = 16\nmaterial = 3\n")


def test_malformed_toml_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_toml("[render\n")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "absent.toml")


def test_federated_overrides_replace_their_keys():
    cfg = services.federated_overrides(RunConfig(), sites=["a.toml", "b.toml"], rounds=5, listen="127.0.0.1:9")
    assert cfg.paths.sites == ["a.toml", "b.toml"]
    assert (cfg.federated.rounds, cfg.federated.listen) == (5, "127.0.0.1:9")
    assert services.federated_overrides(cfg) == cfg
    with pytest.raises(ConfigError) as info:
        services.federated_overrides(cfg, rounds=-1)
    assert info.value.key_path == "federated.rounds"
    with pytest.raises(ConfigError):
        services.federated_overrides(cfg, listen="7431")


@pytest.mark.parametrize("name", ["train.toml", "federated.toml", "eval.toml"])
def test_shipped_configs_parse(name):
    cfg = RunConfig.load(CONFIGS / name)
    assert cfg.seed == 7 and cfg.render.resolution == 32


# ====== randomness ======

def test_rng_streams_depend_only_on_their_keys():
    a = make_rng(3, name_key("synthetic"), 1).normal(size=4)
    assert np.array_equal(a, make_rng(3, name_key("synthetic"), 1).normal(size=4))
    assert not np.array_equal(a, make_rng(3, name_key("synthetic"), 2).normal(size=4))
    assert not np.array_equal(a, make_rng(4, name_key("synthetic"), 1).normal(size=4))
    assert name_key("siteA") == name_key("siteA") != name_key("siteB")


# ====== run artifacts ======

def test_staged_output_moves_into_place(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "stale.txt").write_text("old", encoding="utf-8")
    with staged_output(out) as stage:
        assert stage.name == "run.partial"
        (stage / "new.txt").write_text("new", encoding="utf-8")
    assert sorted(p.name for p in out.iterdir()) == ["new.txt"]
    assert not (tmp_path / "run.partial").exists()


def test_staged_output_discards_on_failure(tmp_path):
    out = tmp_path / "run"
    with pytest.raises(RuntimeError):
        with staged_output(out) as stage:
            (stage / "half.txt").write_text("x", encoding="utf-8")
            raise RuntimeError("interrupted")
    assert not out.exists() and not (tmp_path / "run.partial").exists()


def test_run_info_records_config_hash_and_seed(tmp_path):
    text = RunConfig().to_toml()
    info = json.loads(write_run_info(tmp_path, "train", text, 11, {"epochs": 3}).read_text(encoding="utf-8"))
    assert info["command"] == "train" and info["seed"] == 11 and info["epochs"] == 3
    assert RunConfig.from_toml(info["config"]) == RunConfig()
    assert len(info["config_hash"]) == 64 and "numpy" in info["versions"]


def test_metrics_writer_keeps_float_precision(tmp_path):
    writer = MetricsWriter(tmp_path / "m.csv", ["epoch", "loss"])
    writer.write({"epoch": 0, "loss": 0.1 + 0.2, "ignored": 1})
    writer.write({"epoch": 1})
    rows = read_metrics(tmp_path / "m.csv")
    assert float(rows[0]["loss"]) == 0.1 + 0.2 and rows[1]["loss"] == ""
    assert list(rows[0]) == ["epoch", "loss"]


def test_pgm_preview_windowing(tmp_path):
    image = np.array([[0.0, 0.5], [1.0, 2.0]])
    pixels = np.asarray(Image.open(write_pgm(tmp_path / "s.pgm", image, 0.0, 1.0)))
    assert pixels.dtype == np.uint8 and pixels.tolist() == [[0, 128], [255, 255]]
    flat = np.asarray(Image.open(write_pgm(tmp_path / "f.pgm", np.full((2, 2), 3.0))))
    assert not flat.any()
