import json
import math

import numpy as np
import pytest

from sarw_mixmae.cli import EXIT_CONFIG, EXIT_DATA, RunConfig, build_parser, main
from sarw_mixmae.data import read_tile, scan_manifest, write_tile
from sarw_mixmae.errors import ConfigError

TINY = {"preset": "tiny", "model": {"label_count": 4},
        "schedule": {"total_epochs": 2, "warmup_epochs": 1, "batch_size": 4}}


def _weight_oracle(vh, vv):
    lin = [(10 ** (a / 10) + 10 ** (b / 10)) / 2 for a, b in zip(vh, vv)]
    lo, hi = min(lin), max(lin)
    return [math.exp(1 - (0.0 if hi == lo else (x - lo) / (hi - lo))) for x in lin]


def _tiles(tmp_path, vh, vv):
    write_tile(tmp_path / "vh.sarw", np.asarray(vh, dtype=np.float32))
    write_tile(tmp_path / "vv.sarw", np.asarray(vv, dtype=np.float32))
    return str(tmp_path / "vh.sarw"), str(tmp_path / "vv.sarw")


def _weightmap(tmp_path, vh, vv):
    a, b = _tiles(tmp_path, vh, vv)
    assert main(["weightmap", a, b, "-o", str(tmp_path / "w.sarw")]) == 0
    return read_tile(tmp_path / "w.sarw"), json.loads((tmp_path / "w.sarw.json").read_text())


def test_weightmap_constant_tile(tmp_path):
    w, stats = _weightmap(tmp_path, np.full((8, 8), -12.0), np.full((8, 8), -7.0))
    assert np.allclose(w, math.e)
    for k in ("min", "max", "mean"):
        assert stats[k] == pytest.approx(math.e, abs=1e-6)


def test_weightmap_two_level_tile(tmp_path):
    vh = np.where(np.arange(64).reshape(8, 8) % 2 == 0, -20.0, -5.0)
    _, stats = _weightmap(tmp_path, vh, vh)
    assert stats["min"] == pytest.approx(1.0, abs=1e-6)
    assert stats["max"] == pytest.approx(math.e, abs=1e-6)


def test_weightmap_random_tile_matches_oracle(tmp_path, rng):
    vh = rng.uniform(-30, 0, (16, 16)).astype(np.float32)
    vv = rng.uniform(-30, 0, (16, 16)).astype(np.float32)
    w, stats = _weightmap(tmp_path, vh, vv)
    ref = np.array(_weight_oracle(vh.ravel().astype(float), vv.ravel().astype(float))).reshape(16, 16)
    assert np.allclose(w, ref, atol=1e-5)
    assert stats["mean"] == pytest.approx(ref.mean(), abs=1e-5)
    assert 1 - 1e-6 <= stats["min"] <= stats["max"] <= math.e + 1e-6


def test_weightmap_missing_tile_is_data_error(tmp_path, capsys):
    assert main(["weightmap", str(tmp_path / "a.sarw"), str(tmp_path / "b.sarw"), "-o", str(tmp_path / "w")]) == EXIT_DATA
    assert "a.sarw" in capsys.readouterr().err


def test_synth_split_and_reproducible(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"size": 32, "seed": 5}))
    for d in ("a", "b"):
        assert main(["synth", "--spec", str(spec), "--count", "10", "-o", str(tmp_path / d)]) == 0
    m = scan_manifest(tmp_path / "a")
    assert m.counts() == {"train": 8, "val": 1, "test": 1}
    for e in m.entries:
        assert (tmp_path / "a" / e.vh).read_bytes() == (tmp_path / "b" / e.vh).read_bytes()


def test_missing_config_exits_2(tmp_path):
    assert main(["pretrain", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    assert main(["pretrain"]) == EXIT_CONFIG


def test_unknown_config_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "tiny", "learning_rate": 1}))
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.load(p)
    assert main(["pretrain", "--config", str(p)]) == EXIT_CONFIG


def test_toml_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('preset = "tiny"\nweight_mode = "uniform"\n[schedule]\nbatch_size = 2\n')
    rc = RunConfig.load(p)
    assert rc.weight_mode == "uniform" and rc.schedule == {"batch_size": 2}


def test_data_root_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("SARW_DATA_ROOT", str(tmp_path / "nowhere"))
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "tiny"}))
    assert main(["pretrain", "--config", str(p)]) == EXIT_DATA
    monkeypatch.delenv("SARW_DATA_ROOT")
    assert main(["pretrain", "--config", str(p)]) == EXIT_CONFIG


def test_help_lists_global_flags():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"weightmap", "synth", "pretrain", "finetune-classify", "finetune-flood", "eval"}
    for cmd in sub.values():
        text = cmd.format_help()
        for flag in ("--config", "--seed", "--deterministic", "--preset", "--weight-mode"):
            assert flag in text


@pytest.fixture(scope="module")
def labeled_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"size": 64, "seed": 3, "class_means_db": [-22, -16, -10, -6]}))
    assert main(["synth", "--spec", str(spec), "--count", "20", "-o", str(root / "data")]) == 0
    return root


def _config(root, name, **extra):
    p = root / f"{name}.json"
    p.write_text(json.dumps({**TINY, "data_root": str(root / "data"), "output": str(root / name), **extra}))
    return str(p)


def test_pretrain_finetune_eval_round_trip(labeled_root):
    root = labeled_root
    assert main(["pretrain", "--config", _config(root, "pre")]) == 0
    summary = json.loads((root / "pre" / "pretrain_summary.json").read_text())
    assert summary["config"]["run"]["preset"] == "tiny"
    cls = _config(root, "cls", pretrained=str(root / "pre" / "final.swck"))
    assert main(["finetune-classify", "--config", cls]) == 0
    ev = _config(root, "ev", task="classify", checkpoint=str(root / "cls" / "final.swck"))
    assert main(["eval", "--config", ev]) == 0
    assert (root / "cls" / "metrics.json").read_bytes() == (root / "ev" / "eval" / "metrics.json").read_bytes()


def test_pretrain_is_bit_identical_rerun(labeled_root):
    root = labeled_root
    for name in ("r1", "r2"):
        assert main(["pretrain", "--deterministic", "--config", _config(root, name)]) == 0
    assert (root / "r1" / "final.swck").read_bytes() == (root / "r2" / "final.swck").read_bytes()


def test_uniform_flag_changes_run(labeled_root):
    root = labeled_root
    assert main(["pretrain", "--weight-mode", "uniform", "--config", _config(root, "u")]) == 0
    run = json.loads((root / "u" / "pretrain_summary.json").read_text())["config"]["run"]
    assert run["weight_mode"] == "uniform"


def test_pretrained_config_mismatch_is_data_error(labeled_root):
    root = labeled_root
    if not (root / "pre" / "final.swck").exists():
        assert main(["pretrain", "--config", _config(root, "pre")]) == 0
    cfg = _config(root, "mm", pretrained=str(root / "pre" / "final.swck"))
    assert main(["finetune-classify", "--preset", "desk", "--config", cfg]) == EXIT_DATA
