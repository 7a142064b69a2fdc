import json

import pytest

from roundrefine.cli import main
from roundrefine.config import SCHEMA_VERSION, ConfigError, config_from_dict, load_config
from roundrefine.datagen import dataset_checksum

SMALL = {
    "schema_version": 1,
    "seed": 4,
    "counts": {"sparse": 32, "dense": 16, "test": 8},
    "model": {"hidden": 8},
    "train": {"offline_epochs": 1, "online_epochs": 1, "batch_size": 16},
    "experiment": {"seeds": [0, 1], "ratios": [2, 4]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_defaults_and_roundtrip(tmp_path):
    cfg = config_from_dict({"schema_version": SCHEMA_VERSION}, env={})
    assert cfg.infer.M == 3 and cfg.infer.T_refine == 4 and cfg.train.T == 3
    cfg.write(tmp_path / "c.json")
    again = load_config(tmp_path / "c.json", env={})
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize(
    "raw,msg",
    [
        ({}, "schema_version"),
        ({"schema_version": 1, "colour": 1}, "colour"),
        ({"schema_version": 1, "train": {"lr": 1}}, "lr"),
        ({"schema_version": 1, "infer": {"M": 0}}, "infer"),
        ({"schema_version": 1, "counts": {"sparse": 1}}, "data"),
        ({"schema_version": 1, "train": {"seed": 3}}, "seed"),
    ],
)
def test_config_rejections(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(raw, env={})


def test_seed_env_override():
    cfg = config_from_dict({"schema_version": 1, "seed": 1}, env={"ARMOR_SEED": "77"})
    assert cfg.seed == 77 and cfg.train_config().seed == 77 and cfg.infer_config().seed == 77
    with pytest.raises(ConfigError):
        config_from_dict({"schema_version": 1}, env={"ARMOR_SEED": "x"})


def test_malformed_json_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n "schema_version": 1,\n oops\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_gen_data_idempotent(tmp_path, cfg_path, monkeypatch):
    monkeypatch.delenv("ARMOR_SEED", raising=False)
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == 0
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
    resolved = json.loads((tmp_path / "a" / "config.resolved.json").read_text())
    assert resolved["seed"] == 4 and resolved["schema_version"] == 1


def test_exit_codes(tmp_path, cfg_path, capsys):
    assert main(["nonsense"]) == 1
    assert main(["gen-data", "--out", str(tmp_path), "--frobnicate"]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert all(line.startswith("error:") for line in err.strip().splitlines())
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema_version": 2}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1


def test_runtime_failure_exit_code(tmp_path, monkeypatch, capsys):
    import roundrefine.cli as cli

    def boom(manifest):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "generate_dataset", boom)
    assert main(["gen-data", "--out", str(tmp_path)]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_full_pipeline(tmp_path, cfg_path, capsys):
    d, ck, inf, rep = (tmp_path / n for n in ("d", "ck", "inf", "rep"))
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(d)]) == 0
    before = dataset_checksum(d)
    assert main(["train", "--config", str(cfg_path), "--data", str(d), "--out", str(ck), "--quiet"]) == 0
    assert (ck / "final.ckpt").is_file() and (ck / "train_log.jsonl").is_file()
    capsys.readouterr()
    assert main(["infer", "--checkpoint", str(ck / "final.ckpt"), "--data", str(d), "--index", "1", "--rounds", "1", "--samples", "1", "--out", str(inf)]) == 0
    line = capsys.readouterr().out
    assert "detection=" in line and "reasoning:" in line
    dump = json.loads(next(inf.glob("diagnostics_*.json")).read_text())
    assert dump["stop_round"] == 1 and len(dump["trajectories"]) == 1
    assert main(["eval", "--checkpoint", str(ck / "final.ckpt"), "--data", str(d), "--report", str(rep)]) == 0
    metrics = json.loads((rep / "metrics.json").read_text())
    assert 0 <= metrics["detect_acc"] <= 1 and (rep / "round_curves.png").stat().st_size > 0
    assert dataset_checksum(d) == before


def test_infer_from_episode_file(tmp_path, cfg_path):
    from roundrefine.datagen import generate_episode

    d, ck = tmp_path / "d", tmp_path / "ck"
    main(["gen-data", "--config", str(cfg_path), "--out", str(d)])
    main(["train", "--config", str(cfg_path), "--data", str(d), "--out", str(ck), "--quiet"])
    ep = tmp_path / "ep.json"
    ep.write_text(json.dumps(generate_episode(5, "failure", 2, episode_id="mine").to_record()))
    assert main(["infer", "--checkpoint", str(ck / "final.ckpt"), "--episode", str(ep), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "diagnostics_mine.json").is_file()
    ep.write_text("{}")
    assert main(["infer", "--checkpoint", str(ck / "final.ckpt"), "--episode", str(ep), "--out", str(tmp_path / "o")]) == 1


def test_ablate_ratio_grid_columns(tmp_path, cfg_path):
    rep = tmp_path / "abl"
    assert main(["ablate", "--config", str(cfg_path), "--grid", "ratio", "--report", str(rep)]) == 0
    out = json.loads((rep / "ratio.json").read_text())
    assert list(out["table"]) == ["2", "4"]
    assert all(out["table"][k]["n_seeds"] == 2 for k in out["table"])
    assert (rep / "ratio.png").is_file() and (rep / "config.resolved.json").is_file()
