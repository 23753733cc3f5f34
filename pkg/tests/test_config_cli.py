import csv
import json
import os

import pytest
import yaml

from mmdpu.cli import main
from mmdpu.config import Config, dump_config, env_overrides, load_config
from mmdpu.datamodel import ConfigError


class TestConfig:
    def test_defaults(self):
        cfg = load_config(environ={})
        assert cfg.train.batch_size == 32
        assert cfg.train.weights.alpha == 0.1
        assert cfg.teacher.image_size == cfg.data.image_size == 224

    def test_file_and_env(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"train": {"batch_size": 8, "weights": {"alpha": 1.0}},
                                        "data": {"image_size": 32}}))
        cfg = load_config(path, environ={"MMDPU_TRAIN__BATCH_SIZE": "4", "MMDPU_TRAIN__WEIGHTS__BETA": "0.01",
                                         "OTHER": "x"})
        assert cfg.train.batch_size == 4
        assert cfg.train.weights.alpha == 1.0 and cfg.train.weights.beta == 0.01
        assert cfg.teacher.image_size == 32

    def test_env_parse(self):
        assert env_overrides({"MMDPU_STUDENT__DIM": "16"}) == {"student": {"dim": 16}}

    def test_unknown_keys(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  nope: 1\n")
        with pytest.raises(ConfigError, match="nope"):
            load_config(path, environ={})
        path.write_text("bogus: {}\n")
        with pytest.raises(ConfigError):
            load_config(path, environ={})

    def test_invalid_value(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  weights:\n    alpha: -1\n")
        with pytest.raises(Exception):
            load_config(path, environ={})

    def test_roundtrip(self, tmp_path):
        cfg = Config()
        cfg.train.batch_size = 7
        dump_config(cfg, tmp_path / "c.yaml")
        back = load_config(tmp_path / "c.yaml", environ={})
        assert back.to_dict() == cfg.to_dict()


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    for k in list(os.environ):
        if k.startswith("MMDPU_"):
            monkeypatch.delenv(k)
    conf = tmp_path / "tiny.yaml"
    conf.write_text(yaml.safe_dump({
        "data": {"image_size": 16, "resize_size": 16, "vocab_size": 500},
        "teacher": {"stage_channels": [4, 8], "attn_dim": 8, "attn_heads": 2, "warmup_epochs": 1},
        "student": {"dim": 8, "image_channels": [4, 8], "fusion_heads": 2},
        "train": {"batch_size": 8, "max_epochs": 1, "seeds": [1, 2]},
    }))
    corpus = tmp_path / "corpus"
    assert main(["--config", str(conf), "gen-synthetic", "--out", str(corpus), "--n-articles", "40",
                 "--n-imd", "16", "--image-size", "16"]) == 0
    capsys.readouterr()

    main(["--config", str(conf), "prepare-data", "--manifest", str(corpus / "mmd.jsonl")])
    splits = json.loads(capsys.readouterr().out)
    assert splits["train"]["n"] + splits["valid"]["n"] + splits["test"]["n"] == 40

    main(["--config", str(conf), "synth", "--input", str(corpus / "imd" / "imd.jsonl"), "--out", str(tmp_path / "cm")])
    assert json.loads(capsys.readouterr().out)["n"] == 16

    main(["--config", str(conf), "pretrain-teacher", "--imd", str(corpus / "imd" / "imd.jsonl"),
          "--out", str(tmp_path / "t.pt"), "--epochs", "1"])
    assert json.loads(capsys.readouterr().out)["epochs_warmed"] == 1

    common = ["--train", splits["train"]["path"], "--valid", splits["valid"]["path"],
              "--imd", str(corpus / "imd" / "imd.jsonl")]
    main(["--config", str(conf), "train", *common, "--test", splits["test"]["path"], "--out", str(tmp_path / "run")])
    capsys.readouterr()
    assert (tmp_path / "run" / "student.pt").exists()
    assert (tmp_path / "run" / "run_record.jsonl").exists()

    main(["--config", str(conf), "eval", "--checkpoint", str(tmp_path / "run" / "student.pt"),
          "--test", splits["test"]["path"], "--out", str(tmp_path / "m.json"), "--csv", str(tmp_path / "m.csv"),
          "--dump-features", str(tmp_path / "f.jsonl")])
    capsys.readouterr()
    metrics = json.loads((tmp_path / "m.json").read_text())
    assert 0 <= metrics["macro_f1"] <= 1
    assert len(list(csv.DictReader(open(tmp_path / "m.csv")))) == 1
    assert sum(1 for _ in open(tmp_path / "f.jsonl")) == splits["test"]["n"]

    main(["--config", str(conf), "ablate", *common, "--test", splits["test"]["path"], "--out", str(tmp_path / "abl"),
          "--variants", "full", "no_eM_eE"])
    capsys.readouterr()
    summary = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert "no_eM_eE" in summary["p_values_vs_full"]
    assert len(list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))) == 2
