import json

import numpy as np
import pytest
from PIL import Image

from medivlad import aggregate as ag
from medivlad.checkpoint import load_checkpoint
from medivlad.cli import PAPER_DEFAULTS, read_config, resolve, run, stage_defaults

SMALL = ["--synth.videos_per_class", "2", "--synth.k", "2"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> pretrain -> finetune -> videocls, tiny settings."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["synth", "--out", str(data), "--seed", "0", *SMALL]) == 0
    assert run(["pretrain", "--data", str(data), "--out", str(root / "pre.ckpt"),
                "--pretrain.epochs", "1", "--pretrain.batch_size", "16"]) == 0
    assert run(["finetune", "--data", str(data), "--checkpoint", str(root / "pre.ckpt"),
                "--out", str(root / "ft.ckpt"), "--finetune.epochs", "2"]) == 0
    assert run(["videocls", "--data", str(data), "--checkpoint", str(root / "ft.ckpt"),
                "--out", str(root / "vid.ckpt"), "--features-out", str(root / "train.feats"),
                "--videocls.epochs", "5", "--videocls.kmeans_restarts", "2"]) == 0
    return root, data


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["synth", "--out", str(tmp_path / name), "--seed", "0", *SMALL]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and "manifest.csv" in a
    assert run(["synth", "--out", str(tmp_path / "c"), "--seed", "1", *SMALL]) == 0
    assert _tree(tmp_path / "c") != a


def test_usage_errors(capsys):
    assert run(["bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run(["synth", "--out", "x", "--no-such-flag"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["synth", "--out", "x", "--synth.k", "two"]) == 1
    assert "synth.k" in capsys.readouterr().err


def test_missing_checkpoint_exit_2(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 2
    assert "missing.ckpt" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path, capsys):
    assert run(["synth", "--out", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_unknown_config_key_exit_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pretrain": {"learning_rate": 1.0}}))
    assert run(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 1
    cfg.write_text(json.dumps({"optimizer.lr": 1.0}))
    assert run(["synth", "--out", str(tmp_path / "d"), "--config", str(cfg)]) == 1


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pretrain": {"lr": 0.5, "epochs": 3, "m": 3}, "finetune.epochs": 7}))
    values = read_config(cfg)
    assert values == {"pretrain.lr": 0.5, "pretrain.epochs": 3, "pretrain.m": 3, "finetune.epochs": 7}
    got = resolve("pretrain", "paper", values, {"pretrain.epochs": "9", "pretrain.weight_decay": "0.2,0.3"})
    assert (got.lr, got.epochs, got.weight_decay, got.crops.m) == (0.5, 9, (0.2, 0.3), 3)
    assert got.batch_size == 64
    assert resolve("finetune", "tiny", values, {}).epochs == 7


def test_nullable_settings():
    got = resolve("pretrain", "paper", {}, {"pretrain.clip_grad": "none", "pretrain.local_size": "24"})
    assert got.clip_grad is None and got.crops.local_size == 24


def test_table_defaults():
    pre, ft, vid = PAPER_DEFAULTS["pretrain"], PAPER_DEFAULTS["finetune"], PAPER_DEFAULTS["videocls"]
    assert (pre.lr, ft.lr, vid.lr) == (1.25e-4, 5e-5, 1e-3)
    assert (pre.weight_decay, ft.weight_decay, vid.weight_decay) == ((0.1, 0.5), 0.001, 1e-5)
    assert (pre.epochs, ft.epochs, vid.epochs) == (30, 100, 200)
    assert (pre.batch_size, ft.batch_size, vid.batch_size) == (64, 64, 32)
    assert (pre.tau_t, pre.tau_s, pre.momentum) == (0.5, 0.1, 0.996)
    assert stage_defaults("paper", "pretrain") == pre and stage_defaults("paper", "pretrain") is not pre


def test_pretrain_with_table_config(tmp_path):
    data = tmp_path / "data"
    assert run(["synth", "--out", str(data), "--seed", "0", "--synth.videos_per_class", "1",
                "--synth.k", "1"]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"pretrain": {"lr": 1.25e-4, "weight_decay": [0.1, 0.5], "epochs": 30,
                                            "batch_size": 64}}))
    out = tmp_path / "p.ckpt"
    assert run(["pretrain", "--data", str(data), "--out", str(out), "--config", str(cfg)]) == 0
    ckpt = load_checkpoint(out)
    assert ckpt.meta["pretrain"]["epochs"] == 30 and ckpt.meta["pretrain"]["lr"] == 1.25e-4
    assert (tmp_path / "p.loss.csv").exists() and (tmp_path / "p.loss.png").exists()


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("MEDIVLAD_SEED", "3")
    assert run(["synth", "--out", str(tmp_path / "env"), *SMALL]) == 0
    assert run(["synth", "--out", str(tmp_path / "flag"), "--seed", "3", *SMALL]) == 0
    assert _tree(tmp_path / "env") == _tree(tmp_path / "flag")
    monkeypatch.setenv("MEDIVLAD_SEED", "x")
    assert run(["synth", "--out", str(tmp_path / "bad"), *SMALL]) == 1


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    pre, ft, vid = (load_checkpoint(root / n) for n in ("pre.ckpt", "ft.ckpt", "vid.ckpt"))
    assert pre.tags == ["pretrained"]
    assert ft.tags == ["pretrained", "finetuned"]
    assert "videocls" in vid.tags and vid.subset("aggregator")
    for stem in ("pre", "ft", "vid"):
        assert (root / f"{stem}.loss.csv").read_text().startswith("epoch,step,loss\n")
        assert (root / f"{stem}.loss.png").stat().st_size > 0
    feats = ag.VideoFeatures.from_checkpoint(load_checkpoint(root / "train.feats"))
    assert feats.features.shape[1:] == (15, 96)


def test_pretrain_reproducible(pipeline, tmp_path):
    root, data = pipeline
    out = tmp_path / "again.ckpt"
    assert run(["pretrain", "--data", str(data), "--out", str(out),
                "--pretrain.epochs", "1", "--pretrain.batch_size", "16"]) == 0
    assert out.read_bytes() == (root / "pre.ckpt").read_bytes()
    assert (tmp_path / "again.loss.csv").read_bytes() == (root / "pre.loss.csv").read_bytes()


@pytest.mark.parametrize("method", ["knn", "linear", "finetuned"])
def test_eval_frame_methods(pipeline, tmp_path, method):
    root, data = pipeline
    ckpt = root / ("pre.ckpt" if method != "finetuned" else "ft.ckpt")
    rep = tmp_path / method
    args = ["eval", "--data", str(data), "--checkpoint", str(ckpt), "--report", str(rep),
            "--eval.method", method, "--eval.k", "3", "--eval.probe_steps", "20"]
    assert run(args) == 0
    report = json.loads((rep / "report.json").read_text())
    assert report["provenance"] == method and 0 <= report["accuracy"] <= 100
    assert (rep / "report.csv").exists() and (rep / "confusion.png").exists()
    assert json.loads((rep / "provenance.json").read_text())["method"] == method


def test_eval_video(pipeline, tmp_path):
    root, data = pipeline
    rep = tmp_path / "video"
    assert run(["eval", "--data", str(data), "--checkpoint", str(root / "vid.ckpt"), "--report", str(rep)]) == 0
    report = json.loads((rep / "report.json").read_text())
    assert report["provenance"] == "dual"
    assert (rep / "frame_weights.png").exists()
    rep2 = tmp_path / "video_feats"
    assert run(["eval", "--checkpoint", str(root / "vid.ckpt"), "--features", str(root / "train.feats"),
                "--report", str(rep2)]) == 0


@pytest.mark.parametrize("mode", ["netvlad", "globmax"])
def test_videocls_baselines(pipeline, tmp_path, mode):
    root, data = pipeline
    out = tmp_path / f"{mode}.ckpt"
    assert run(["videocls", "--checkpoint", str(root / "ft.ckpt"), "--features", str(root / "train.feats"),
                "--out", str(out), "--videocls.mode", mode, "--videocls.epochs", "3",
                "--videocls.kmeans_restarts", "1"]) == 0
    rep = tmp_path / f"{mode}_rep"
    assert run(["eval", "--data", str(data), "--checkpoint", str(out), "--report", str(rep)]) == 0
    assert json.loads((rep / "report.json").read_text())["provenance"] == mode


def test_attention_command(pipeline, tmp_path):
    root, _ = pipeline
    frame = tmp_path / "f.png"
    Image.fromarray((np.random.default_rng(0).random((80, 80)) * 255).astype(np.uint8)).save(frame)
    out = tmp_path / "att"
    assert run(["attention", "--checkpoint", str(root / "ft.ckpt"), "--frame", str(frame), "--out", str(out),
                "--format", "pgm"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted([f"attention_head{i}.pgm" for i in range(4)] + ["attention_mean.pgm",
                                                                           "attention_overlay.png"])


def test_finetune_needs_checkpoint_or_scratch(pipeline, tmp_path):
    _, data = pipeline
    assert run(["finetune", "--data", str(data), "--out", str(tmp_path / "x.ckpt")]) == 1
    assert run(["finetune", "--data", str(data), "--out", str(tmp_path / "s.ckpt"), "--scratch",
                "--finetune.epochs", "1"]) == 0
    assert "scratch" in load_checkpoint(tmp_path / "s.ckpt").tags


def test_bad_fold(pipeline, tmp_path):
    _, data = pipeline
    assert run(["pretrain", "--data", str(data), "--out", str(tmp_path / "x.ckpt"), "--fold", "5"]) == 1


def test_missing_data_dir_exit_2(tmp_path, capsys):
    assert run(["pretrain", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "x.ckpt")]) == 2
    assert "nodata" in capsys.readouterr().err
