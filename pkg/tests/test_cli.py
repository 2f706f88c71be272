import hashlib
import json
import os
from pathlib import Path

import numpy as np
import pytest
import yaml
from PIL import Image

from smokenet import ModelConfig, build, cli, save_checkpoint
from smokenet import runner
from smokenet.config import RunConfig
from smokenet import tensor_core as tc
from smokenet.model import read_checkpoint


def small_config(tmp_path, manifest, epochs=2, **extra):
    raw = {
        "precision": 64,
        "data": {"manifest": str(manifest), "image_size": 64, "batch_size": 2},
        "schedule": {"total_epochs": max(epochs, 2)},
        "train": {"epochs": epochs},
        "eval": {"fps_iters": 3, "fps_warmup": 0},
        "preview": {"count": 2, "limit": 2},
    }
    for section, values in extra.items():
        raw.setdefault(section, {}).update(values)
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "golden.json").read_text())


def run(*args):
    return cli.main([str(a) for a in args])


def read_log(out):
    return [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]


@pytest.fixture
def trained(tmp_path, toy_dataset):
    cfg = small_config(tmp_path, toy_dataset)
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out, "-q") == 0
    return cfg, out


def test_train_writes_artifacts(trained):
    cfg, out = trained
    for name in ("best.ckpt", "last.ckpt", "log.jsonl", "config.yaml"):
        assert (out / name).exists(), name
    events = read_log(out)
    epochs = [e for e in events if e["event"] == "epoch"]
    assert [e["epoch"] for e in epochs] == [0, 1]
    assert epochs[0]["lr"] == 0.001
    steps = [e for e in events if e["event"] == "step"]
    assert len(steps) == 4  # 4 samples, batch 2, 2 epochs
    assert all(np.isfinite(e["loss"]) for e in steps)


def test_training_is_reproducible(tmp_path, toy_dataset, trained):
    cfg, out = trained
    again = tmp_path / "again"
    assert run("train", "--config", cfg, "--out", again, "-q") == 0
    assert (out / "last.ckpt").read_bytes() == (again / "last.ckpt").read_bytes()


def test_resume_matches_uninterrupted(tmp_path, toy_dataset, trained):
    _, out = trained
    cfg = small_config(tmp_path, toy_dataset, epochs=1, schedule={"total_epochs": 2})
    part = tmp_path / "part"
    assert run("train", "--config", cfg, "--out", part, "-q") == 0
    cfg2 = small_config(tmp_path, toy_dataset, epochs=2)
    assert run("train", "--config", cfg2, "--out", part, "--resume", "-q") == 0
    _, a = read_checkpoint(out / "last.ckpt")
    _, b = read_checkpoint(part / "last.ckpt")
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def test_resume_mid_epoch_with_max_steps(tmp_path, toy_dataset, trained):
    _, out = trained
    part = tmp_path / "steps"
    cfg = small_config(tmp_path, toy_dataset, train={"max_steps": 3})
    assert run("train", "--config", cfg, "--out", part, "-q") == 0
    header, _ = read_checkpoint(part / "last.ckpt")
    assert header["meta"]["global_step"] == 3 and not header["meta"]["epoch_complete"]
    cfg = small_config(tmp_path, toy_dataset)
    assert run("train", "--config", cfg, "--out", part, "--resume", "-q") == 0
    h1, a = read_checkpoint(out / "last.ckpt")
    h2, b = read_checkpoint(part / "last.ckpt")
    assert h1["meta"]["step_losses"] == h2["meta"]["step_losses"]
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def test_eval_writes_report(trained, capsys):
    cfg, out = trained
    assert run("eval", "--config", cfg, "--out", out, "-q") == 0
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["miou"] <= 1.0
    assert report["params"] == 208_603 and report["fps"] > 0
    assert "mIoU" in capsys.readouterr().out


def test_eval_empty_test_split_is_input_error(tmp_path, trained):
    cfg, out = trained
    manifest = tmp_path / "ds" / "manifest.jsonl"
    rows = [json.loads(line) for line in manifest.read_text().splitlines()]
    only_train = tmp_path / "ds" / "train_only.jsonl"
    only_train.write_text("\n".join(json.dumps(r) for r in rows if r["split"] == "train"))
    assert run("eval", "--config", cfg, "--out", out, "--manifest", only_train, "-q") == 1


def test_eval_without_checkpoint(tmp_path, toy_dataset):
    cfg = small_config(tmp_path, toy_dataset)
    assert run("eval", "--config", cfg, "--out", tmp_path / "nothing", "-q") == 1


def test_corrupt_checkpoint_is_input_error(tmp_path, trained):
    cfg, out = trained
    bad = tmp_path / "bad.ckpt"
    raw = bytearray((out / "best.ckpt").read_bytes())
    raw[-10] ^= 1
    bad.write_bytes(bytes(raw))
    assert run("eval", "--config", cfg, "--out", out, "--checkpoint", bad, "-q") == 1


def test_infer_outputs_and_partial_failure(tmp_path, trained, capsys):
    cfg, out = trained
    black = tmp_path / "black.png"
    Image.fromarray(np.zeros((50, 70, 3), np.uint8)).save(black)
    dest = tmp_path / "pred"
    code = run("infer", "--config", cfg, "--out", dest, "--checkpoint", out / "best.ckpt", black, "-q")
    assert code == 0
    with Image.open(dest / "black_mask.png") as m, Image.open(dest / "black_overlay.png") as o:
        assert m.size == (70, 50) and o.size == (70, 50)
        assert set(np.unique(np.asarray(m))) <= {0, 255}
    code = run("infer", "--config", cfg, "--out", dest, "--checkpoint", out / "best.ckpt", black, tmp_path / "nope.png", "-q")
    assert code == 2
    assert "nope.png" in capsys.readouterr().err
    assert any(e["event"] == "infer_error" for e in read_log(dest))


def test_infer_missing_checkpoint(tmp_path, toy_dataset):
    cfg = small_config(tmp_path, toy_dataset)
    assert run("infer", "--config", cfg, "--out", tmp_path / "o", "--checkpoint", tmp_path / "x.ckpt", "a.png", "-q") == 1


def test_profile_lists_all_variants(tmp_path, capsys):
    assert run("profile", "--out", tmp_path / "prof", "-q") == 0
    text = capsys.readouterr().out
    for name in ("M1", "M4", "M8"):
        assert name in text
    rows = json.loads((tmp_path / "prof" / "profile.json").read_text())
    assert [r["model"] for r in rows] == [f"M{i}" for i in range(1, 9)]
    assert rows[0]["params"] == rows[1]["params"]  # loss choice leaves the inference graph alone


def test_profile_without_out_writes_nothing(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("profile", "-q") == 0
    assert os.listdir(tmp_path) == []


def test_augment_preview(tmp_path, toy_dataset):
    cfg = small_config(tmp_path, toy_dataset)
    out = tmp_path / "prev"
    assert run("augment-preview", "--config", cfg, "--out", out, "-q") == 0
    assert len(list(out.glob("*_aug*_mask.png"))) == 4
    assert len((out / "augmentations.jsonl").read_text().splitlines()) == 4


def test_bad_config_exit_code(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("modle: {}\n")
    assert run("train", "--config", path, "-q") == 1


def test_train_without_manifest(tmp_path):
    assert run("train", "--out", tmp_path / "o", "-q") == 1


def test_unwritable_output(tmp_path, toy_dataset):
    blocker = tmp_path / "file"
    blocker.write_text("")
    cfg = small_config(tmp_path, toy_dataset)
    assert run("train", "--config", cfg, "--out", blocker / "sub", "-q") == 2


def test_show_config(capsys):
    assert run("show-config") == 0
    assert yaml.safe_load(capsys.readouterr().out)["model"]["filters"] == [4, 8, 16, 32, 64, 128]


def test_gradcheck_passes(capsys):
    assert run("gradcheck", "--seeds", 1, "-q") == 0


def test_gradcheck_detects_broken_backward(monkeypatch, capsys):
    real = tc._conv_backward_weight
    monkeypatch.setattr(tc, "_conv_backward_weight", lambda cols, g: 1.01 * real(cols, g))
    assert run("gradcheck", "--seeds", 1, "-q") == 1
    assert "conv2d" in capsys.readouterr().err


def golden_eval_and_infer(tmp_path, manifest, checkpoint):
    """Eval mIoU and infer mask bytes for the seed-0 model on the toy test image."""
    cfg = small_config(tmp_path, manifest)
    out = tmp_path / "golden"
    assert run("eval", "--config", cfg, "--out", out, "--checkpoint", checkpoint, "-q") == 0
    report = json.loads((out / "report.json").read_text())
    image = next(Path(manifest).parent.glob("images/synthetic-0005.png"))
    assert run("infer", "--config", cfg, "--out", out, "--checkpoint", checkpoint, image, "-q") == 0
    return report["miou"], (out / "synthetic-0005_mask.png").read_bytes()


def test_golden_eval_and_infer(tmp_path, toy_dataset):
    save_checkpoint(tmp_path / "seed0.ckpt", build(ModelConfig(precision=64), seed=0))
    miou, mask_bytes = golden_eval_and_infer(tmp_path, toy_dataset, tmp_path / "seed0.ckpt")
    assert miou == pytest.approx(GOLDEN["eval_miou"], rel=1e-12)
    assert hashlib.sha256(mask_bytes).hexdigest() == GOLDEN["infer_mask_sha256"]


def test_rerun_from_dumped_config(tmp_path, trained):
    _, out = trained
    again = tmp_path / "from_dump"
    assert run("train", "--config", out / "config.yaml", "--out", again, "-q") == 0
    assert (out / "last.ckpt").read_bytes() == (again / "last.ckpt").read_bytes()


def test_seed_flag_changes_run(tmp_path, trained):
    cfg, out = trained
    other = tmp_path / "seed7"
    assert run("train", "--config", cfg, "--out", other, "--seed", 7, "-q") == 0
    a = [e["loss"] for e in read_log(out) if e["event"] == "step"]
    b = [e["loss"] for e in read_log(other) if e["event"] == "step"]
    assert a != b
    assert yaml.safe_load((other / "config.yaml").read_text())["seed"] == 7


def test_profile_rows_pure_and_ordered():
    a, b = runner.profile_rows(RunConfig()), runner.profile_rows(RunConfig())
    assert a == b
    by_name = {r["model"]: r for r in a}
    for n, m in (("M1", "M5"), ("M2", "M6"), ("M3", "M7"), ("M4", "M8")):
        assert by_name[m]["conv_flops"] < by_name[n]["conv_flops"]
    assert by_name["M5"]["params"] == by_name["M6"]["params"]
    assert by_name["M8"]["params"] == 208_603
