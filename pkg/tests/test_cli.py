import json
import subprocess
import sys

import numpy as np
import pytest

from tcvc import cli, config, imaging

from toydata import write_corpus

CONFIG = """\
[data]
image_size = 32
splits = {train = ["ep01"], val = ["ep02"]}

[train]
batch_size = 4
g_base_width = 4
d_base_width = 4
extractor = "tiny"

[eval]
fid_features = "random"
"""


@pytest.fixture
def work(tmp_path, monkeypatch):
    """A working directory with a toy corpus and a small config."""
    monkeypatch.chdir(tmp_path)
    write_corpus(tmp_path / "corpus", episodes=2, frames=8, size=32)
    (tmp_path / "c.toml").write_text(CONFIG)
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def prepare(work):
    assert run("prepare", "--config", "c.toml", "--root", "corpus", "--out", "prep") == 0


def train(*extra, run_dir="run"):
    return run("train", "--config", "c.toml", "--data", "prep", "--run-dir", run_dir, *extra)


# -- prepare --------------------------------------------------------------------------------

def test_prepare_writes_manifests_and_cache(work):
    prepare(work)
    assert sorted(p.name for p in (work / "prep" / "manifests").iterdir()) == ["train.txt", "val.txt"]
    assert len(list((work / "prep" / "lineart").rglob("*.png"))) == 16


def test_prepare_is_idempotent(work):
    prepare(work)
    first = {p: p.read_bytes() for p in (work / "prep").rglob("*") if p.is_file()}
    prepare(work)
    second = {p: p.read_bytes() for p in (work / "prep").rglob("*") if p.is_file()}
    assert first == second


def test_prepare_corrupt_image(work, caplog):
    bad = work / "corpus" / "ep01" / "0003.png"
    bad.write_bytes(b"not a png")
    assert run("prepare", "--config", "c.toml", "--root", "corpus", "--out", "prep") == 2
    assert str(bad) in caplog.text or "0003.png" in caplog.text


def test_prepare_missing_root(work):
    assert run("prepare", "--config", "c.toml", "--root", "nowhere", "--out", "prep") == 2
    assert run("prepare", "--config", "c.toml", "--out", "prep") == 2


# -- train ----------------------------------------------------------------------------------

def test_train_one_epoch(work):
    prepare(work)
    assert train("--epochs", "1") == 0
    run_dir = work / "run"
    assert list(run_dir.glob("ckpt_*.pt"))
    lines = (run_dir / "log.csv").read_text().splitlines()
    assert lines[0].startswith("step,") and len(lines) == 3
    assert config.load(run_dir / "config.toml").train_config().epochs == 1


def test_train_baseline_echo(work):
    prepare(work)
    assert train("--epochs", "1", "--model", "unet_baseline") == 0
    echo = config.load(work / "run" / "config.toml")
    assert echo.model == "unet_baseline"
    assert echo.loss.lambda_content == 0 and echo.loss.lambda_style == 0
    assert echo.train["p_blank"] == 1.0


def test_train_missing_dataset(work, caplog):
    assert train("--epochs", "1") == 2
    assert "prepare" in caplog.text


def test_train_bad_config(work):
    (work / "bad.toml").write_text("[train]\nwarmup = 3\n")
    assert run("train", "--config", "bad.toml", "--data", "prep") == 2


def test_train_resume(work):
    (work / "c.toml").write_text(CONFIG.replace("[train]", "[train]\ncheckpoint_every = 2"))
    prepare(work)
    assert train("--epochs", "3", run_dir="a") == 0
    assert train("--epochs", "3", "--resume", "a/ckpt_2.pt", run_dir="b") == 0
    assert (work / "a" / "log.csv").read_bytes() == (work / "b" / "log.csv").read_bytes()


# -- colorize -------------------------------------------------------------------------------

def test_colorize(work):
    prepare(work)
    assert train("--epochs", "1") == 0
    src = work / "lines"
    for i in (1, 2, 10):
        imaging.save_png(src / f"{i}.png", np.random.default_rng(i).random((1, 32, 32)))
    assert run("colorize", "--weights", "run/generator.pt", "--input", src, "--out", "out", "--contact-sheet") == 0
    names = sorted(p.name for p in (work / "out").iterdir())
    assert names == ["1.png", "10.png", "2.png", "contact_sheet.png"]
    assert imaging.load_png(work / "out" / "10.png").shape == (3, 32, 32)
    assert imaging.load_png(work / "out" / "contact_sheet.png").shape == (3, 32, 96)


def test_colorize_from_checkpoint_resizes(work):
    prepare(work)
    assert train("--epochs", "1") == 0
    imaging.save_png(work / "lines" / "1.png", np.zeros((1, 48, 48)))
    assert run("colorize", "--weights", "run/ckpt_2.pt", "--input", "lines", "--out", "out") == 0
    assert imaging.load_png(work / "out" / "1.png").shape == (3, 32, 32)


def test_colorize_bad_weights(work):
    (work / "lines").mkdir()
    assert run("colorize", "--weights", "none.pt", "--input", "lines", "--out", "out") == 2


# -- evaluate -------------------------------------------------------------------------------

def test_evaluate_self_check(work, capsys):
    prepare(work)
    assert run("evaluate", "--config", "c.toml", "--data", "prep", "--self-check", "--out", "rep") == 0
    report = json.loads((work / "rep" / "report.json").read_text())[0]
    assert report["ssim"] == pytest.approx(1.0)
    assert report["psnr"] == "inf" and abs(report["fid"]) < 1e-6
    assert "1.00" in capsys.readouterr().out


@pytest.mark.parametrize("regime", ["chained", "gt_prev"])
def test_evaluate_records_conditioning(work, regime):
    prepare(work)
    assert train("--epochs", "1") == 0
    assert run("evaluate", "--config", "c.toml", "--data", "prep", "--weights", "run/generator.pt",
               "--conditioning", regime, "--out", "rep") == 0
    report = json.loads((work / "rep" / "report.json").read_text())[0]
    assert report["conditioning"] == regime and report["frame_count"] == 8
    assert f"conditioning={regime}" in (work / "rep" / "report.txt").read_text()


def test_evaluate_needs_weights(work):
    prepare(work)
    assert run("evaluate", "--config", "c.toml", "--data", "prep", "--out", "rep") == 2


def test_overfit_model_beats_untrained(work):
    # a larger step size than the default lets a short run fit the clip
    (work / "c.toml").write_text(CONFIG.replace("g_base_width = 4", "g_base_width = 8\nlr_g = 1e-3"))
    prepare(work)
    assert train("--epochs", "1", "--max-steps", "1", run_dir="fresh") == 0
    assert train("--epochs", "150", "--batch-size", "8", run_dir="fit") == 0
    scores = {}
    for name in ("fresh", "fit"):
        assert run("evaluate", "--config", "c.toml", "--data", "prep", "--weights", f"{name}/generator.pt",
                   "--split", "train", "--conditioning", "gt_prev", "--out", f"rep_{name}") == 0
        scores[name] = json.loads((work / f"rep_{name}" / "report.json").read_text())[0]["ssim"]
    assert scores["fit"] > scores["fresh"]


# -- reproducibility and the console script ------------------------------------------------------

def test_seeded_commands_are_bitwise_reproducible(work):
    prepare(work)
    for name in ("a", "b"):
        assert train("--epochs", "2", "--seed", "7", run_dir=name) == 0
        assert run("evaluate", "--config", "c.toml", "--data", "prep", "--seed", "7",
                   "--weights", f"{name}/generator.pt", "--out", f"rep_{name}") == 0
    assert (work / "a" / "log.csv").read_bytes() == (work / "b" / "log.csv").read_bytes()
    for f in ("report.txt", "report.json"):
        assert (work / "rep_a" / f).read_bytes() == (work / "rep_b" / f).read_bytes()


def test_console_script_usage_error(work):
    proc = subprocess.run([sys.executable, "-m", "tcvc.cli", "train", "--data", "nowhere"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "nowhere" in proc.stderr
