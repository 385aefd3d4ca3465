"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints (see
``conftest.py``).  Run alone with ``pytest tests/test_acceptance.py``.
"""
import contextlib
import json
import math

import numpy as np
import pytest
import torch
from scipy import ndimage
from skimage.feature import canny as sk_canny

from tcvc import cli, dataset, evaluation, imaging, inference, losses, networks
from tcvc.evaluation import GaussianStats
from tcvc.losses import LossWeights
from tcvc.trainer import TrainConfig, Trainer

from oracles import gaussian_fid_closed_form, gram_brute_force, sampled_gradient_check
from toydata import make_clip, write_corpus

RESULTS = {}

# overfit harness for criterion 5
OVERFIT_SIZE = 64
OVERFIT_STEPS = 400
OVERFIT_G_WIDTH = 16
OVERFIT_D_WIDTH = 16
OVERFIT_LR = 1e-3


@contextlib.contextmanager
def criterion(number, title):
    RESULTS[number] = (title, "FAIL", "")
    notes = []
    try:
        yield notes
    except BaseException:
        RESULTS[number] = (title, "FAIL", "; ".join(notes))
        raise
    RESULTS[number] = (title, "PASS", "; ".join(notes))


# -- 1 ---------------------------------------------------------------------------------------

def test_criterion_1_loss_oracles():
    with criterion(1, "loss oracles") as notes:
        half = torch.full((2, 1, 30, 30), 0.5, dtype=torch.float64)
        assert abs(losses.adversarial_loss_d(half, half).item() - 2 * math.log(2)) < 1e-6
        assert abs(losses.adversarial_loss_g(half).item() - math.log(2)) < 1e-6
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            a = rng.normal(size=(rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)))
            ours = losses.gram_matrix(torch.from_numpy(a)).numpy()
            worst = max(worst, float(np.abs(ours - gram_brute_force(a)).max()))
        assert worst < 1e-6
        notes.append(f"gram max err {worst:.1e} over 200 draws")
        x = torch.rand(2, 3, 32, 32) * 2 - 1
        ext = losses.TinyExtractor(0)
        assert losses.style_loss(ext, x, x.clone()).item() == 0
        assert losses.content_loss(ext, x, x.clone()).item() == 0
        assert losses.l1_loss(x, x.clone()).item() == 0


# -- 2 ---------------------------------------------------------------------------------------

def test_criterion_2_joint_gradient_check():
    with criterion(2, "joint loss gradient check") as notes:
        gen = networks.build_generator(networks.GeneratorSpec(base_width=4), seed=0).double()
        # the patch discriminator needs at least 24px, so the check runs at 32x32
        disc = networks.build_discriminator(networks.DiscriminatorSpec(base_width=4), seed=1).double().eval()
        ext = losses.TinyExtractor(0, widths=(4, 4, 4, 4, 4)).double()
        g = torch.Generator().manual_seed(3)
        line, cond, target = (torch.rand(2, c, 32, 32, generator=g, dtype=torch.float64) * 2 - 1 for c in (1, 3, 3))
        weights = LossWeights(1, 1, 1000, 10)

        def loss():
            fake = gen(line, cond)
            total, _ = losses.joint_generator_loss(
                weights, losses.adversarial_loss_g(disc(fake, cond)), losses.content_loss(ext, fake, target),
                losses.style_loss(ext, fake, target), losses.l1_loss(fake, target))
            return total

        results = sampled_gradient_check(loss, list(gen.parameters()), 150, seed=0)
        # biases ahead of an instance norm have an identically zero gradient
        live = [e for a, n, e in results if max(abs(a), abs(n)) > 1e-8]
        notes.append(f"{len(live)}/{len(results)} non-zero samples, max rel err {max(live):.1e}")
        assert len(live) >= 100
        assert max(live) < 1e-4


# -- 3 ---------------------------------------------------------------------------------------

def test_criterion_3_architecture_contracts():
    with criterion(3, "architecture contracts") as notes:
        gen = networks.build_generator(networks.GeneratorSpec(), seed=0).eval()
        for size in (64, 128, 256):
            with torch.no_grad():
                out = gen(torch.rand(1, 1, size, size) * 2 - 1, torch.rand(1, 3, size, size) * 2 - 1)
            assert out.shape == (1, 3, size, size)
            assert out.abs().max().item() <= 1
        disc = networks.build_discriminator(networks.DiscriminatorSpec(), seed=0)
        assert networks.receptive_field(disc.layer_geometry()) == 70
        with torch.no_grad():
            assert disc(torch.zeros(1, 3, 256, 256), torch.zeros(1, 3, 256, 256)).shape[-2:] == (30, 30)
        sigmas = [torch.linalg.matrix_norm(c.weight.flatten(1), ord=2).item() for c in disc.convs]
        assert max(sigmas) <= 1 + 1e-3
        notes.append(f"max sigma {max(sigmas):.5f}")
        block = networks.ResidualBlock(8)
        with torch.no_grad():
            for p in block.parameters():
                p.zero_()
        x = torch.randn(2, 8, 16, 16)
        assert torch.equal(block(x), x)


# -- 4 ---------------------------------------------------------------------------------------

def test_criterion_4_conditioning_protocol(tmp_path):
    with criterion(4, "conditioning protocol") as notes:
        root = write_corpus(tmp_path / "c", episodes=2, frames=8, size=32)
        manifest = dataset.build_manifest(root, {"train": ["ep01", "ep02"]}, image_size=32)["train"]
        starts = [i for i, e in enumerate(manifest.entries) if manifest.is_episode_start(i)]
        assert starts == [0, 8]
        for i in starts:
            for seed in range(20):
                cond = dataset.sample_condition(manifest, i, np.random.default_rng(seed), p_blank=0.0)
                assert not cond.any()
        rng = np.random.default_rng(11)
        blanks = sum(not dataset.sample_condition(manifest, 3, rng, p_blank=0.5).any() for _ in range(10_000))
        notes.append(f"blank fraction {blanks / 10_000:.4f}")
        assert 0.48 <= blanks / 10_000 <= 0.52
        gen = networks.build_generator(networks.GeneratorSpec(base_width=4), seed=0).eval()
        lines = [torch.from_numpy(imaging.to_model_space(imaging.synthesize_lineart(f))) for f in make_clip(8, 32)]
        full = inference.colorize_sequence(gen, lines)
        for t in range(8):
            prefix = inference.colorize_sequence(gen, lines[:t + 1])
            assert all(torch.equal(a, b) for a, b in zip(prefix, full))


# -- 5 ---------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_overfit(tmp_path):
    with criterion(5, "overfit behaviour") as notes:
        root = write_corpus(tmp_path / "clip", episodes=1, frames=8, size=OVERFIT_SIZE)
        manifest = dataset.build_manifest(root, {"train": ["ep01"]}, image_size=OVERFIT_SIZE)["train"]

        def harness(model, steps):
            cfg = TrainConfig(image_size=OVERFIT_SIZE, batch_size=8, epochs=steps, max_steps=steps, model=model,
                              g_base_width=OVERFIT_G_WIDTH, d_base_width=OVERFIT_D_WIDTH, lr_g=OVERFIT_LR,
                              extractor="tiny")
            ds = dataset.FrameSequenceDataset(manifest, seed=cfg.seed, p_blank=cfg.effective().p_blank)
            return Trainer(cfg, ds, extractor=losses.TinyExtractor(0))

        untrained = harness("ours", OVERFIT_STEPS).gen.eval()
        t = harness("ours", OVERFIT_STEPS)
        records = t.run()
        l1 = [r["l1"] for r in records]
        start, end = l1[0], float(np.mean(l1[-10:]))
        notes.append(f"{len(records)} steps, l1 {start:.4f} -> {end:.4f} ({end / start:.1%})")
        ssim_trained = evaluation.evaluate(t.gen.eval(), manifest, "chained").ssim
        ssim_untrained = evaluation.evaluate(untrained, manifest, "chained").ssim
        notes.append(f"ssim {ssim_untrained:.4f} -> {ssim_trained:.4f}")
        baseline = harness("unet_baseline", 20)
        base_records = baseline.run()
        assert len(base_records) == 20 and all(np.isfinite(r["total"]) for r in base_records)
        assert len(records) <= 2000
        assert end <= 0.5 * start
        assert ssim_trained > ssim_untrained


# -- 6 ---------------------------------------------------------------------------------------

def test_criterion_6_metric_oracles():
    with criterion(6, "metric oracles") as notes:
        zero, half, one = (np.full((3, 32, 32), v) for v in (0.0, 0.5, 1.0))
        assert abs(evaluation.psnr(zero, half) - 6.0206) <= 1e-3
        rnd = np.random.default_rng(0).random((3, 32, 32))
        assert abs(evaluation.ssim(rnd, rnd.copy()) - 1.0) <= 1e-6
        c1 = 0.01 ** 2
        assert abs(evaluation.ssim(zero, one) - c1 / (1 + c1)) <= 1e-6
        cov = np.array([[1.5, 0.2], [0.2, 0.7]])
        a = GaussianStats(np.zeros(2), cov, 10)
        assert abs(evaluation.frechet_distance(a, a)) <= 1e-6
        assert abs(evaluation.frechet_distance(a, GaussianStats(np.array([1.0, 0.0]), cov, 10)) - 1.0) <= 1e-6
        d = 8
        eye = GaussianStats(np.zeros(d), np.eye(d), 10)
        assert abs(evaluation.frechet_distance(eye, GaussianStats(np.zeros(d), 4 * np.eye(d), 10)) - d) <= 1e-6
        r = np.random.default_rng(5)
        mu_a, mu_b = r.normal(size=d), r.normal(size=d)
        var_a, var_b = r.uniform(0.5, 2, d), r.uniform(0.5, 2, d)
        sample_a = mu_a + np.sqrt(var_a) * r.normal(size=(10_000, d))
        sample_b = mu_b + np.sqrt(var_b) * r.normal(size=(10_000, d))
        mc, exact = evaluation.fid(sample_a, sample_b), gaussian_fid_closed_form(mu_a, var_a, mu_b, var_b)
        notes.append(f"monte-carlo fid {mc:.4f} vs closed form {exact:.4f}")
        assert abs(mc - exact) <= 0.05 * exact


# -- 7 ---------------------------------------------------------------------------------------

def test_criterion_7_canny_oracle():
    with criterion(7, "canny oracle") as notes:
        rng = np.random.default_rng(3)
        images = [imaging.to_greyscale(f)[0].astype(float) for s in range(4) for f in make_clip(2, 48, s)]
        for _ in range(6):
            im = rng.random(tuple(rng.integers(16, 65, 2)))
            im = ndimage.gaussian_filter(im, rng.uniform(0.5, 2.5))
            images.append((im - im.min()) / np.ptp(im))
        assert len(images) >= 10 and all(max(im.shape) <= 64 for im in images)
        rates = [float(np.mean(imaging.canny_edges(im, 1.0, imaging.CANNY_LOW, imaging.CANNY_HIGH)
                               != sk_canny(im, sigma=1.0, low_threshold=imaging.CANNY_LOW,
                                           high_threshold=imaging.CANNY_HIGH)))
                 for im in images]
        notes.append(f"{len(images)} images, worst disagreement {max(rates):.2%}")
        assert max(rates) <= 0.01


# -- 8 ---------------------------------------------------------------------------------------

CLI_CONFIG = """\
[data]
image_size = 32
splits = {train = ["ep01"], val = ["ep02"]}

[train]
batch_size = 4
checkpoint_every = 2
g_base_width = 4
d_base_width = 4
extractor = "tiny"

[eval]
fid_features = "random"
"""


def test_criterion_8_reproducibility(tmp_path, monkeypatch):
    with criterion(8, "reproducibility") as notes:
        monkeypatch.chdir(tmp_path)
        write_corpus(tmp_path / "corpus", episodes=2, frames=8, size=32)
        (tmp_path / "c.toml").write_text(CLI_CONFIG)
        assert cli.main(["prepare", "--config", "c.toml", "--root", "corpus", "--out", "prep"]) == 0
        for name in ("a", "b"):
            assert cli.main(["train", "--config", "c.toml", "--data", "prep", "--seed", "3", "--epochs", "4",
                             "--run-dir", name]) == 0
            assert cli.main(["evaluate", "--config", "c.toml", "--data", "prep", "--seed", "3",
                             "--weights", f"{name}/generator.pt", "--out", f"rep_{name}"]) == 0
        assert (tmp_path / "a" / "log.csv").read_bytes() == (tmp_path / "b" / "log.csv").read_bytes()
        for f in ("report.txt", "report.json"):
            assert (tmp_path / "rep_a" / f).read_bytes() == (tmp_path / "rep_b" / f).read_bytes()
        json.loads((tmp_path / "rep_a" / "report.json").read_text())

        assert cli.main(["train", "--config", "c.toml", "--data", "prep", "--seed", "3", "--epochs", "4",
                         "--run-dir", "c", "--resume", "a/ckpt_2.pt"]) == 0
        full = (tmp_path / "a" / "log.csv").read_text().splitlines()
        resumed = (tmp_path / "c" / "log.csv").read_text().splitlines()
        # rows 3.. come from the resumed process; 8 steps in total
        assert len(full) == 9 and resumed == full
        notes.append(f"resume reproduced steps 3-8 ({len(full) - 3} rows) bitwise")
