"""Alternating discriminator / generator training with checkpoint and resume."""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from . import losses, networks
from .dataset import FrameSequenceDataset, collate_samples
from .errors import CheckpointError, DatasetError, NonFiniteLossError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tcvc-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "adv_g", "adv_d", "content", "style", "l1", "total")
MODELS = ("ours", "unet_baseline")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 35
    lr_g: float = 1e-4
    lr_d: float | None = None  # None: one tenth of lr_g
    adam_betas: tuple = (0.9, 0.999)
    seed: int = 0
    mode: str = "lineart"
    model: str = "ours"
    checkpoint_every: int = 1000
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    p_blank: float = 0.5
    image_size: int = 256
    g_base_width: int = 64
    d_base_width: int = 64
    d_sees_input: bool = False
    extractor: str = "vgg19"
    extractor_checkpoint: str | None = None
    grad_clip: float | None = None
    max_steps: int | None = None
    num_workers: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = losses.LossWeights(**self.weights)
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.lr_g <= 0 or (self.lr_d is not None and self.lr_d <= 0):
            raise ValueError("learning rates must be positive")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.mode not in ("lineart", "greyscale"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    @property
    def discriminator_lr(self) -> float:
        return self.lr_g / 10 if self.lr_d is None else self.lr_d

    def effective(self) -> "TrainConfig":
        """The baseline drops the temporal condition and the content and style terms."""
        if self.model != "unet_baseline":
            return self
        w = replace(self.weights, lambda_content=0.0, lambda_style=0.0)
        return replace(self, weights=w, p_blank=1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def generator_spec(config: TrainConfig) -> networks.GeneratorSpec:
    if config.model == "unet_baseline":
        return networks.unet_spec_for(config.image_size, config.g_base_width)
    return networks.GeneratorSpec(base_width=config.g_base_width)


def discriminator_spec(config: TrainConfig) -> networks.DiscriminatorSpec:
    return networks.DiscriminatorSpec(input_channels=6 + int(config.d_sees_input),
                                      base_width=config.d_base_width)


def build_models(config: TrainConfig):
    gen = networks.build_generator(generator_spec(config), seed=config.seed)
    disc = networks.build_discriminator(discriminator_spec(config), seed=config.seed + 1)
    return gen, disc


def build_optimizers(config: TrainConfig, gen, disc):
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.discriminator_lr, betas=config.adam_betas)
    return opt_g, opt_d


def train_step(batch, gen, disc, opt_g, opt_d, weights: losses.LossWeights, extractor=None,
               mode: str = "lineart", grad_clip=None, d_sees_input: bool = False, step: int = 0) -> dict:
    """One discriminator update followed by one generator update.

    Returns the per-term loss record.  Raises :class:`NonFiniteLossError`
    before any parameter changes if a loss is not finite.
    """
    gen.train()
    disc.train()
    d_cond = torch.cat([batch.condition, batch.input], 1) if d_sees_input else batch.condition
    fake = gen(batch.input, batch.condition)

    d_real = disc(batch.target, d_cond)
    d_fake = disc(fake.detach(), d_cond)
    loss_d = losses.adversarial_loss_d(d_real, d_fake)
    _check_finite({"step": step, "adv_d": loss_d.item()})
    opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(disc.parameters(), grad_clip)
    opt_d.step()

    w = losses.effective_weights(weights, mode)
    adv = losses.adversarial_loss_g(disc(fake, d_cond))
    content = losses.content_loss(extractor, fake, batch.target) if w["content"] > 0 else None
    style = losses.style_loss(extractor, fake, batch.target) if w["style"] > 0 else None
    l1 = losses.l1_loss(fake, batch.target)
    total, terms = losses.joint_generator_loss(weights, adv, content, style, l1, mode)

    record = {"step": step, "adv_g": adv.item(), "adv_d": loss_d.item(),
              "content": 0.0 if content is None else content.item(),
              "style": 0.0 if style is None else style.item(),
              "l1": l1.item(), "total": total.item()}
    _check_finite(record)
    opt_g.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(gen.parameters(), grad_clip)
    opt_g.step()
    return record


def _check_finite(record: dict):
    bad = [k for k, v in record.items() if k != "step" and not math.isfinite(v)]
    if bad:
        raise NonFiniteLossError(f"non-finite loss at step {record.get('step')}: {bad}", record)


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / f"ckpt_{step}.pt"


def latest_checkpoint(run_dir):
    found = []
    for p in Path(run_dir).glob("ckpt_*.pt"):
        m = re.fullmatch(r"ckpt_(\d+)\.pt", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def read_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {ckpt.get('version')}")
    return ckpt


class Trainer:
    """Owns the models, optimizers, step counter and loss log of one run."""

    def __init__(self, config: TrainConfig, dataset: FrameSequenceDataset, extractor=None,
                 run_dir=None):
        self.config = config
        self.effective = config.effective()
        self.dataset = dataset
        self.dataset.p_blank = self.effective.p_blank
        self.run_dir = Path(run_dir) if run_dir else None
        w = losses.effective_weights(self.effective.weights, config.mode)
        if extractor is None and (w["content"] > 0 or w["style"] > 0):
            extractor = losses.build_extractor(config.extractor, config.extractor_checkpoint)
        self.extractor = extractor
        torch.manual_seed(config.seed)
        self.gen, self.disc = build_models(config)
        self.opt_g, self.opt_d = build_optimizers(config, self.gen, self.disc)
        self.step = 0
        self.records = []

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        total = self.steps_per_epoch * self.config.epochs
        return min(total, self.config.max_steps) if self.config.max_steps else total

    def epoch_batches(self, epoch: int) -> list:
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.dataset))
        bs = self.config.batch_size
        return [order[i:i + bs].tolist() for i in range(0, len(order), bs)]

    def train_step(self, batch) -> dict:
        record = train_step(batch, self.gen, self.disc, self.opt_g, self.opt_d, self.effective.weights,
                            self.extractor, self.config.mode, self.config.grad_clip,
                            self.config.d_sees_input, step=self.step + 1)
        self.step += 1
        self.records.append(record)
        if self.run_dir:
            self._append_log(record)
        return record

    def run(self, until: int | None = None) -> list:
        """Train up to step ``until`` (default: the configured budget)."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        if self.run_dir:
            self._init_log()
        spe = self.steps_per_epoch
        while self.step < until:
            epoch, done = divmod(self.step, spe)
            self.dataset.set_epoch(epoch)
            batches = self.epoch_batches(epoch)[done:][: until - self.step]
            loader = DataLoader(self.dataset, batch_sampler=batches, collate_fn=collate_samples,
                                num_workers=self.config.num_workers)
            for batch in loader:
                record = self.train_step(batch)
                log.debug("step %d: %s", self.step, record)
                if self.run_dir and self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                    self.save_checkpoint()
        if self.run_dir and not checkpoint_path(self.run_dir, self.step).exists():
            self.save_checkpoint()
        return self.records

    def _init_log(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        # rewritten from the in-memory records so a resumed run stays monotone
        with open(self.run_dir / "log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow(_log_row(r))

    def _append_log(self, record):
        with open(self.run_dir / "log.csv", "a", newline="") as fh:
            csv.writer(fh).writerow(_log_row(record))

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "generator": networks.weights_archive(self.gen),
            "discriminator": networks.weights_archive(self.disc),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "torch_rng": torch.get_rng_state(),
            "log": [[r[c] for c in LOG_COLUMNS] for r in self.records],
        }

    def load_state_dict(self, ckpt: dict):
        networks.load_state_checked(self.gen, ckpt["generator"]["tensors"])
        networks.load_state_checked(self.disc, ckpt["discriminator"]["tensors"])
        self.opt_g.load_state_dict(ckpt["opt_g"])
        self.opt_d.load_state_dict(ckpt["opt_d"])
        self.step = int(ckpt["step"])
        torch.set_rng_state(ckpt["torch_rng"])
        self.records = [dict(zip(LOG_COLUMNS, row)) for row in ckpt["log"]]

    def save_checkpoint(self, path=None) -> Path:
        path = Path(path) if path else checkpoint_path(self.run_dir, self.step)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def resume(cls, path, dataset, extractor=None, run_dir=None) -> "Trainer":
        ckpt = read_checkpoint(path)
        config = config_from_dict(ckpt["config"])
        trainer = cls(config, dataset, extractor=extractor, run_dir=run_dir)
        trainer.load_state_dict(ckpt)
        return trainer


def _log_row(record) -> list:
    return [int(record["step"])] + [repr(float(record[c])) for c in LOG_COLUMNS[1:]]


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["weights"] = losses.LossWeights(**d["weights"])
    return TrainConfig(**d)


def train(config: TrainConfig, manifests, run_dir=None, extractor=None, lineart_cache=None,
          resume_from=None) -> Trainer:
    """Train on ``manifests['train']`` and return the finished :class:`Trainer`."""
    manifest = manifests["train"] if isinstance(manifests, dict) else manifests
    if manifest is None or len(manifest) == 0:
        raise DatasetError("training manifest is empty")
    if manifest.image_size != config.image_size:
        raise DatasetError(f"manifest image_size {manifest.image_size} differs from the "
                           f"configured {config.image_size}")
    dataset = FrameSequenceDataset(manifest, seed=config.seed, p_blank=config.effective().p_blank,
                                   lineart_cache=lineart_cache)
    if resume_from:
        trainer = Trainer.resume(resume_from, dataset, extractor=extractor, run_dir=run_dir)
    else:
        trainer = Trainer(config, dataset, extractor=extractor, run_dir=run_dir)
    trainer.run()
    return trainer
