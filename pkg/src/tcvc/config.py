"""TOML run configuration shared by all CLI commands."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli_w

from .dataset import DEFAULT_SPLITS
from .errors import TCVCError
from .losses import LossWeights
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# TrainConfig fields that live elsewhere in the file
_TRAIN_SHARED = {"seed", "mode", "model", "weights", "image_size"}
TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name not in _TRAIN_SHARED]


class ConfigError(TCVCError, ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None
    prepared: str = "prepared"
    image_size: int = 256
    splits: dict = field(default_factory=lambda: dict(DEFAULT_SPLITS))
    split_seed: int | None = None
    lineart_cache: bool = True


@dataclass
class EvalConfig:
    split: str = "val"
    conditioning: str = "chained"
    fid_features: str = "inception"


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "lineart"
    model: str = "ours"
    name: str = "default"
    runs_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, mode=self.mode, model=self.model, weights=self.loss,
                           image_size=self.data.image_size, **self.train)

    def effective(self) -> "RunConfig":
        """The configuration the run actually uses (the baseline overrides some settings)."""
        eff = self.train_config().effective()
        train = {**self.train, "p_blank": eff.p_blank}
        return replace(self, loss=eff.weights, train=train)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = {k: v for k, v in asdict(self.train_config()).items() if k in TRAIN_KEYS}
        d["train"]["adam_betas"] = list(d["train"]["adam_betas"])
        return _drop_none(d)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def _section(cls, values, name):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}]: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    train = d.pop("train", {})
    if not isinstance(train, dict):
        raise ConfigError("[train] must be a table")
    bad = sorted(set(train) - set(TRAIN_KEYS))
    if bad:
        raise ConfigError(f"unknown key(s) in [train]: {', '.join(bad)}")
    cfg = RunConfig(
        data=_section(DataConfig, d.pop("data", {}), "data"),
        loss=_section(LossWeights, d.pop("loss", {}), "loss"),
        eval=_section(EvalConfig, d.pop("eval", {}), "eval"),
        train=dict(train),
        **d,
    )
    try:
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training configuration: {exc}") from exc
    return cfg


def load(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply CLI overrides given as dotted keys (``train.epochs``); ``None`` means unset."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split(".")
        target = d
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        target[parts[-1]] = value
    return from_dict(d)
