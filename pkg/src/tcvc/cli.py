"""Command line entry point: ``tcvc {prepare,train,colorize,evaluate}``.

Exit codes: 0 success, 1 internal or numerical failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import dataset, evaluation, imaging, inference, losses, trainer
from .errors import (CheckpointError, DatasetError, ExtractorUnavailableError, NonFiniteLossError,
                     TCVCError)

log = logging.getLogger("tcvc")

PREPARE_META = "prepare.json"


class UsageError(TCVCError):
    pass


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=dataset.MODES)
    p.add_argument("--model", choices=trainer.MODELS)
    p.add_argument("-v", "--verbose", action="store_true")


def _load_config(args, **extra) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    return config_mod.with_overrides(cfg, seed=args.seed, mode=args.mode, model=args.model, **extra)


def cmd_prepare(args) -> int:
    cfg = _load_config(args, **{"data.root": args.root, "data.prepared": args.out,
                                "data.image_size": args.size})
    if not cfg.data.root:
        raise UsageError("prepare needs a frame corpus: --root or [data] root")
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise DatasetError(f"frame corpus not found: {root}")
    out = Path(cfg.data.prepared)
    manifests = dataset.build_manifest(root, cfg.data.splits, cfg.mode, cfg.data.image_size,
                                       seed=cfg.data.split_seed)
    mdir = out / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    for old in mdir.glob("*.txt"):
        if old.stem not in manifests:
            old.unlink()
    for split, manifest in manifests.items():
        manifest.save(mdir / f"{split}.txt")
    cached = 0
    if cfg.data.lineart_cache and not args.no_cache:
        for manifest in manifests.values():
            for i, entry in enumerate(manifest.entries):
                line = imaging.synthesize_lineart(manifest.load_color(i))
                imaging.save_png(dataset.lineart_cache_path(out / "lineart", entry), line)
                cached += 1
    meta = {"root": str(root.resolve()), "image_size": cfg.data.image_size,
            "splits": {k: len(v) for k, v in manifests.items()},
            "lineart_cache": cached > 0}
    (out / PREPARE_META).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"prepared {sum(map(len, manifests.values()))} frames in {len(manifests)} split(s) "
          f"({cached} line-art files) under {out}")
    return 0


def load_prepared(path, split: str, mode: str, image_size: int):
    """Manifest for ``split`` of a prepared directory, plus its line-art cache dir."""
    path = Path(path)
    meta_path = path / PREPARE_META
    if not meta_path.exists():
        raise DatasetError(f"no prepared dataset at {path} (run `tcvc prepare` first)")
    meta = json.loads(meta_path.read_text())
    mpath = path / "manifests" / f"{split}.txt"
    if not mpath.exists():
        raise DatasetError(f"prepared dataset {path} has no {split!r} split")
    manifest = dataset.DatasetManifest.load(mpath, root=meta["root"])
    manifest.mode = mode
    manifest.image_size = image_size
    cache = path / "lineart" if meta.get("lineart_cache") else None
    return manifest, cache


def cmd_train(args) -> int:
    overrides = {"data.prepared": args.data, "train.epochs": args.epochs, "train.max_steps": args.max_steps,
                 "train.batch_size": args.batch_size, "name": args.name}
    cfg = _load_config(args, **overrides)
    tcfg = cfg.train_config()
    manifest, cache = load_prepared(cfg.data.prepared, "train", cfg.mode, cfg.data.image_size)
    run_dir = Path(args.run_dir) if args.run_dir else Path(cfg.runs_dir) / cfg.name
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.effective().save(run_dir / "config.toml")
    except OSError as exc:
        raise UsageError(f"run directory {run_dir} is not writable: {exc}") from exc
    _seed_everything(cfg.seed)
    t = trainer.train(tcfg, {"train": manifest}, run_dir=run_dir, lineart_cache=cache,
                      resume_from=args.resume)
    last = trainer.checkpoint_path(run_dir, t.step)
    trainer_weights = run_dir / "generator.pt"
    from .networks import save_weights
    save_weights(t.gen, trainer_weights)
    print(f"trained {t.step} steps; checkpoint {last}; generator weights {trainer_weights}")
    return 0


def _sorted_frames(input_dir: Path):
    files = [p for p in input_dir.iterdir() if p.is_file() and p.suffix.lower() in dataset.IMAGE_SUFFIXES]
    return sorted(files, key=lambda p: dataset._natural_key(p.name))


def cmd_colorize(args) -> int:
    gen, meta = inference.load_generator(args.weights)
    input_dir = Path(args.input)
    if not input_dir.is_dir():
        raise DatasetError(f"input directory not found: {input_dir}")
    files = _sorted_frames(input_dir)
    if not files:
        raise DatasetError(f"no frame images in {input_dir}")
    size = args.size or meta.get("image_size")
    lines = []
    for f in files:
        frame = imaging.load_png(f, channels=1)
        if args.from_color:
            frame = dataset.input_frame(imaging.load_png(f, channels=3), args.mode or meta.get("mode", "lineart"))
        if size and frame.shape[1:] != (size, size):
            frame = imaging.resize(frame, size, size)
        lines.append(torch.from_numpy(imaging.to_model_space(frame)))
    outs = inference.colorize_sequence(gen, lines)
    out_dir = Path(args.out)
    stored = [np.clip(imaging.to_storage_space(o.numpy()), 0.0, 1.0) for o in outs]
    for f, frame in zip(files, stored):
        imaging.save_png(out_dir / f"{f.stem}.png", frame)
    if args.contact_sheet:
        inference.emit_contact_sheet(stored, out_dir / "contact_sheet.png", columns=args.columns)
    print(f"colorized {len(files)} frames into {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args, **{"data.prepared": args.data, "eval.split": args.split,
                                "eval.conditioning": args.conditioning,
                                "eval.fid_features": args.fid_features})
    if args.self_check:
        gen, meta = None, {}
    elif args.weights:
        gen, meta = inference.load_generator(args.weights)
    else:
        raise UsageError("evaluate needs --weights (or --self-check)")
    mode = args.mode or meta.get("mode", cfg.mode)
    model = args.model or meta.get("model", cfg.model)
    size = meta.get("image_size", cfg.data.image_size)
    manifest, cache = load_prepared(cfg.data.prepared, cfg.eval.split, mode, size)
    _seed_everything(cfg.seed)
    features = evaluation.build_fid_features(cfg.eval.fid_features, seed=cfg.seed)
    report = evaluation.evaluate(gen, manifest, cfg.eval.conditioning, features, model=model,
                                 lineart_cache=cache)
    txt, js = evaluation.write_report([report], args.out)
    print(txt.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcvc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a frame corpus, write manifests and a line-art cache")
    _common(p)
    p.add_argument("--root", help="corpus directory: <root>/<episode>/<frame_number>.png")
    p.add_argument("--out", help="output directory (default: [data] prepared)")
    p.add_argument("--size", type=int, help="frame size in pixels")
    p.add_argument("--no-cache", action="store_true", help="skip the line-art cache")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a colorization model")
    _common(p)
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--run-dir", help="run directory (default: <runs_dir>/<name>)")
    p.add_argument("--name")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("colorize", help="colour an ordered directory of line-art frames")
    _common(p)
    p.add_argument("--weights", required=True, help="generator weights or training checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="working size (default: the training size)")
    p.add_argument("--from-color", action="store_true",
                   help="inputs are colour frames; synthesize the generator input first")
    p.add_argument("--contact-sheet", action="store_true")
    p.add_argument("--columns", type=int)
    p.set_defaults(func=cmd_colorize)

    p = sub.add_parser("evaluate", help="score a model with FID, SSIM and PSNR")
    _common(p)
    p.add_argument("--weights")
    p.add_argument("--data", help="prepared dataset directory")
    p.add_argument("--split")
    p.add_argument("--conditioning", choices=evaluation.CONDITIONING)
    p.add_argument("--fid-features", choices=("inception", "random"))
    p.add_argument("--out", required=True)
    p.add_argument("--self-check", action="store_true",
                   help="score the ground truth against itself instead of a model")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        log.error("%s; last record: %s", exc, exc.record)
        return 1
    except (UsageError, config_mod.ConfigError, DatasetError, CheckpointError, ExtractorUnavailableError,
            imaging.ImageReadError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
