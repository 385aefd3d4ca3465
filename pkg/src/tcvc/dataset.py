"""Frame-sequence manifests and (line art, previous frame, target) samples.

Layout on disk is ``root/<episode_id>/<frame_number>.png``.  Splits are made
of whole episodes so that validation and test frames come from episodes the
model never trains on.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset

from . import imaging
from .errors import DatasetError

MODES = ("lineart", "greyscale")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MANIFEST_MAGIC = "# tcvc-manifest v1"
DEFAULT_SPLITS = {"train": 0.8, "val": 0.1, "test": 0.1}


@dataclass(frozen=True)
class ManifestEntry:
    episode: str
    path: str  # relative to the corpus root, posix separators
    frame_number: int


@dataclass
class DatasetManifest:
    split: str
    entries: list
    mode: str = "lineart"
    image_size: int = 256
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_size < 3:
            raise ValueError(f"image size {self.image_size} too small")

    def __len__(self):
        return len(self.entries)

    def is_episode_start(self, index: int) -> bool:
        self._check_index(index)
        return index == 0 or self.entries[index - 1].episode != self.entries[index].episode

    def episodes(self) -> list:
        """Entry indices grouped by episode, in manifest order."""
        groups, current = [], None
        for i, entry in enumerate(self.entries):
            if entry.episode != current:
                groups.append([])
                current = entry.episode
            groups[-1].append(i)
        return groups

    def _check_index(self, index: int):
        if not 0 <= index < len(self.entries):
            raise IndexError(f"index {index} out of range for manifest of {len(self.entries)} frames")

    def frame_path(self, index: int) -> Path:
        self._check_index(index)
        if self.root is None:
            raise DatasetError("manifest has no corpus root attached")
        return Path(self.root) / self.entries[index].path

    def load_color(self, index: int) -> np.ndarray:
        """Ground-truth frame in storage space, resized to ``image_size``."""
        frame = imaging.load_png(self.frame_path(index), channels=3)
        return imaging.resize(frame, self.image_size, self.image_size)

    def to_text(self) -> str:
        lines = [MANIFEST_MAGIC, f"# split: {self.split}", f"# mode: {self.mode}",
                 f"# image_size: {self.image_size}"]
        lines += [f"{e.episode}\t{e.path}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path, root=None) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        if not lines or lines[0] != MANIFEST_MAGIC:
            raise DatasetError(f"{path} is not a manifest file")
        header, entries = {}, []
        for n, line in enumerate(lines[1:], start=2):
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
            elif line.strip():
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DatasetError(f"{path}:{n}: expected 'episode<TAB>path'")
                episode, rel = parts
                entries.append(ManifestEntry(episode, rel, _frame_number(Path(rel))))
        try:
            return cls(header["split"], entries, header["mode"], int(header["image_size"]), root)
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{path}: bad manifest header: {exc}") from exc


def _frame_number(path: Path) -> int:
    if not re.fullmatch(r"\d+", path.stem):
        raise DatasetError(f"frame file name is not a frame number: {path}")
    return int(path.stem)


def _natural_key(name: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", name)]


def scan_episode(root: Path, episode: str) -> list:
    files = [p for p in sorted((root / episode).iterdir())
             if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    if not files:
        raise DatasetError(f"episode {episode!r} contains no frame images")
    numbered = sorted(((_frame_number(p), p) for p in files), key=lambda t: t[0])
    for (a, pa), (b, pb) in zip(numbered, numbered[1:]):
        if a == b:
            raise DatasetError(f"episode {episode!r}: frames {pa.name} and {pb.name} share number {a}")
    return [ManifestEntry(episode, p.relative_to(root).as_posix(), n) for n, p in numbered]


def _allocate(n: int, fractions: dict) -> dict:
    """Split ``n`` episodes by fractions (largest remainder), giving every
    positive-fraction split at least one episode when there are enough."""
    total = sum(fractions.values())
    if total <= 0 or any(f < 0 for f in fractions.values()):
        raise ValueError(f"invalid split fractions {fractions}")
    exact = {k: n * f / total for k, f in fractions.items()}
    counts = {k: math.floor(v) for k, v in exact.items()}
    by_remainder = sorted(fractions, key=lambda k: (-(exact[k] - counts[k]), list(fractions).index(k)))
    for k in by_remainder[: n - sum(counts.values())]:
        counts[k] += 1
    for k in fractions:
        if fractions[k] > 0 and counts[k] == 0:
            donor = max(counts, key=lambda d: counts[d])
            if counts[donor] > 1:
                counts[donor] -= 1
                counts[k] += 1
    return counts


def build_manifest(root, split_spec=None, mode: str = "lineart", image_size: int = 256,
                   seed=None) -> dict:
    """Scan ``root`` and return ``{split: DatasetManifest}`` for every non-empty split.

    ``split_spec`` maps split names either to lists of episode ids or to
    fractions.  With fractions, episodes are assigned in natural order
    (held-out splits take the last episodes) unless ``seed`` is given, in
    which case the episode order is shuffled with that seed first.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root not found: {root}")
    episodes = sorted((p.name for p in root.iterdir() if p.is_dir()), key=_natural_key)
    if not episodes:
        raise DatasetError(f"no episode directories under {root}")
    split_spec = dict(split_spec or DEFAULT_SPLITS)

    if all(isinstance(v, (list, tuple)) for v in split_spec.values()):
        assignment = {k: [str(e) for e in v] for k, v in split_spec.items()}
        seen = {}
        for split, eps in assignment.items():
            for ep in eps:
                if ep not in episodes:
                    raise DatasetError(f"split {split!r} names unknown episode {ep!r}")
                if ep in seen:
                    raise DatasetError(f"episode {ep!r} assigned to both {seen[ep]!r} and {split!r}")
                seen[ep] = split
    elif all(isinstance(v, (int, float)) for v in split_spec.values()):
        order = list(episodes)
        if seed is not None:
            order = [order[i] for i in np.random.default_rng(seed).permutation(len(order))]
        counts = _allocate(len(order), {k: float(v) for k, v in split_spec.items()})
        assignment, start = {}, 0
        for split, count in counts.items():
            assignment[split] = order[start:start + count]
            start += count
    else:
        raise ValueError("split_spec values must be all episode lists or all fractions")

    manifests = {}
    for split, eps in assignment.items():
        entries = [e for ep in eps for e in scan_episode(root, ep)]
        if entries:
            manifests[split] = DatasetManifest(split, entries, mode, image_size, root)
    return manifests


@dataclass
class Sample:
    input: torch.Tensor  # (1, H, W) line art or greyscale, model space
    condition: torch.Tensor  # (3, H, W) previous colour frame or blank
    target: torch.Tensor  # (3, H, W)
    index: int


@dataclass
class Batch:
    input: torch.Tensor
    condition: torch.Tensor
    target: torch.Tensor
    index: torch.Tensor

    def __len__(self):
        return self.input.shape[0]

    def to(self, dtype=None, device=None):
        return Batch(self.input.to(device=device, dtype=dtype), self.condition.to(device=device, dtype=dtype),
                     self.target.to(device=device, dtype=dtype), self.index)


def collate_samples(samples) -> Batch:
    return Batch(torch.stack([s.input for s in samples]), torch.stack([s.condition for s in samples]),
                 torch.stack([s.target for s in samples]), torch.tensor([s.index for s in samples]))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, index); worker layout never changes a draw."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def sample_condition(manifest: DatasetManifest, index: int, rng, p_blank: float = 0.5,
                     load=None) -> np.ndarray:
    """Previous ground-truth frame (model space) or the blank frame.

    Episode starts are always blank; elsewhere a Bernoulli(``p_blank``) draw
    picks blank.
    """
    if not 0.0 <= p_blank <= 1.0:
        raise ValueError(f"p_blank must be in [0, 1], got {p_blank}")
    size = manifest.image_size
    draw = rng.random()
    if manifest.is_episode_start(index) or draw < p_blank:
        return imaging.blank_frame(3, size, size)
    load = load or manifest.load_color
    return imaging.to_model_space(load(index - 1))


def input_frame(color: np.ndarray, mode: str, **canny) -> np.ndarray:
    """Generator input (storage space) derived from a ground-truth frame."""
    if mode == "greyscale":
        return imaging.to_greyscale(color)
    return imaging.synthesize_lineart(color, **canny)


def make_sample(manifest: DatasetManifest, index: int, rng, p_blank: float = 0.5,
                load=None, load_input=None, **canny) -> Sample:
    load = load or manifest.load_color
    color = load(index)
    source = load_input(index) if load_input is not None else None
    if source is None:
        source = input_frame(color, manifest.mode, **canny)
    condition = sample_condition(manifest, index, rng, p_blank, load=load)
    return Sample(
        input=torch.from_numpy(imaging.to_model_space(source).astype(np.float32)),
        condition=torch.from_numpy(condition.astype(np.float32)),
        target=torch.from_numpy(imaging.to_model_space(color).astype(np.float32)),
        index=index,
    )


def lineart_cache_path(cache_dir, entry: ManifestEntry) -> Path:
    return Path(cache_dir) / entry.episode / f"{Path(entry.path).stem}.png"


class FrameSequenceDataset(Dataset):
    """Map-style dataset of :class:`Sample` with per-epoch Bernoulli conditions."""

    def __init__(self, manifest: DatasetManifest, seed: int = 0, p_blank: float = 0.5,
                 lineart_cache=None, cache_frames: bool = True, canny=None):
        if len(manifest) == 0:
            raise DatasetError(f"manifest {manifest.split!r} is empty")
        self.manifest = manifest
        self.seed = seed
        self.p_blank = p_blank
        self.epoch = 0
        self.lineart_cache = Path(lineart_cache) if lineart_cache else None
        self.canny = dict(canny or {})
        self._frames = {} if cache_frames else None

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.manifest)

    def color(self, index: int) -> np.ndarray:
        if self._frames is None:
            return self.manifest.load_color(index)
        if index not in self._frames:
            self._frames[index] = self.manifest.load_color(index)
        return self._frames[index]

    def cached_input(self, index: int):
        if self.lineart_cache is None or self.manifest.mode != "lineart":
            return None
        path = lineart_cache_path(self.lineart_cache, self.manifest.entries[index])
        if not path.exists():
            return None
        frame = imaging.load_png(path, channels=1)
        if frame.shape[1:] != (self.manifest.image_size,) * 2:
            return None
        return frame

    def __getitem__(self, index: int) -> Sample:
        rng = sample_rng(self.seed, self.epoch, index)
        return make_sample(self.manifest, index, rng, self.p_blank, load=self.color,
                           load_input=self.cached_input, **self.canny)
