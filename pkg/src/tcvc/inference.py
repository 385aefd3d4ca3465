"""Sequential colorization: every generated frame conditions the next one."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch

from . import imaging, networks
from .errors import CheckpointError, ShapeMismatchError


def load_generator(path):
    """Load a generator from a weights archive or a training checkpoint.

    Returns ``(generator, meta)``; ``meta`` carries the training config
    (image size, mode, model) when the file is a checkpoint, else ``{}``.
    """
    try:
        archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"weights file not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read weights {path}: {exc}") from exc
    meta = {}
    if isinstance(archive, dict) and "generator" in archive and "config" in archive:
        meta = dict(archive["config"])
        archive = archive["generator"]
    gen = networks.model_from_archive(archive)
    if not isinstance(gen, (networks.ResidualGenerator, networks.UNetGenerator)):
        raise CheckpointError(f"{path} does not hold a generator")
    return gen.eval(), meta


def _tensor(x):
    return x if torch.is_tensor(x) else torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


@torch.no_grad()
def colorize_frame(gen, line, condition):
    """Colour one frame: ``line`` is (1, H, W), ``condition`` (3, H, W), both model space."""
    if gen is None:
        raise CheckpointError("no generator loaded")
    line, condition = _tensor(line), _tensor(condition)
    if line.dim() != 3 or line.shape[0] != 1:
        raise ShapeMismatchError(f"line art must be (1, H, W), got {tuple(line.shape)}")
    if condition.dim() != 3 or condition.shape[0] != 3:
        raise ShapeMismatchError(f"condition must be (3, H, W), got {tuple(condition.shape)}")
    if line.shape[1:] != condition.shape[1:]:
        raise ShapeMismatchError(f"line art {tuple(line.shape)} and condition {tuple(condition.shape)} differ in size")
    gen.eval()
    dtype = next(gen.parameters()).dtype
    out = gen(line[None].to(dtype), condition[None].to(dtype))[0]
    return out.to(line.dtype)


def colorize_sequence(gen, lineart_frames) -> list:
    """Colour an ordered sequence.  Frame 0 is conditioned on the blank frame,
    frame t on the generated frame t-1."""
    frames = list(lineart_frames)
    if not frames:
        raise ValueError("cannot colorize an empty sequence")
    _, h, w = _tensor(frames[0]).shape
    condition = torch.from_numpy(imaging.blank_frame(3, h, w))
    out = []
    for line in frames:
        condition = colorize_frame(gen, line, condition)
        out.append(condition)
    return out


def _as_storage_array(frame) -> np.ndarray:
    arr = frame.detach().cpu().numpy() if torch.is_tensor(frame) else np.asarray(frame)
    return arr.astype(np.float32)


def contact_sheet(frames, columns: int | None = None, fill: float = 1.0) -> np.ndarray:
    """Tile storage-space frames row-major into one image."""
    arrays = [_as_storage_array(f) for f in frames]
    if not arrays:
        raise ValueError("contact sheet needs at least one frame")
    sizes = {a.shape[1:] for a in arrays}
    if len(sizes) != 1:
        raise ShapeMismatchError(f"frames differ in size: {sorted(sizes)}")
    channels = max(a.shape[0] for a in arrays)
    arrays = [np.repeat(a, channels, 0) if a.shape[0] != channels else a for a in arrays]
    columns = len(arrays) if columns is None else max(1, min(columns, len(arrays)))
    rows = math.ceil(len(arrays) / columns)
    h, w = arrays[0].shape[1:]
    sheet = np.full((channels, rows * h, columns * w), fill, dtype=np.float32)
    for i, a in enumerate(arrays):
        r, c = divmod(i, columns)
        sheet[:, r * h:(r + 1) * h, c * w:(c + 1) * w] = a
    return sheet


def emit_contact_sheet(frames, path, columns: int | None = None) -> np.ndarray:
    sheet = contact_sheet(frames, columns)
    imaging.save_png(path, sheet)
    return sheet
