"""PSNR, SSIM and FID, plus the per-model report table."""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import imaging, inference
from .dataset import DatasetManifest, input_frame, lineart_cache_path
from .errors import ExtractorUnavailableError, ImageTooSmallError, ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CONDITIONING = ("chained", "gt_prev")
MODEL_LABELS = {"ours": "Ours", "unet_baseline": "Baseline"}
MODE_LABELS = {"greyscale": "Greyscale", "lineart": "Line art"}


def _array(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(pred, gt, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-0.5 * (x / sigma) ** 2)
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def _luma(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3 and x.shape[0] == 3:
        r, g, b = imaging.LUMA_WEIGHTS
        return r * x[0] + g * x[1] + b * x[2]
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    if x.ndim == 2:
        return x
    raise ShapeMismatchError(f"expected (1|3, H, W) or (H, W) frame, got {x.shape}")


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows of the luma channel."""
    pred, gt = _array(pred), _array(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    x = torch.from_numpy(_luma(pred))[None, None]
    y = torch.from_numpy(_luma(gt))[None, None]
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ImageTooSmallError(f"frame {tuple(x.shape[-2:])} smaller than the {SSIM_WINDOW}px SSIM window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(a):
        return F.conv2d(a, win)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.mean.ndim != 1 or self.cov.shape != (d, d):
            raise ShapeMismatchError(f"mean {self.mean.shape} and covariance {self.cov.shape} disagree")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.cov))):
            raise ValueError("Gaussian statistics must be finite")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10, rtol=1e-8):
            raise ValueError("covariance must be symmetric")
        if self.count < 2:
            raise ValueError(f"need at least 2 samples, got {self.count}")

    @classmethod
    def from_features(cls, rows) -> "GaussianStats":
        return MomentAccumulator().update(rows).stats()


class MomentAccumulator:
    """Single-pass mean/covariance accumulator whose shards merge exactly
    (pairwise update of count, mean and centred scatter)."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.scatter = None

    def update(self, rows) -> "MomentAccumulator":
        rows = np.atleast_2d(_array(rows))
        if rows.shape[0] == 0:
            return self
        other = MomentAccumulator()
        other.count = rows.shape[0]
        other.mean = rows.mean(axis=0)
        centred = rows - other.mean
        other.scatter = centred.T @ centred
        return self.merge(other)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.scatter = other.count, other.mean.copy(), other.scatter.copy()
            return self
        if other.mean.shape != self.mean.shape:
            raise ShapeMismatchError("feature dimensions differ between shards")
        n = self.count + other.count
        delta = other.mean - self.mean
        self.scatter = self.scatter + other.scatter + np.outer(delta, delta) * (self.count * other.count / n)
        self.mean = self.mean + delta * (other.count / n)
        self.count = n
        return self

    def stats(self) -> GaussianStats:
        if self.count < 2:
            raise ValueError(f"need at least 2 samples for covariance, got {self.count}")
        cov = self.scatter / (self.count - 1)
        return GaussianStats(self.mean.copy(), (cov + cov.T) / 2, self.count)


def _psd_sqrt(mat: np.ndarray, label: str):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    if vals.min() < -1e-3:
        warnings.warn(f"{label} has a negative eigenvalue {vals.min():.3g}; clipped to 0", RuntimeWarning)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T, vals


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of the matrix square root comes from the eigenvalues of the
    symmetric product ``S_a^{1/2} S_b S_a^{1/2}``.
    """
    if a.mean.shape != b.mean.shape:
        raise ShapeMismatchError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    root_a, _ = _psd_sqrt(a.cov, "covariance")
    _, vals = _psd_sqrt(root_a @ b.cov @ root_a, "covariance product")
    tr_sqrt = float(np.sqrt(vals).sum())
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)


def fid(features_pred, features_real) -> float:
    pred, real = np.atleast_2d(_array(features_pred)), np.atleast_2d(_array(features_real))
    if pred.shape[0] < 2 or real.shape[0] < 2:
        raise ValueError("FID needs at least 2 feature rows per set")
    return frechet_distance(GaussianStats.from_features(pred), GaussianStats.from_features(real))


class RandomFeatures(nn.Module):
    """Seeded random conv net with global average pooling; offline FID features."""

    def __init__(self, seed: int = 0, dim: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, dim]
        self.convs = nn.ModuleList()
        for cin, cout in zip(widths, widths[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * cin)) ** 0.5, generator=gen)
                conv.bias.zero_()
            self.convs.append(conv)
        self.eval()

    @torch.no_grad()
    def forward(self, images):
        x = images * 2 - 1
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.mean(dim=(2, 3))


class InceptionFeatures(nn.Module):
    """2048-d pooled activations of an ImageNet-pretrained Inception-v3."""

    def __init__(self):
        super().__init__()
        from torchvision.models import Inception_V3_Weights, inception_v3

        cache = os.environ.get("TCVC_CACHE")
        if cache:
            torch.hub.set_dir(cache)
        try:
            net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        except Exception as exc:
            raise ExtractorUnavailableError(f"cannot load Inception-v3 weights: {exc}") from exc
        net.fc = nn.Identity()
        self.net = net.eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    @torch.no_grad()
    def forward(self, images):
        x = F.interpolate(images, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net((x - self.mean) / self.std)


def build_fid_features(name: str, seed: int = 0):
    if name == "inception":
        return InceptionFeatures()
    if name == "random":
        return RandomFeatures(seed)
    raise ValueError(f"unknown FID feature extractor {name!r}")


def image_features(extractor, frames, batch_size: int = 16) -> np.ndarray:
    """Feature rows for storage-space (3, H, W) frames."""
    rows = []
    for i in range(0, len(frames), batch_size):
        batch = torch.from_numpy(np.stack([np.asarray(f, np.float32) for f in frames[i:i + batch_size]]))
        rows.append(extractor(batch).double().numpy())
    return np.concatenate(rows)


@dataclass
class EvalReport:
    model: str
    mode: str
    conditioning: str
    frame_count: int
    fid: float | None
    ssim: float
    psnr: float
    psnr_identical: int = 0  # frames at +inf, excluded from the PSNR mean
    flicker: float | None = None
    flicker_gt: float | None = None
    per_frame: list = field(default_factory=list)

    def __post_init__(self):
        if self.frame_count <= 0:
            raise ValueError("report needs at least one frame")
        if self.fid is not None and self.fid < -1e-6:
            raise ValueError(f"FID {self.fid} is negative")

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("psnr",):
            d[key] = _json_float(d[key])
        for row in d["per_frame"]:
            row["psnr"] = _json_float(row["psnr"])
        return d


def _json_float(v):
    return "inf" if v == math.inf else v


def _flicker(frames, episodes) -> float | None:
    """Mean l1 between consecutive frames of the same episode."""
    diffs = [float(np.mean(np.abs(frames[i] - frames[i - 1])))
             for i in range(1, len(frames)) if episodes[i] == episodes[i - 1]]
    return float(np.mean(diffs)) if diffs else None


def evaluate_frames(preds, gts, episodes=None, model="ours", mode="lineart", conditioning="chained",
                    fid_features=None, paths=None) -> EvalReport:
    """Aggregate metrics for matched lists of storage-space predictions and ground truth."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equally many, and at least one, predicted and ground-truth frames")
    episodes = episodes or [""] * len(preds)
    rows, finite = [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        row = {"index": i, "episode": episodes[i], "psnr": psnr(p, g), "ssim": ssim(p, g)}
        if paths:
            row["path"] = paths[i]
        rows.append(row)
        if math.isfinite(row["psnr"]):
            finite.append(row["psnr"])
    fid_value = None
    if fid_features is not None and len(preds) >= 2:
        fid_value = fid(image_features(fid_features, preds), image_features(fid_features, gts))
        fid_value = max(fid_value, 0.0) if fid_value > -1e-6 else fid_value
    return EvalReport(
        model=model, mode=mode, conditioning=conditioning, frame_count=len(preds), fid=fid_value,
        ssim=float(np.mean([r["ssim"] for r in rows])),
        psnr=float(np.mean(finite)) if finite else math.inf,
        psnr_identical=len(rows) - len(finite),
        flicker=_flicker(preds, episodes), flicker_gt=_flicker(gts, episodes), per_frame=rows,
    )


def evaluate(gen, manifest: DatasetManifest, conditioning: str = "chained", fid_features=None,
             model: str = "ours", lineart_cache=None) -> EvalReport:
    """Colour every frame of ``manifest`` and score it against the ground truth.

    ``chained`` conditions each frame on the previous generated frame;
    ``gt_prev`` on the previous ground-truth frame.  Episode starts use the
    blank frame either way.  ``gen=None`` scores the ground truth against
    itself.
    """
    if conditioning not in CONDITIONING:
        raise ValueError(f"conditioning must be one of {CONDITIONING}, got {conditioning!r}")
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    size = manifest.image_size
    gts = [manifest.load_color(i) for i in range(len(manifest))]
    preds = [None] * len(gts)
    for group in manifest.episodes():
        if gen is None:
            for i in group:
                preds[i] = gts[i]
            continue
        lines = [torch.from_numpy(imaging.to_model_space(_input(manifest, i, gts[i], lineart_cache)))
                 for i in group]
        if conditioning == "chained":
            outs = inference.colorize_sequence(gen, lines)
        else:
            outs = []
            for k, i in enumerate(group):
                cond = imaging.blank_frame(3, size, size) if k == 0 else imaging.to_model_space(gts[i - 1])
                outs.append(inference.colorize_frame(gen, lines[k], torch.from_numpy(cond)))
        for i, out in zip(group, outs):
            preds[i] = np.clip(imaging.to_storage_space(out.numpy()), 0.0, 1.0)
    episodes = [e.episode for e in manifest.entries]
    paths = [e.path for e in manifest.entries]
    return evaluate_frames(preds, gts, episodes, model, manifest.mode, conditioning, fid_features, paths)


def _input(manifest, index, color, lineart_cache):
    if lineart_cache is not None and manifest.mode == "lineart":
        path = lineart_cache_path(lineart_cache, manifest.entries[index])
        if path.exists():
            return imaging.load_png(path, channels=1)
    return input_frame(color, manifest.mode)


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if v == math.inf:
        return "inf"
    return f"{v:.2f}"


def render_table(reports) -> str:
    """Plain-text table: one column per (model, mode), grouped by model."""
    reports = list(reports)
    models = list(dict.fromkeys(r.model for r in reports))
    columns = [r for m in models for r in reports if r.model == m]
    cells = [[MODEL_LABELS.get(r.model, r.model) for r in columns],
             [MODE_LABELS.get(r.mode, r.mode) for r in columns],
             [_fmt(r.fid) for r in columns],
             [_fmt(r.ssim) for r in columns],
             [_fmt(r.psnr) for r in columns]]
    width = max(10, *(len(c) for row in cells for c in row))
    labels = ["Statistic", "", "FID", "SSIM", "PSNR"]
    rule = "-" * (11 + (width + 3) * len(columns))

    def line(label, row):
        return f"{label:>9}  | " + " | ".join(f"{c:^{width}}" for c in row)

    out = [line(labels[0], cells[0]), line(labels[1], cells[1]), rule]
    out += [line(label, row) for label, row in zip(labels[2:], cells[2:])]
    out.append(rule)
    for r in columns:
        note = (f"{MODEL_LABELS.get(r.model, r.model)}/{MODE_LABELS.get(r.mode, r.mode)}: "
                f"{r.frame_count} frames, conditioning={r.conditioning}, SSIM/PSNR are per-frame means")
        if r.psnr_identical:
            note += f", {r.psnr_identical} identical frame(s) at PSNR=inf excluded"
        out.append(note)
    return "\n".join(out) + "\n"


def write_report(reports, out_dir) -> tuple:
    reports = list(reports)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "report.txt"
    js = out_dir / "report.json"
    txt.write_text(render_table(reports))
    js.write_text(json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n")
    return txt, js
