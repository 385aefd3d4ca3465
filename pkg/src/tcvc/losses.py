"""Adversarial, content, style and l1 losses and their weighted combination."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ExtractorUnavailableError, ShapeMismatchError

EPS = 1e-7
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VGG_TAPS = {"relu1_1": 1, "relu2_1": 6, "relu3_1": 11, "relu4_1": 20, "relu5_1": 29}


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_content: float = 1.0
    lambda_style: float = 1000.0
    lambda_l1: float = 10.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


class FeatureExtractor(nn.Module):
    """Frozen network exposing a list of named activation taps.

    Inputs arrive in model space ``[-1, 1]``; ``preprocess`` maps them to the
    normalization the network was trained with.
    """

    tap_names: tuple = ()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    def preprocess(self, x):
        return x

    def taps(self, x):
        raise NotImplementedError

    def forward(self, x):
        return self.taps(self.preprocess(x))

    def element_counts(self, x):
        """Per-sample element count N_i = C*H*W of every tap."""
        return [f[0].numel() for f in self(x)]


class _NormalizedInput:
    def _register_norm(self, mean, std):
        self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))

    def preprocess(self, x):
        return ((x + 1) * 0.5 - self.mean) / self.std


class VGG19Extractor(_NormalizedInput, FeatureExtractor):
    """relu1_1 .. relu5_1 activations of an ImageNet-pretrained VGG-19."""

    tap_names = tuple(VGG_TAPS)

    def __init__(self, checkpoint=None):
        super().__init__()
        from torchvision.models import VGG19_Weights, vgg19

        try:
            if checkpoint is not None:
                net = vgg19()
                net.load_state_dict(torch.load(Path(checkpoint), map_location="cpu", weights_only=True))
            else:
                cache = os.environ.get("TCVC_CACHE")
                if cache:
                    torch.hub.set_dir(cache)
                net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise ExtractorUnavailableError(f"cannot load VGG-19 weights: {exc}") from exc
        self.features = net.features[: max(VGG_TAPS.values()) + 1]
        self._register_norm(IMAGENET_MEAN, IMAGENET_STD)
        self.freeze()

    def taps(self, x):
        out = []
        wanted = set(VGG_TAPS.values())
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in wanted:
                out.append(x)
        return out


class TinyExtractor(_NormalizedInput, FeatureExtractor):
    """Small fixed-seed VGG-shaped stand-in with five taps; runs offline."""

    tap_names = tuple(VGG_TAPS)

    def __init__(self, seed: int = 0, widths=(8, 8, 16, 16, 16)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * cin)) ** 0.5, generator=gen)
                conv.bias.normal_(0.0, 0.01, generator=gen)
            convs.append(conv)
            cin = cout
        self.convs = nn.ModuleList(convs)
        self._register_norm(IMAGENET_MEAN, IMAGENET_STD)
        self.freeze()

    def taps(self, x):
        out = []
        for i, conv in enumerate(self.convs):
            if i > 0 and min(x.shape[-2:]) >= 2:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            out.append(x)
        return out


class IdentityExtractor(FeatureExtractor):
    """Single tap returning its input unchanged."""

    tap_names = ("identity",)

    def __init__(self):
        super().__init__()
        self.freeze()

    def taps(self, x):
        return [x]


def build_extractor(name: str, checkpoint=None, seed: int = 0) -> FeatureExtractor:
    if name == "vgg19":
        return VGG19Extractor(checkpoint)
    if name == "tiny":
        return TinyExtractor(seed)
    if name == "identity":
        return IdentityExtractor()
    raise ValueError(f"unknown feature extractor {name!r}")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _batched(x):
    return x.unsqueeze(0) if x.dim() == 3 else x


def adversarial_loss_d(d_real, d_fake):
    """Discriminator loss over patch maps: mean of -log D(real) - log(1 - D(fake))."""
    _same_shape(d_real, d_fake)
    real = d_real.clamp(EPS, 1 - EPS)
    fake = d_fake.clamp(EPS, 1 - EPS)
    return -(torch.log(real) + torch.log1p(-fake)).mean()


def adversarial_loss_g(d_fake):
    """Non-saturating generator loss: mean of -log D(fake)."""
    return -torch.log(d_fake.clamp(EPS, 1 - EPS)).mean()


def l1_loss(pred, gt):
    _same_shape(pred, gt)
    return (pred - gt).abs().mean()


def gram_matrix(activation):
    """``A A^T / (C H W)`` for a (C, H, W) or (B, C, H, W) activation."""
    a = _batched(activation)
    b, c, h, w = a.shape
    flat = a.reshape(b, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g[0] if activation.dim() == 3 else g


def _features(extractor, pred, gt):
    _same_shape(pred, gt)
    if extractor is None:
        raise ExtractorUnavailableError("content/style losses need a feature extractor")
    pred, gt = _batched(pred), _batched(gt)
    return extractor(pred), extractor(gt)


def content_loss(extractor, pred, gt):
    """Mean over taps of the per-element l1 distance between activations."""
    fp, fg = _features(extractor, pred, gt)
    terms = [(g - p).abs().mean() for p, g in zip(fp, fg)]
    return torch.stack(terms).mean()


def style_loss(extractor, pred, gt):
    """Mean over taps of the summed l1 distance between Gram matrices."""
    fp, fg = _features(extractor, pred, gt)
    terms = [(gram_matrix(p) - gram_matrix(g)).abs().sum(dim=(1, 2)).mean() for p, g in zip(fp, fg)]
    return torch.stack(terms).mean()


def effective_weights(weights: LossWeights, mode: str) -> dict:
    if mode not in ("lineart", "greyscale"):
        raise ValueError(f"unknown mode {mode!r}")
    return {
        "adv": weights.lambda_adv,
        # greyscale input already carries the content
        "content": 0.0 if mode == "greyscale" else weights.lambda_content,
        "style": weights.lambda_style,
        "l1": weights.lambda_l1,
    }


def joint_generator_loss(weights: LossWeights, adv, content, style, l1, mode: str = "lineart"):
    """Weighted sum of the four generator terms.

    Returns ``(total, terms)`` where ``terms`` maps each term name to its
    unweighted value.  Terms with zero effective weight are skipped entirely,
    so they may be passed as ``None``.
    """
    raw = {"adv": adv, "content": content, "style": style, "l1": l1}
    total = 0.0
    terms = {}
    for name, w in effective_weights(weights, mode).items():
        value = raw[name]
        terms[name] = value
        if w == 0:
            continue
        if value is None:
            raise ValueError(f"term {name!r} has weight {w} but no value")
        total = total + w * value
    if not torch.is_tensor(total):
        total = torch.tensor(float(total), dtype=torch.float64)
    return total, terms
