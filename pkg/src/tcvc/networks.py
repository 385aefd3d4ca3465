"""Generators (residual and U-Net baseline) and the spectral-norm PatchGAN."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from .errors import CheckpointError, ImageTooSmallError, InvalidChannelsError

WEIGHTS_FORMAT = "tcvc-weights"
WEIGHTS_VERSION = 1
INIT_STD = 0.02


@dataclass
class GeneratorSpec:
    kind: str = "residual"
    input_channels: int = 4
    output_channels: int = 3
    base_width: int = 64
    n_down: int = 2
    n_residual_blocks: int = 8
    unet_depth: int = 7

    def __post_init__(self):
        if self.kind not in ("residual", "unet_baseline"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.input_channels < 1 or self.output_channels != 3:
            raise InvalidChannelsError(
                f"generator arity {self.input_channels}->{self.output_channels} invalid")
        if self.kind == "residual" and (self.n_down != 2 or self.n_residual_blocks != 8):
            raise ValueError("residual generator has exactly 2 downsamplings and 8 residual blocks")
        if self.base_width < 1 or self.unet_depth < 1:
            raise ValueError("widths and depths must be positive")


@dataclass
class DiscriminatorSpec:
    input_channels: int = 6
    base_width: int = 64
    n_layers: int = 4
    spectral_norm: bool = True

    def __post_init__(self):
        if self.input_channels < 1:
            raise InvalidChannelsError(f"invalid discriminator arity {self.input_channels}")
        if self.n_layers < 1 or self.base_width < 1:
            raise ValueError("n_layers and base_width must be positive")


def unet_spec_for(image_size: int, base_width: int = 64) -> GeneratorSpec:
    """U-Net spec whose bottleneck is 2x2 for ``image_size`` inputs."""
    depth = image_size.bit_length() - 2
    if image_size < 4 or 2 ** (depth + 1) != image_size:
        raise ValueError(f"U-Net baseline needs a power-of-two size >= 4, got {image_size}")
    return GeneratorSpec(kind="unet_baseline", input_channels=1, base_width=base_width,
                         unet_depth=depth)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            # spectral-normed convs keep the raw tensor under parametrizations
            w = m.parametrizations.weight.original if parametrize.is_parametrized(m, "weight") else m.weight
            with torch.no_grad():
                w.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.normal_(1.0, INIT_STD, generator=generator)
                m.bias.zero_()


class ResidualBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class ResidualGenerator(nn.Module):
    """Encoder (two stride-2 convs), 8 residual blocks, nearest-neighbour decoder."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(spec.input_channels, w, 7),
                  nn.InstanceNorm2d(w), nn.ReLU(inplace=True)]
        for i in range(spec.n_down):
            layers += [nn.Conv2d(w * 2 ** i, w * 2 ** (i + 1), 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * 2 ** (i + 1)), nn.ReLU(inplace=True)]
        self.encoder = nn.Sequential(*layers)
        self.blocks = nn.Sequential(*[ResidualBlock(w * 2 ** spec.n_down)
                                      for _ in range(spec.n_residual_blocks)])
        layers = []
        for i in range(spec.n_down, 0, -1):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(w * 2 ** i, w * 2 ** (i - 1), 3, padding=1),
                       nn.InstanceNorm2d(w * 2 ** (i - 1)), nn.ReLU(inplace=True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, spec.output_channels, 7), nn.Tanh()]
        self.decoder = nn.Sequential(*layers)

    def forward(self, line, condition):
        x = torch.cat([line, condition], dim=1)
        return self.decoder(self.blocks(self.encoder(x)))


class UNetGenerator(nn.Module):
    """pix2pix-style U-Net conditioned on the line art alone.

    ``unet_depth`` stride-2 stages bring a ``2 ** (depth + 1)`` input down to a
    2x2 bottleneck; the decoder uses transposed convolutions.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        widths = [min(w * 2 ** i, w * 8) for i in range(spec.unet_depth)]
        self.down = nn.ModuleList()
        cin = spec.input_channels
        for i, cout in enumerate(widths):
            inner = i == spec.unet_depth - 1
            norm = [] if i == 0 or inner else [nn.BatchNorm2d(cout)]
            self.down.append(nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm), *norm))
            cin = cout
        self.up = nn.ModuleList()
        for i in reversed(range(spec.unet_depth)):
            cin = widths[i] if i == spec.unet_depth - 1 else widths[i] * 2
            if i == 0:
                self.up.append(nn.Sequential(
                    nn.ReLU(), nn.ConvTranspose2d(cin, spec.output_channels, 4, 2, 1), nn.Tanh()))
            else:
                cout = widths[i - 1]
                self.up.append(nn.Sequential(
                    nn.ReLU(), nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout)))

    def encode(self, line):
        skips = []
        x = line
        for i, stage in enumerate(self.down):
            x = stage(x if i == 0 else F.leaky_relu(x, 0.2))
            skips.append(x)
        return skips

    def forward(self, line, condition=None):
        # the baseline never sees the temporal condition
        skips = self.encode(line)
        x = skips[-1]
        for j, stage in enumerate(self.up):
            if j > 0:
                x = torch.cat([x, skips[-1 - j]], dim=1)
            x = stage(x)
        return x


class SpectralNorm(nn.Module):
    """Weight parametrization ``W / sigma(W)`` with a persistent power iteration.

    The singular-vector estimates are iterated to convergence once at
    construction, then advanced by one step on every forward pass in
    training mode.  ``n_updates`` counts those steps.
    """

    def __init__(self, weight: torch.Tensor, generator=None, eps: float = 1e-12,
                 warmup_iters: int = 2000, warmup_tol: float = 1e-8):
        super().__init__()
        self.eps = eps
        mat = weight.detach().flatten(1)
        u = F.normalize(torch.randn(mat.shape[0], generator=generator, dtype=mat.dtype), dim=0, eps=eps)
        v = F.normalize(mat.t() @ u, dim=0, eps=eps)
        self.register_buffer("u", u)
        self.register_buffer("v", v)
        self.register_buffer("n_updates", torch.zeros((), dtype=torch.long))
        self.warm_up(weight, warmup_iters, warmup_tol)

    @torch.no_grad()
    def _step(self, mat):
        self.v.copy_(F.normalize(mat.t() @ self.u, dim=0, eps=self.eps))
        self.u.copy_(F.normalize(mat @ self.v, dim=0, eps=self.eps))

    @torch.no_grad()
    def warm_up(self, weight, iters: int, tol: float):
        mat = weight.detach().flatten(1)
        prev = None
        for _ in range(iters):
            self._step(mat)
            sigma = torch.dot(self.u, mat @ self.v).item()
            if prev is not None and abs(sigma - prev) <= tol * abs(sigma):
                break
            prev = sigma

    def forward(self, weight):
        mat = weight.flatten(1)
        if self.training:
            self._step(mat.detach())
            self.n_updates += 1
        # clone: the buffers are updated in place on the next training step
        sigma = torch.dot(self.u.clone(), mat @ self.v.clone())
        return weight / sigma


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN emitting a map of real/fake probabilities.

    No normalization layers besides spectral normalization, so each output
    unit depends only on its receptive field.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = []
        cin = spec.input_channels
        for i in range(spec.n_layers):
            cout = w * min(2 ** i, 8)
            stride = 2 if i < spec.n_layers - 1 else 1
            layers.append(nn.Conv2d(cin, cout, 4, stride, 1))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 4, 1, 1))
        self.convs = nn.ModuleList(layers)

    def add_spectral_norm(self, generator=None, warmup: bool = True):
        for conv in self.convs:
            sn = SpectralNorm(conv.weight, generator=generator, warmup_iters=2000 if warmup else 0)
            # unsafe: the registration-time consistency check would run a power step
            parametrize.register_parametrization(conv, "weight", sn, unsafe=True)

    def output_size(self, n: int) -> int:
        for k, s, p in self.layer_geometry():
            n = (n + 2 * p - k) // s + 1
        return n

    def logits(self, candidate, condition):
        if min(self.output_size(d) for d in candidate.shape[-2:]) < 1:
            raise ImageTooSmallError(f"input {tuple(candidate.shape[-2:])} too small for the patch discriminator")
        x = torch.cat([candidate, condition], dim=1)
        for conv in self.convs[:-1]:
            x = F.leaky_relu(conv(x), 0.2)
        return self.convs[-1](x)

    def forward(self, candidate, condition):
        return torch.sigmoid(self.logits(candidate, condition))

    def layer_geometry(self):
        return [(c.kernel_size[0], c.stride[0], c.padding[0]) for c in self.convs]


def receptive_field(layers) -> int:
    """Receptive field of one output unit for a stack of (kernel, stride, ...) layers."""
    rf, jump = 1, 1
    for k, s, *_ in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf


def receptive_window(layers, row: int, col: int):
    """Input-pixel window ``(r0, r1, c0, c1)`` (inclusive) seen by output unit (row, col)."""
    rf = receptive_field(layers)
    jump, offset = 1, 0
    for k, s, p in layers:
        offset += p * jump
        jump *= s
    r0, c0 = row * jump - offset, col * jump - offset
    return r0, r0 + rf - 1, c0, c0 + rf - 1


def _seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def build_generator(spec: GeneratorSpec, seed: int = 0) -> nn.Module:
    if spec.kind == "unet_baseline":
        return build_unet_baseline(spec, seed)
    net = ResidualGenerator(spec)
    init_weights(net, _seeded(seed))
    return net


def build_unet_baseline(spec: GeneratorSpec, seed: int = 0) -> nn.Module:
    if spec.kind != "unet_baseline":
        raise ValueError(f"expected unet_baseline spec, got {spec.kind!r}")
    net = UNetGenerator(spec)
    init_weights(net, _seeded(seed))
    return net


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0, warmup: bool = True) -> PatchDiscriminator:
    gen = _seeded(seed)
    net = PatchDiscriminator(spec)
    init_weights(net, gen)
    if spec.spectral_norm:
        net.add_spectral_norm(gen, warmup=warmup)
    return net


def spec_to_dict(spec) -> dict:
    return {"type": type(spec).__name__, **asdict(spec)}


def spec_from_dict(d: dict):
    d = dict(d)
    cls = {"GeneratorSpec": GeneratorSpec, "DiscriminatorSpec": DiscriminatorSpec}[d.pop("type")]
    return cls(**d)


def build_from_spec(spec, seed: int = 0, warmup: bool = True) -> nn.Module:
    if isinstance(spec, GeneratorSpec):
        return build_generator(spec, seed)
    return build_discriminator(spec, seed, warmup=warmup)


def weights_archive(model: nn.Module) -> dict:
    return {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "spec": spec_to_dict(model.spec),
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }


def load_state_checked(model: nn.Module, tensors: dict) -> nn.Module:
    """Load ``tensors`` into ``model``, failing loudly on any name or shape disagreement."""
    expected = model.state_dict()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"layer names disagree: missing={missing[:5]} unexpected={extra[:5]}")
    for name, value in tensors.items():
        if tuple(value.shape) != tuple(expected[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name}: archive {tuple(value.shape)} vs model {tuple(expected[name].shape)}")
    model.load_state_dict(tensors)
    return model


def model_from_archive(archive: dict) -> nn.Module:
    if not isinstance(archive, dict) or archive.get("format") != WEIGHTS_FORMAT:
        raise CheckpointError("not a weights archive")
    if archive.get("version") != WEIGHTS_VERSION:
        raise CheckpointError(f"unsupported weights archive version {archive.get('version')}")
    # singular-vector estimates come from the archive, so skip the warm-up
    model = build_from_spec(spec_from_dict(archive["spec"]), warmup=False)
    return load_state_checked(model, archive["tensors"])


def save_weights(model: nn.Module, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(weights_archive(model), path)
    return path


def load_weights(path) -> nn.Module:
    try:
        archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise CheckpointError(f"weights file not found: {path}") from None
    except Exception as exc:
        raise CheckpointError(f"cannot read weights {path}: {exc}") from exc
    return model_from_archive(archive)
