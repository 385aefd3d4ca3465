"""Image primitives shared by the data pipeline, inference and evaluation.

Frames are float32 numpy arrays of shape ``(C, H, W)`` with ``C`` in ``{1, 3}``.
Storage space is ``[0, 1]`` (what PNGs decode to); model space is ``[-1, 1]``
(what the networks consume).  Line art is dark strokes (0) on a light (1)
background.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import ImageTooSmallError, InvalidChannelsError, InvalidSizeError, TCVCError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.2

_RANGES = {"storage": (0.0, 1.0), "model": (-1.0, 1.0)}


class ImageReadError(TCVCError, OSError):
    def __init__(self, path, reason):
        super().__init__(f"cannot read image {path}: {reason}")
        self.path = Path(path)


def check_frame(frame, space: str = "storage", channels=None) -> np.ndarray:
    """Validate arity and value range; returns the array unchanged."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise InvalidChannelsError(f"expected (1|3, H, W) frame, got shape {frame.shape}")
    if channels is not None and frame.shape[0] != channels:
        raise InvalidChannelsError(f"expected {channels} channels, got {frame.shape[0]}")
    if frame.shape[1] < 1 or frame.shape[2] < 1:
        raise InvalidSizeError(f"empty frame of shape {frame.shape}")
    lo, hi = _RANGES[space]
    if frame.size and (frame.min() < lo - 1e-6 or frame.max() > hi + 1e-6):
        raise ValueError(f"frame values outside {space} range [{lo}, {hi}]")
    return frame


def to_model_space(frame):
    return frame * 2.0 - 1.0


def to_storage_space(frame):
    return (frame + 1.0) * 0.5


def to_greyscale(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float32)
    check_frame(rgb, channels=3)
    r, g, b = LUMA_WEIGHTS
    grey = r * rgb[0] + g * rgb[1] + b * rgb[2]
    return np.clip(grey, 0.0, 1.0)[None].astype(np.float32)


def blank_frame(channels: int, h: int, w: int) -> np.ndarray:
    """All-zero frame in model space (mid-grey once stored)."""
    if channels not in (1, 3):
        raise InvalidChannelsError(f"channels must be 1 or 3, got {channels}")
    if h < 1 or w < 1:
        raise InvalidSizeError(f"invalid blank frame size {h}x{w}")
    return np.zeros((channels, h, w), dtype=np.float32)


def resize(frame, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (antialiased when shrinking)."""
    frame = np.asarray(frame, dtype=np.float32)
    check_frame(frame, space="model")
    if h < 1 or w < 1:
        raise InvalidSizeError(f"target size must be positive, got {h}x{w}")
    _, src_h, src_w = frame.shape
    if (src_h, src_w) == (h, w):
        return frame.copy()
    x = torch.from_numpy(np.ascontiguousarray(frame))[None]
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False,
                        antialias=h < src_h or w < src_w)[0].numpy()
    return np.clip(out, frame.min(), frame.max()).astype(np.float32)


def _gaussian_kernel(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    # zero padding, renormalised by the kernel mass that fell inside the image
    k = _gaussian_kernel(sigma)

    def blur(a):
        a = ndi.correlate1d(a, k, axis=0, mode="constant", cval=0.0)
        return ndi.correlate1d(a, k, axis=1, mode="constant", cval=0.0)

    return blur(image) / (blur(np.ones_like(image)) + np.finfo(np.float64).eps)


def _sobel(image: np.ndarray):
    p = np.pad(image, 1, mode="symmetric")
    # derivative along rows (axis 0), smoothing along columns
    d_rows = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    d_cols = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    return d_rows, d_cols


def _non_maximum_suppression(gr, gc, mag):
    """Keep pixels whose magnitude is not exceeded along the gradient normal.

    The two neighbours on each side are linearly interpolated according to the
    gradient direction.  Border pixels are never kept.
    """
    h, w = mag.shape
    m = np.pad(mag, 1)

    def at(dr, dc):
        return m[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    agr, agc = np.abs(gr), np.abs(gc)
    same_sign = gr * gc >= 0
    mostly_rows = agr >= agc
    with np.errstate(divide="ignore", invalid="ignore"):
        w_rows = np.where(agr > 0, agc / agr, 0.0)
        w_cols = np.where(agc > 0, agr / agc, 0.0)

    # (near, diagonal) neighbour offsets on the + side; the - side mirrors them
    cases = [
        (mostly_rows & same_sign, w_rows, (1, 0), (1, 1)),
        (~mostly_rows & same_sign, w_cols, (0, 1), (1, 1)),
        (~mostly_rows & ~same_sign, w_cols, (0, 1), (-1, 1)),
        (mostly_rows & ~same_sign, w_rows, (-1, 0), (-1, 1)),
    ]
    # exact ties (symmetric edges) must not be split by rounding noise
    ceiling = mag * (1 + 1e-9)
    keep = np.zeros_like(mag, dtype=bool)
    for sel, wt, near, diag in cases:
        plus = wt * at(*diag) + (1 - wt) * at(*near)
        minus = wt * at(-diag[0], -diag[1]) + (1 - wt) * at(-near[0], -near[1])
        keep |= sel & (plus <= ceiling) & (minus <= ceiling)

    interior = np.zeros_like(keep)
    interior[1:-1, 1:-1] = True
    return keep & interior & (mag > 0)


def canny_edges(image, sigma: float = CANNY_SIGMA, low: float = CANNY_LOW,
                high: float = CANNY_HIGH) -> np.ndarray:
    """Boolean edge map of a 2-D ``[0, 1]`` image.

    Thresholds apply to the Sobel gradient magnitude of the smoothed image.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidChannelsError(f"canny expects a 2-D image, got shape {image.shape}")
    if min(image.shape) < 3:
        raise ImageTooSmallError(f"image {image.shape} too small for edge detection")
    if high < low:
        raise ValueError("high threshold must not be below low threshold")
    smoothed = _smooth(image, sigma)
    gr, gc = _sobel(smoothed)
    mag = np.hypot(gr, gc)
    candidates = _non_maximum_suppression(gr, gc, mag) & (mag >= low)
    labels, count = ndi.label(candidates, structure=np.ones((3, 3), bool))
    if count == 0:
        return candidates
    strong = np.zeros(count + 1, dtype=bool)
    strong[np.unique(labels[candidates & (mag >= high)])] = True
    strong[0] = False
    return strong[labels]


def synthesize_lineart(frame, sigma: float = CANNY_SIGMA, low: float = CANNY_LOW,
                       high: float = CANNY_HIGH) -> np.ndarray:
    """Binary line art: Canny edges drawn as 0 on a background of 1."""
    frame = np.asarray(frame, dtype=np.float32)
    check_frame(frame)
    if min(frame.shape[1:]) < 3:
        raise ImageTooSmallError(f"frame {frame.shape} too small for line art")
    grey = to_greyscale(frame)[0] if frame.shape[0] == 3 else frame[0]
    edges = canny_edges(grey, sigma, low, high)
    return (~edges).astype(np.float32)[None]


def load_png(path, channels: int = 3) -> np.ndarray:
    """Decode an 8-bit image into a storage-space frame."""
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise InvalidChannelsError(f"channels must be 1 or 3, got {channels}")
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageReadError(path, exc) from exc
    return arr[None] if channels == 1 else np.ascontiguousarray(arr.transpose(2, 0, 1))


def quantize(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float32)
    check_frame(frame)
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, frame) -> Path:
    path = Path(path)
    q = quantize(frame)
    img = Image.fromarray(q[0], "L") if q.shape[0] == 1 else Image.fromarray(q.transpose(1, 2, 0), "RGB")
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
