"""Deterministic image preprocessing: equalization, CLAHE, resize, normalization."""

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._io import read_image
from ._validation import check_gray_u8
from .exceptions import ParameterError

HISTOGRAM_MODES = ("none", "hist_eq", "clahe")
IMAGENET_MEAN = (123.675, 116.28, 103.53)
IMAGENET_STD = (58.395, 57.12, 57.375)


@dataclass(frozen=True)
class PreprocessSpec:
    histogram_mode: str = "none"
    resolution: int = 224
    clahe_clip_limit: float = 2.0
    clahe_tiles: int = 8
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.histogram_mode not in HISTOGRAM_MODES:
            raise ParameterError(f"histogram_mode must be one of {HISTOGRAM_MODES}")
        if int(self.resolution) < 32:
            raise ParameterError("resolution must be >= 32")
        if not self.clahe_clip_limit > 0:
            raise ParameterError("clahe_clip_limit must be > 0")
        if int(self.clahe_tiles) < 1:
            raise ParameterError("clahe_tiles must be >= 1")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ParameterError("normalization needs 3 means and 3 positive stds")

    def to_dict(self):
        d = asdict(self)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _equalization_lut(hist):
    """Float LUT v -> (cdf(v) - cdf_min) / (N - cdf_min) * 255 for a 256-bin histogram."""
    cdf = np.cumsum(hist, dtype=np.float64)
    total = cdf[-1]
    cdf_min = cdf[np.flatnonzero(hist > 0)[0]]
    if total == cdf_min:
        return np.arange(256, dtype=np.float64)
    return (cdf - cdf_min) / (total - cdf_min) * 255.0


def hist_equalize(img):
    """Global histogram equalization of an 8-bit grayscale image.

    Constant images are returned unchanged.
    """
    img = check_gray_u8(img)
    hist = np.bincount(img.ravel(), minlength=256)
    if np.count_nonzero(hist) <= 1:
        return img.copy()
    lut = _round_half_up(_equalization_lut(hist)).astype(np.uint8)
    return lut[img]


def _tile_lut(tile, clip_limit):
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        return np.arange(256, dtype=np.float64)
    if math.isfinite(clip_limit):
        ceiling = clip_limit * tile.size / 256.0
        excess = np.clip(hist - ceiling, 0.0, None).sum()
        hist = np.minimum(hist, ceiling) + excess / 256.0
    return _equalization_lut(hist)


def _axis_weights(n, tile):
    """Lower tile index and upper-tile weight for each coordinate along one axis."""
    centers = (np.arange(n, dtype=np.float64) + 0.5) / tile - 0.5
    ntiles = n // tile
    lo = np.clip(np.floor(centers), 0, ntiles - 1).astype(np.int64)
    hi = np.minimum(lo + 1, ntiles - 1)
    w = np.clip(centers - lo, 0.0, 1.0)
    w[hi == lo] = 0.0
    return lo, hi, w


def clahe(img, clip_limit=2.0, tiles=8):
    """Contrast limited adaptive histogram equalization.

    The image is edge-padded (bottom/right) to a multiple of ``tiles`` per side.
    Each tile's histogram is clipped at ``clip_limit * tile_pixels / 256`` with
    the excess spread evenly over all 256 bins; the resulting per-tile
    equalization maps are blended bilinearly between tile centres. Tiles
    holding a single grey level map to identity. ``clip_limit=inf`` disables
    clipping.
    """
    img = check_gray_u8(img)
    tiles = int(tiles)
    if tiles < 1:
        raise ParameterError("tiles must be >= 1")
    if not clip_limit > 0:
        raise ParameterError("clip_limit must be > 0")
    h, w = img.shape
    if tiles > min(h, w):
        raise ParameterError(f"tiles={tiles} exceeds image side {min(h, w)}")
    ph, pw = -h % tiles, -w % tiles
    padded = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    th, tw = padded.shape[0] // tiles, padded.shape[1] // tiles

    luts = np.empty((tiles, tiles, 256), dtype=np.float64)
    for i in range(tiles):
        for j in range(tiles):
            luts[i, j] = _tile_lut(padded[i * th:(i + 1) * th, j * tw:(j + 1) * tw], clip_limit)

    y0, y1, wy = _axis_weights(padded.shape[0], th)
    x0, x1, wx = _axis_weights(padded.shape[1], tw)
    y0, y1, wy = y0[:h, None], y1[:h, None], wy[:h, None]
    x0, x1, wx = x0[None, :w], x1[None, :w], wx[None, :w]
    v = img
    top = (1 - wx) * luts[y0, x0, v] + wx * luts[y0, x1, v]
    bottom = (1 - wx) * luts[y1, x0, v] + wx * luts[y1, x1, v]
    out = (1 - wy) * top + wy * bottom
    return np.clip(_round_half_up(out), 0, 255).astype(np.uint8)


def to_grayscale(raw):
    """Collapse a 3-channel image to one channel by averaging; 2-D input passes through."""
    raw = np.asarray(raw)
    if raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[:, :, 0]
    if raw.ndim == 2:
        return check_gray_u8(raw)
    if raw.ndim != 3 or raw.shape[2] not in (3, 4):
        raise ParameterError(f"expected (H, W) or (H, W, 3) image, got shape {raw.shape}")
    mean = raw[:, :, :3].astype(np.float64).mean(axis=2)
    return _round_half_up(mean).astype(np.uint8)


def prepare_gray(raw, spec):
    """Grayscale collapse, histogram transform, bilinear resize; returns uint8 (R, R)."""
    gray = to_grayscale(raw)
    if spec.histogram_mode == "hist_eq":
        gray = hist_equalize(gray)
    elif spec.histogram_mode == "clahe":
        gray = clahe(gray, spec.clahe_clip_limit, spec.clahe_tiles)
    r = int(spec.resolution)
    if gray.shape != (r, r):
        gray = cv2.resize(gray, (r, r), interpolation=cv2.INTER_LINEAR)
    return gray


def to_tensor(gray, spec):
    """Replicate a uint8 (R, R) image to 3 channels and normalize; returns float32 (3, R, R)."""
    g = np.asarray(gray, dtype=np.float32)
    mean = np.asarray(spec.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(spec.std, dtype=np.float32)[:, None, None]
    return (np.broadcast_to(g, (3,) + g.shape) - mean) / std


def preprocess_pipeline(raw_img, spec):
    """Full inference-time transform from a decoded (or path to an) 8-bit image."""
    if not isinstance(raw_img, np.ndarray):
        raw_img = read_image(raw_img)
    return to_tensor(prepare_gray(raw_img, spec), spec)


class ImagePreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping images (arrays or paths) to a (n, 3, R, R) array."""

    def __init__(self, histogram_mode="none", resolution=224, clahe_clip_limit=2.0,
                 clahe_tiles=8, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.histogram_mode = histogram_mode
        self.resolution = resolution
        self.clahe_clip_limit = clahe_clip_limit
        self.clahe_tiles = clahe_tiles
        self.mean = mean
        self.std = std

    @property
    def spec(self):
        return PreprocessSpec(**self.get_params())

    def fit(self, X=None, y=None):
        self.spec_ = self.spec
        return self

    def transform(self, X):
        spec = getattr(self, "spec_", None) or self.spec
        out = [preprocess_pipeline(x, spec) for x in X]
        if not out:
            r = int(spec.resolution)
            return np.empty((0, 3, r, r), dtype=np.float32)
        return np.stack(out)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
