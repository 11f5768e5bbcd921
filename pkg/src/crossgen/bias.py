"""Per-class composite images, intensity histograms and inter-class chi-squared."""

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from sklearn.base import BaseEstimator

from ._io import read_image, write_png
from ._validation import check_histogram
from .exceptions import ContractError, ParameterError
from .preprocess import to_grayscale

WORKING_RESOLUTION = 256


@dataclass(frozen=True)
class CompositeImage:
    """Running arithmetic mean of equally weighted images (float64)."""

    mean: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, resolution=WORKING_RESOLUTION):
        return cls(np.zeros((resolution, resolution), dtype=np.float64), 0)

    @property
    def resolution(self):
        return self.mean.shape[0]

    def to_uint8(self):
        return np.clip(np.floor(self.mean + 0.5), 0, 255).astype(np.uint8)


def absorb(c, img):
    """Fold one image into the composite: c * n/(n+1) + img/(n+1)."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != c.mean.shape:
        raise ContractError(f"image shape {img.shape} does not match composite {c.mean.shape}")
    n = c.count
    return CompositeImage(c.mean * (n / (n + 1)) + img * (1.0 / (n + 1)), n + 1)


def merge(a, b):
    """Count-weighted combination of two composites built over disjoint shards."""
    if a.mean.shape != b.mean.shape:
        raise ContractError("composites have different resolutions")
    n = a.count + b.count
    if n == 0:
        return a
    return CompositeImage(a.mean * (a.count / n) + b.mean * (b.count / n), n)


def to_working(raw, resolution=WORKING_RESOLUTION):
    """Grayscale float64 image resized (bilinear) to the composite working resolution."""
    if not isinstance(raw, np.ndarray):
        raw = read_image(raw)
    gray = to_grayscale(raw).astype(np.float64)
    if gray.shape != (resolution, resolution):
        gray = cv2.resize(gray, (resolution, resolution), interpolation=cv2.INTER_LINEAR)
    return gray


def build_composite(imgs, resolution=WORKING_RESOLUTION):
    c = CompositeImage.empty(resolution)
    for img in imgs:
        c = absorb(c, to_working(img, resolution))
    return c


def composite_histogram(c):
    """256-bin probability mass over the composite's rounded grey levels."""
    counts = np.bincount(c.to_uint8().ravel(), minlength=256).astype(np.float64)
    return counts / counts.sum()


def class_histogram(imgs, resolution=WORKING_RESOLUTION):
    imgs = list(imgs)
    if not imgs:
        raise ParameterError("class_histogram needs at least one image")
    return composite_histogram(build_composite(imgs, resolution))


def chi_squared(h1, h2):
    """Symmetric chi-squared distance: sum (h1 - h2)^2 / (h1 + h2) over bins with mass."""
    h1 = check_histogram(h1, "h1")
    h2 = check_histogram(h2, "h2")
    if h1.shape != h2.shape:
        raise ContractError(f"bin counts differ: {h1.size} vs {h2.size}")
    denom = h1 + h2
    nz = denom > 0
    return float(np.sum((h1[nz] - h2[nz]) ** 2 / denom[nz]))


class BiasDiagnostics(BaseEstimator):
    """Fit per-class composites on (images, labels) and score their histogram divergence.

    After ``fit``: ``composites_`` and ``histograms_`` keyed by class label,
    and ``chi_squared_`` between the two classes.
    """

    def __init__(self, resolution=WORKING_RESOLUTION):
        self.resolution = resolution

    def fit(self, X, y):
        y = np.asarray(y)
        if len(X) != len(y):
            raise ContractError("X and y lengths differ")
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ParameterError(f"expected two classes, got {self.classes_.tolist()}")
        self.composites_ = {}
        for cls in self.classes_:
            self.composites_[int(cls)] = build_composite(
                (x for x, lab in zip(X, y) if lab == cls), self.resolution
            )
        self.histograms_ = {k: composite_histogram(c) for k, c in self.composites_.items()}
        a, b = (self.histograms_[int(c)] for c in self.classes_)
        self.chi_squared_ = chi_squared(a, b)
        return self

    def report(self, dataset):
        return {
            "dataset": dataset,
            "chi_squared": self.chi_squared_,
            "resolution": self.resolution,
            "classes": [
                {"class": k, "count": self.composites_[k].count, "histogram": h.tolist()}
                for k, h in self.histograms_.items()
            ],
        }

    def save(self, out_dir, dataset):
        """Write ``<dataset>_class<k>_composite.png`` per class and ``<dataset>_bias.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, c in self.composites_.items():
            p = out_dir / f"{dataset}_class{k}_composite.png"
            write_png(p, c.to_uint8())
            paths.append(p)
        p = out_dir / f"{dataset}_bias.json"
        p.write_text(json.dumps(self.report(dataset), indent=2))
        paths.append(p)
        return paths


def diagnose(descriptor, resolution=WORKING_RESOLUTION):
    recs = descriptor.records
    return BiasDiagnostics(resolution).fit([r.image_path for r in recs], [r.label for r in recs])
