"""Synthetic stand-in corpora: lesion-bearing positives, optional corner confounder, strata."""

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from ._io import write_png
from .exceptions import ParameterError
from .registry import SampleRecord, Stratum, load_manifest, write_manifest

CORNERS = ("tl", "tr", "bl", "br")

# strata sampling keeps this far (in fraction units) from band edges
_BAND_MARGIN = 0.02


@dataclass(frozen=True)
class LesionSpec:
    count: tuple = (1, 3)
    radius: tuple = (0.04, 0.08)  # fraction of resolution
    delta: float = 50.0


@dataclass(frozen=True)
class ConfounderSpec:
    delta: float = 90.0
    size: float = 0.25  # patch side as fraction of resolution
    corners: tuple = CORNERS


@dataclass(frozen=True)
class SynthSpec:
    n_per_class: int = 200
    resolution: int = 64
    lesion: LesionSpec = field(default_factory=LesionSpec)
    confounder: ConfounderSpec | None = None
    strata: bool = False
    noise_sigma: float = 12.0
    seed: int = 0
    prefix: str = "s"

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ParameterError("n_per_class must be >= 1")
        if self.resolution < 32:
            raise ParameterError("resolution must be >= 32")
        if not self.lesion.delta > self.noise_sigma:
            raise ParameterError("lesion delta must exceed the noise sigma")
        if self.confounder is not None:
            if self.confounder.delta < self.lesion.delta:
                raise ParameterError("confounder delta must be >= lesion delta")
            if set(self.confounder.corners) - set(CORNERS):
                raise ParameterError(f"corners must be drawn from {CORNERS}")


@dataclass
class Phantom:
    image: np.ndarray  # uint8
    lung: np.ndarray  # bool
    lesion: np.ndarray  # bool, subset of lung

    @property
    def involvement(self):
        return float(self.lesion.sum()) / float(self.lung.sum())


def _ellipse(shape, cy, cx, ry, rx):
    yy, xx = np.mgrid[: shape[0], : shape[1]].astype(np.float64)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _anatomy(res, rng):
    """Background body with two dark lung fields; returns (float image, lung mask)."""
    shape = (res, res)
    jy, jx = rng.uniform(-0.02, 0.02, size=2) * res
    yy = np.arange(res, dtype=np.float64)[:, None] / res
    xx = np.arange(res, dtype=np.float64)[None, :] / res
    img = np.full(shape, 15.0)
    body = _ellipse(shape, 0.5 * res + jy, 0.5 * res + jx, 0.40 * res, 0.47 * res)
    img = np.where(body, 110.0 + 60.0 * yy, img)
    lung = np.zeros(shape, dtype=bool)
    for side in (-1, 1):
        lung |= _ellipse(shape, 0.48 * res + jy, (0.5 + side * 0.2) * res + jx, 0.28 * res, 0.14 * res)
    # wide tonal spread keeps lesion-driven histogram shifts small
    lung_tone = 20.0 + 120.0 * np.abs(xx - 0.5) + 30.0 * yy
    img = np.where(lung, lung_tone, img)
    return img, lung


def _add_blob(lesion, lung, res, radius, rng):
    ys, xs = np.nonzero(lung)
    k = rng.integers(len(ys))
    r = rng.uniform(*radius) * res
    aspect = rng.uniform(0.7, 1.3)
    lesion |= _ellipse(lung.shape, ys[k], xs[k], r * aspect, r / aspect) & lung


def _lesions_by_count(lung, res, spec, rng):
    lesion = np.zeros_like(lung)
    for _ in range(rng.integers(spec.count[0], spec.count[1] + 1)):
        _add_blob(lesion, lung, res, spec.radius, rng)
    return lesion


def _lesions_by_fraction(lung, res, spec, lo, hi, rng):
    """Add blobs until lesion/lung area lands in [lo, hi]; retries on overshoot."""
    total = lung.sum()
    target = rng.uniform(lo + _BAND_MARGIN, hi - _BAND_MARGIN)
    # bigger blobs for high-involvement bands keep the loop short
    radius = (spec.radius[0], max(spec.radius[1], 0.4 * target + spec.radius[0]))
    for _ in range(100):
        lesion = np.zeros_like(lung)
        while lesion.sum() < target * total:
            _add_blob(lesion, lung, res, radius, rng)
        if lesion.sum() <= hi * total:
            return lesion
        radius = (radius[0] * 0.8, max(radius[0] * 0.8, radius[1] * 0.8))
    raise RuntimeError("could not place lesions inside the requested band")


def _grain(shape, sigma, rng, corr=1.0):
    """Spatially correlated Gaussian noise with marginal std ``sigma``."""
    white = rng.normal(0.0, 1.0, size=shape)
    smooth = cv2.GaussianBlur(white, (0, 0), corr, borderType=cv2.BORDER_REFLECT)
    return smooth * (sigma / smooth.std())


def render(spec, positive, rng, band=None):
    """Render one phantom. ``band`` = (lo, hi) lesion fraction overrides the count-based lesions."""
    res = spec.resolution
    img, lung = _anatomy(res, rng)
    if band is not None and band[1] > 0:
        lesion = _lesions_by_fraction(lung, res, spec.lesion, band[0], band[1], rng)
    elif positive and band is None:
        lesion = _lesions_by_count(lung, res, spec.lesion, rng)
    else:
        lesion = np.zeros_like(lung)
    img = img + spec.lesion.delta * lesion
    if positive and spec.confounder is not None:
        c = spec.confounder
        s = max(1, int(round(c.size * res)))
        for corner in c.corners:
            rs = slice(0, s) if corner[0] == "t" else slice(res - s, res)
            cs = slice(0, s) if corner[1] == "l" else slice(res - s, res)
            img[rs, cs] += c.delta
    img = img + _grain(img.shape, spec.noise_sigma, rng)
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return Phantom(img, lung, lesion)


def generate(spec, out_dir, name=None, write_masks=None):
    """Write PNG phantoms plus ``manifest.csv`` under ``out_dir``; returns the descriptor.

    Without strata, ``n_per_class`` negatives and positives are drawn. In strata
    mode ``n_per_class`` images are drawn per band: CT-0 negatives without
    lesions and CT-1..CT-4 positives whose lesion/lung area fraction falls in
    the band. Every image is its own patient. Lesion and lung masks are saved
    next to the images when ``write_masks`` is set (default: strata mode).
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    if write_masks is None:
        write_masks = spec.strata
    if spec.strata:
        plan = [(s, s is not Stratum.CT0) for s in Stratum]
    else:
        plan = [(None, False), (None, True)]

    records = []
    for stratum, positive in plan:
        tag = stratum.label if stratum is not None else ("pos" if positive else "neg")
        for i in range(spec.n_per_class):
            key = [spec.seed, int(positive), i] if stratum is None else [spec.seed, 10 + stratum.value, i]
            rng = np.random.default_rng(key)
            band = None
            if stratum is not None:
                lo, hi = stratum.involvement_range
                band = (lo / 100.0, hi / 100.0)
            ph = render(spec, positive, rng, band)
            stem = f"{tag}_{i:05d}"
            path = img_dir / f"{stem}.png"
            write_png(path, ph.image)
            if write_masks:
                write_png(out_dir / "masks" / f"{stem}_lung.png", ph.lung * 255)
                write_png(out_dir / "masks" / f"{stem}_lesion.png", ph.lesion * 255)
            pid = f"{spec.prefix}-{tag}-{i:05d}"
            records.append(SampleRecord(path, int(positive), pid, stratum))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records)
    return load_manifest(manifest, name=name or out_dir.name)


def write_demo(out_dir, n_per_class=200, n_per_stratum=40, resolution=64, seed=0,
               strata_lesion_delta=30.0):
    """Generate clean, confounded and strata corpora plus a ready-to-run ``experiment.yaml``."""
    import yaml

    out_dir = Path(out_dir)
    generate(SynthSpec(n_per_class=n_per_class, resolution=resolution, seed=seed + 1, prefix="c"),
             out_dir / "clean", name="clean")
    generate(SynthSpec(n_per_class=n_per_class, resolution=resolution, seed=seed + 2, prefix="f",
                       confounder=ConfounderSpec()), out_dir / "confounded", name="confounded")
    generate(SynthSpec(n_per_class=n_per_stratum, resolution=resolution, seed=seed + 3, prefix="m",
                       strata=True, lesion=LesionSpec(delta=strata_lesion_delta)),
             out_dir / "strata", name="strata")
    doc = {
        "seed": seed,
        "output_dir": "out",
        "datasets": [
            {"name": "clean", "manifest": "clean/manifest.csv"},
            {"name": "confounded", "manifest": "confounded/manifest.csv"},
        ],
        "preprocess": ["none", "hist_eq", "clahe"],
        "gabor": [False, True],
        "preprocess_options": {"resolution": resolution},
        "train": {"backbone": "tiny_cnn", "learning_rate": 1e-3, "batch_size": 32,
                  "max_epochs": 20, "patience": 3},
        "control": {"name": "strata", "manifest": "strata/manifest.csv"},
        "ensembles": [["clahe+gabor", "clahe-gabor"]],
    }
    path = out_dir / "experiment.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path
