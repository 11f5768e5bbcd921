import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image
from sklearn.base import clone

from crossgen.exceptions import ContractError, ImageDecodeError, ParameterError
from crossgen.preprocess import (
    ImagePreprocessor, PreprocessSpec, clahe, hist_equalize, prepare_gray, preprocess_pipeline,
    to_grayscale,
)

gray_images = arrays(np.uint8, st.tuples(st.integers(8, 40), st.integers(8, 40)))


def he_oracle(img):
    """Hand CDF mapping with exact rational arithmetic."""
    flat = [int(v) for v in img.ravel()]
    n = len(flat)
    if len(set(flat)) == 1:
        return img.copy()
    cdf_min = flat.count(min(flat))
    out = []
    for v in flat:
        cdf = sum(1 for u in flat if u <= v)
        out.append(math.floor(Fraction(cdf - cdf_min, n - cdf_min) * 255 + Fraction(1, 2)))
    return np.array(out, dtype=np.uint8).reshape(img.shape)


def clahe_reference(img, clip_limit, tiles):
    """Straight per-pixel transcription: pad, clip and redistribute per tile, blend between centres."""
    h, w = img.shape
    H, W = -(-h // tiles) * tiles, -(-w // tiles) * tiles
    pad = [[int(img[min(y, h - 1)][min(x, w - 1)]) for x in range(W)] for y in range(H)]
    th, tw = H // tiles, W // tiles
    luts = [[None] * tiles for _ in range(tiles)]
    for ty in range(tiles):
        for tx in range(tiles):
            hist = [0.0] * 256
            for y in range(ty * th, (ty + 1) * th):
                for x in range(tx * tw, (tx + 1) * tw):
                    hist[pad[y][x]] += 1
            if sum(1 for c in hist if c) <= 1:
                luts[ty][tx] = [float(v) for v in range(256)]
                continue
            limit = clip_limit * th * tw / 256
            excess = sum(max(c - limit, 0.0) for c in hist)
            hist = [min(c, limit) + excess / 256 for c in hist]
            cdf, acc = [], 0.0
            for c in hist:
                acc += c
                cdf.append(acc)
            first = next(i for i, c in enumerate(hist) if c > 0)
            lo, total = cdf[first], cdf[-1]
            luts[ty][tx] = [(c - lo) / (total - lo) * 255 for c in cdf]

    def neighbours(pos, size):
        f = (pos + 0.5) / size - 0.5
        i = math.floor(f)
        if i < 0:
            return 0, 0, 0.0
        if i >= tiles - 1:
            return tiles - 1, tiles - 1, 0.0
        return i, i + 1, f - i

    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        a, b, wy = neighbours(y, th)
        for x in range(w):
            c, d, wx = neighbours(x, tw)
            v = int(img[y][x])
            top = (1 - wx) * luts[a][c][v] + wx * luts[a][d][v]
            bot = (1 - wx) * luts[b][c][v] + wx * luts[b][d][v]
            out[y][x] = min(255, max(0, math.floor((1 - wy) * top + wy * bot + 0.5)))
    return out


def two_region(rng, size=64):
    yy, xx = np.mgrid[:size, :size]
    dark = 40 + 40 * xx / size + rng.normal(0, 6, (size, size))
    bright = 150 + 50 * yy / size + rng.normal(0, 6, (size, size))
    img = np.where(xx + 0.6 * yy < 0.8 * size, dark, bright)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def test_he_small_example():
    img = np.array([[0, 1], [2, 3]], dtype=np.uint8)
    assert hist_equalize(img).tolist() == [[0, 85], [170, 255]]


@pytest.mark.parametrize("levels", [(0, 1, 2, 3), (3, 64, 200, 255)])
def test_he_exhaustive_2x2(levels):
    for values in itertools.product(levels, repeat=4):
        img = np.array(values, dtype=np.uint8).reshape(2, 2)
        assert np.array_equal(hist_equalize(img), he_oracle(img)), values


def test_he_two_value_extremes():
    masks = [m for m in itertools.product((0, 1), repeat=4) if 0 < sum(m) < 4]
    for a in range(256):
        for b in range(a + 1, 256, 3):
            m = np.array(masks[(a + b) % len(masks)]).reshape(2, 2)
            out = hist_equalize(np.where(m == 1, b, a).astype(np.uint8))
            assert out.min() == 0 and out.max() == 255


@pytest.mark.parametrize("value", [0, 77, 255])
def test_constant_fixed_point(value):
    img = np.full((16, 20), value, dtype=np.uint8)
    assert np.array_equal(hist_equalize(img), img)
    assert np.array_equal(clahe(img, 2.0, 4), img)
    assert np.array_equal(clahe(img, math.inf, 1), img)


@settings(max_examples=80, deadline=None)
@given(img=gray_images)
def test_he_monotone(img):
    out = hist_equalize(img)
    order = np.argsort(img.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order].astype(int)) >= 0)


@settings(max_examples=40, deadline=None)
@given(img=arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8))))
def test_he_matches_oracle(img):
    assert np.array_equal(hist_equalize(img), he_oracle(img))


@settings(max_examples=80, deadline=None)
@given(img=gray_images)
def test_clahe_single_tile_unclipped_matches_he(img):
    diff = clahe(img, math.inf, 1).astype(int) - hist_equalize(img).astype(int)
    assert np.abs(diff).max() <= 1


@settings(max_examples=40, deadline=None)
@given(img=gray_images, clip=st.floats(0.1, 50), tiles=st.integers(1, 8))
def test_clahe_bounded(img, clip, tiles):
    out = clahe(img, clip, tiles)
    assert out.dtype == np.uint8 and out.shape == img.shape


@pytest.mark.parametrize("clip,tiles", [(2.0, 8), (3.0, 4), (1.0, 3)])
def test_clahe_matches_reference(rng, clip, tiles):
    img = two_region(rng)
    assert np.array_equal(clahe(img, clip, tiles), clahe_reference(img, clip, tiles))


def test_clahe_reference_non_divisible(rng):
    img = two_region(rng, size=64)[:45, :61]
    assert np.array_equal(clahe(img, 2.0, 8), clahe_reference(img, 2.0, 8))


def test_clahe_parameter_errors():
    img = np.zeros((10, 10), dtype=np.uint8)
    with pytest.raises(ParameterError):
        clahe(img, 2.0, 11)
    with pytest.raises(ParameterError):
        clahe(img, 0.0, 2)


def test_contract_errors():
    with pytest.raises(ContractError):
        hist_equalize(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ContractError):
        hist_equalize(np.full((4, 4), 300))


def test_spec_validation():
    for bad in [dict(histogram_mode="gamma"), dict(resolution=16), dict(clahe_clip_limit=0),
                dict(clahe_tiles=0), dict(std=(1, 0, 1))]:
        with pytest.raises(ParameterError):
            PreprocessSpec(**bad)
    s = PreprocessSpec(histogram_mode="clahe", resolution=244)
    assert PreprocessSpec.from_dict(s.to_dict()) == s


def test_pipeline_shape(rng):
    raw = rng.integers(0, 256, (512, 512), dtype=np.uint8)
    out = preprocess_pipeline(raw, PreprocessSpec("none", 224))
    assert out.shape == (3, 224, 224) and out.dtype == np.float32
    assert np.isfinite(out).all()


@pytest.mark.parametrize("mode", ["none", "hist_eq", "clahe"])
def test_pipeline_deterministic_and_channels(rng, mode, tmp_path):
    raw = rng.integers(0, 256, (100, 80, 3), dtype=np.uint8)
    spec = PreprocessSpec(mode, 64)
    a = preprocess_pipeline(raw, spec)
    assert a.tobytes() == preprocess_pipeline(raw.copy(), spec).tobytes()
    # undo per-channel normalization: every channel carries the same grey image
    std = np.array(spec.std)[:, None, None]
    mean = np.array(spec.mean)[:, None, None]
    g = a * std + mean
    assert np.allclose(g[0], g[1], atol=1e-3) and np.allclose(g[0], g[2], atol=1e-3)
    Image.fromarray(raw).save(tmp_path / "x.png")
    assert np.array_equal(preprocess_pipeline(tmp_path / "x.png", spec), a)


def test_pipeline_order():
    # equalization runs at native resolution before the resize
    raw = np.zeros((64, 64), dtype=np.uint8)
    raw[:, 32:] = 10
    got = prepare_gray(raw, PreprocessSpec("hist_eq", 32))
    assert set(np.unique(got)) <= {0, 128, 255} and got.max() == 255


def test_grayscale_collapse():
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 10, 20, 31
    assert to_grayscale(rgb).tolist() == [[20, 20], [20, 20]]


def test_jpeg_and_corrupt(tmp_path, rng):
    raw = rng.integers(0, 256, (40, 40), dtype=np.uint8)
    Image.fromarray(raw).save(tmp_path / "x.jpg")
    assert preprocess_pipeline(tmp_path / "x.jpg", PreprocessSpec(resolution=32)).shape == (3, 32, 32)
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(ImageDecodeError, match="bad.png"):
        preprocess_pipeline(tmp_path / "bad.png", PreprocessSpec())


def test_transformer_api(rng):
    pre = ImagePreprocessor(histogram_mode="clahe", resolution=32)
    X = [rng.integers(0, 256, (50, 50), dtype=np.uint8) for _ in range(3)]
    out = clone(pre).fit(X).transform(X)
    assert out.shape == (3, 3, 32, 32)
    assert pre.get_params()["clahe_tiles"] == 8
    assert ImagePreprocessor(resolution=32).transform([]).shape == (0, 3, 32, 32)
