from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import ImageDecodeError


def read_image(path, row=None):
    """Decode ``path`` into a uint8 array of shape (H, W) or (H, W, 3)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I", "F"):
                raise ImageDecodeError(path, f"unsupported mode {im.mode}", row)
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except ImageDecodeError:
        raise
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageDecodeError(path, str(exc), row) from exc
    return arr


def write_png(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # PIL writes no timestamps into PNG chunks, so bytes are reproducible.
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")
