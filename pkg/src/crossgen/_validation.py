"""Input validation helpers."""

import numbers

import numpy as np

from .exceptions import ContractError


def check_gray_u8(img):
    """Return ``img`` as a 2-D uint8 array, rejecting anything else."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ContractError(f"expected a single-channel 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number) or arr.size and (
            arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))
        ):
            raise ContractError("expected 8-bit grey levels in 0..255")
        arr = arr.astype(np.uint8)
    return arr


def check_probability(p, name="p"):
    """Validate probabilities in [0, 1]; scalars stay scalars."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.size and (not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError(f"{name} must lie in [0, 1]")
    if isinstance(p, numbers.Real):
        return float(arr)
    return arr


def check_histogram(h, name="h"):
    arr = np.asarray(h, dtype=np.float64)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be 1-D")
    if arr.size and arr.min() < 0:
        raise ContractError(f"{name} has negative mass")
    return arr
