"""Learnable Gabor filter bank usable as a drop-in replacement for a stem convolution."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ContractError, ParameterError


@dataclass(frozen=True)
class GaborParams:
    wavelength: float
    orientation: float
    phase: float
    sigma: float
    gamma: float

    def __post_init__(self):
        if not (self.wavelength > 0 and self.sigma > 0 and self.gamma > 0):
            raise ParameterError("wavelength, sigma and gamma must be positive")


def _grid(kernel_size, dtype, device=None):
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd, got {kernel_size}")
    half = kernel_size // 2
    r = torch.arange(-half, half + 1, dtype=dtype, device=device)
    y, x = torch.meshgrid(r, r, indexing="ij")
    return x, y


def gabor_kernel(wavelength, orientation, phase, sigma, gamma, kernel_size=7):
    """Sample a real Gabor kernel on a centred ``kernel_size`` grid.

    g(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / wavelength + phase)
    with x' = x cos(theta) + y sin(theta), y' = -x sin(theta) + y cos(theta); x runs
    along columns and y along rows. Parameters may be Python floats or tensors of
    shape (F,); tensors yield a (F, k, k) stack and keep the autograd graph.
    """
    params = [wavelength, orientation, phase, sigma, gamma]
    if not any(torch.is_tensor(p) for p in params):
        if wavelength <= 0 or sigma <= 0 or gamma <= 0:
            raise ParameterError("wavelength, sigma and gamma must be positive")
        params = [torch.tensor(float(p), dtype=torch.float64) for p in params]
        return gabor_kernel(*params, kernel_size=kernel_size).numpy()
    ref = next(p for p in params if torch.is_tensor(p))
    params = [torch.as_tensor(p, dtype=ref.dtype, device=ref.device) for p in params]
    lam, theta, psi, sigma, gamma = (p.reshape(-1, 1, 1) for p in params)
    x, y = _grid(kernel_size, ref.dtype, ref.device)
    cos_t, sin_t = torch.cos(theta), torch.sin(theta)
    xr = x * cos_t + y * sin_t
    yr = -x * sin_t + y * cos_t
    envelope = torch.exp(-(xr**2 + gamma**2 * yr**2) / (2 * sigma**2))
    kernel = envelope * torch.cos(2 * math.pi * xr / lam + psi)
    if all(p.dim() == 0 for p in params):
        kernel = kernel[0]
    return kernel


class GaborConv2d(nn.Module):
    """Convolution whose kernels are regenerated from Gabor parameters each forward pass.

    Wavelength, envelope width and aspect ratio are stored as logarithms so
    they stay positive under any gradient step. Each filter is replicated
    across the input channels; there is no bias.
    """

    def __init__(self, in_channels, out_channels, kernel_size=7, stride=2, padding=3, seed=0):
        super().__init__()
        if out_channels < 1:
            raise ParameterError("out_channels must be >= 1")
        _grid(kernel_size, torch.float32)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        init = init_params(out_channels, kernel_size, seed)
        t = lambda xs: nn.Parameter(torch.tensor(xs, dtype=torch.float32))
        self.log_wavelength = t([math.log(p.wavelength) for p in init])
        self.orientation = t([p.orientation for p in init])
        self.phase = t([p.phase for p in init])
        self.log_sigma = t([math.log(p.sigma) for p in init])
        self.log_gamma = t([math.log(p.gamma) for p in init])

    def kernels(self):
        return gabor_kernel(
            self.log_wavelength.exp(), self.orientation, self.phase,
            self.log_sigma.exp(), self.log_gamma.exp(), self.kernel_size,
        )

    @property
    def weight(self):
        k = self.kernels()
        return k[:, None].expand(-1, self.in_channels, -1, -1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ContractError(
                f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        return F.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def params(self):
        """Current filters as a list of GaborParams."""
        cols = [self.log_wavelength.exp(), self.orientation, self.phase,
                self.log_sigma.exp(), self.log_gamma.exp()]
        rows = torch.stack([c.detach().double() for c in cols], dim=1).tolist()
        return [GaborParams(*r) for r in rows]

    def extra_repr(self):
        return (f"{self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size}, "
                f"stride={self.stride}, padding={self.padding}")


def init_params(out_channels, kernel_size, seed=0):
    """Initial filter parameters.

    Orientations are evenly spaced over [0, pi); wavelengths are log-spaced over
    [2, kernel_size] and assigned to filters in a seed-determined order.
    """
    n = int(out_channels)
    thetas = np.pi * np.arange(n) / n
    lams = np.geomspace(2.0, float(max(kernel_size, 2)), n)
    lams = lams[np.random.default_rng(seed).permutation(n)]
    return [GaborParams(float(l), float(t), 0.0, 0.56 * float(l), 0.5) for l, t in zip(lams, thetas)]


def init_bank(out_channels, kernel_size=7, seed=0, in_channels=3, stride=2, padding=3):
    return GaborConv2d(in_channels, out_channels, kernel_size, stride, padding, seed)


def replace_stem(conv, seed=0):
    """A GaborConv2d with the geometry of ``conv`` (an ``nn.Conv2d`` without bias)."""
    k = conv.kernel_size
    if k[0] != k[1]:
        raise ContractError("only square stem kernels can be replaced")
    if conv.groups != 1 or conv.dilation != (1, 1):
        raise ContractError("grouped or dilated stems are not supported")
    return GaborConv2d(conv.in_channels, conv.out_channels, k[0], conv.stride, conv.padding, seed)
