"""Separable Gaussian filtering and SSIM, differentiable through :mod:`autograd`.

Filters are applied as ``R @ img @ C.T`` with banded matrices, which makes the
adjoint (needed for backprop) just the transposed matrices.
"""

from __future__ import annotations

import functools

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


@functools.lru_cache(maxsize=64)
def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _reflect_index(i: int, n: int) -> int:
    # mirror about the edge pixels without repeating them: -1 -> 1, n -> n-2
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


@functools.lru_cache(maxsize=64)
def reflect_filter_matrix(n: int, sigma: float, radius: int) -> np.ndarray:
    """[n, n] matrix applying a reflect-padded Gaussian along one axis."""
    k = gaussian_kernel(sigma, radius)
    m = np.zeros((n, n))
    for i in range(n):
        for j, kv in enumerate(k):
            m[i, _reflect_index(i + j - radius, n)] += kv
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=64)
def valid_filter_matrix(n: int, sigma: float, size: int) -> np.ndarray:
    """[n - size + 1, n] matrix for a 'valid' (no padding) Gaussian window."""
    if n < size:
        raise InputError(f"image side {n} smaller than the {size}-tap window")
    k = gaussian_kernel(sigma, size // 2)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i : i + size] = k
    m.setflags(write=False)
    return m


def blur(x: Tensor, sigma: float = 1.0, radius: int = 3) -> Tensor:
    h, w = x.shape[-2:]
    return ag.separable_filter(x, reflect_filter_matrix(h, sigma, radius), reflect_filter_matrix(w, sigma, radius))


def _window(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return ag.separable_filter(x, rows, cols)


def ssim_maps(x: Tensor, y: Tensor, peak: float = 1.0) -> tuple[Tensor, Tensor]:
    """Per-pixel SSIM and contrast-structure maps (valid 11x11 Gaussian window, sigma 1.5)."""
    h, w = x.shape[-2:]
    rows = valid_filter_matrix(h, SSIM_SIGMA, SSIM_WINDOW)
    cols = valid_filter_matrix(w, SSIM_SIGMA, SSIM_WINDOW)
    c1 = (K1 * peak) ** 2
    c2 = (K2 * peak) ** 2
    mu_x = _window(x, rows, cols)
    mu_y = _window(y, rows, cols)
    mu_xx = ag.square(mu_x)
    mu_yy = ag.square(mu_y)
    mu_xy = mu_x * mu_y
    s_xx = _window(ag.square(x), rows, cols) - mu_xx
    s_yy = _window(ag.square(y), rows, cols) - mu_yy
    s_xy = _window(x * y, rows, cols) - mu_xy
    cs = (2.0 * s_xy + c2) / (s_xx + s_yy + c2)
    lum = (2.0 * mu_xy + c1) / (mu_xx + mu_yy + c1)
    return lum * cs, cs


def ssim(x: Tensor, y: Tensor, peak: float = 1.0) -> Tensor:
    """Mean single-scale SSIM over all channels and positions."""
    if x.shape != y.shape:
        raise InputError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    s, _ = ssim_maps(x, y, peak)
    return ag.mean(s)
