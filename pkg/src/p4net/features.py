"""Frozen scattering features and per-client channel normalization.

A depth-two scattering cascade with Morlet wavelets at ``J = 2`` dyadic scales
and ``L = 8`` orientations. Per input channel this yields

* 1 order-0 map (low-pass of the image),
* ``J * L = 16`` order-1 maps ``|x * psi_{j,t}| * phi``,
* ``L**2 * J * (J - 1) / 2 = 64`` order-2 maps ``||x * psi_{j1,t1}| * psi_{j2,t2}| * phi``
  with ``j2 > j1``,

81 maps in total, each average-pooled by 4 in both spatial directions. Images
are reflection padded by 8 pixels before the FFT convolutions; the circular
wrap only touches the outermost pooled cells, and only in the far tails of
the filters.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import fft as sfft

from .errors import ParameterError, ShapeError

J = 2
L = 8
POOL = 2**J
MAPS_PER_CHANNEL = 1 + J * L + L * L * J * (J - 1) // 2
STD_FLOOR = 1e-6
_PAD = 8
_CHUNK = 16


def as_image(img) -> np.ndarray:
    """Validate an image and return it as ``(channels, height, width)`` float64.

    A 2-D array is treated as a single grayscale channel.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"image must be (H, W) or (C, H, W), got {x.shape}")
    if x.shape[0] not in (1, 3):
        raise ParameterError(f"unsupported channel count {x.shape[0]} (need 1 or 3)")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"image dimensions must be positive, got {x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ParameterError("pixel values must lie in [0, 1]")
    return x


def _grid(n: int) -> np.ndarray:
    # signed coordinates with the origin at index 0 (FFT layout)
    return np.fft.ifftshift(np.arange(n) - n // 2).astype(np.float64)


def _morlet(h: int, w: int, sigma: float, xi: float, theta: float, slant: float) -> np.ndarray:
    yy, xx = np.meshgrid(_grid(h), _grid(w), indexing="ij")
    c, s = np.cos(theta), np.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    envelope = np.exp(-(u**2 + (slant * v) ** 2) / (2.0 * sigma**2))
    wave = np.exp(1j * xi * u)
    beta = (envelope * wave).sum() / envelope.sum()
    psi = envelope * (wave - beta)
    return psi / (2.0 * np.pi * sigma**2 / slant)


def _gaussian(h: int, w: int, sigma: float) -> np.ndarray:
    yy, xx = np.meshgrid(_grid(h), _grid(w), indexing="ij")
    g = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    return g / g.sum()


@lru_cache(maxsize=16)
def filter_bank(h: int, w: int):
    """Fourier transforms of the low-pass and the ``J x L`` wavelets on an ``h x w`` grid.

    Returns ``(phi_hat, psi_hat)`` with ``psi_hat`` of shape ``(J, L, h, w)``.
    """
    phi_hat = sfft.fft2(_gaussian(h, w, 0.8 * 2**J)).real
    psi_hat = np.empty((J, L, h, w), dtype=np.complex128)
    for j in range(J):
        for t in range(L):
            psi = _morlet(h, w, 0.8 * 2**j, 3.0 * np.pi / 4.0 / 2**j, np.pi * t / L, 4.0 / L)
            psi_hat[j, t] = sfft.fft2(psi)
    return phi_hat, psi_hat


def _pool(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    oh, ow = height // POOL, width // POOL
    m = maps[..., _PAD : _PAD + oh * POOL, _PAD : _PAD + ow * POOL]
    m = m.reshape(*m.shape[:-2], oh, POOL, ow, POOL)
    return m.mean(axis=(-3, -1))


def _scatter_planes(x: np.ndarray) -> np.ndarray:
    """Scatter a stack of single-channel planes ``(n, H, W)`` -> ``(n, 81, H/4, W/4)``."""
    n, height, width = x.shape
    xp = np.pad(x, ((0, 0), (_PAD, _PAD), (_PAD, _PAD)), mode="reflect")
    hp, wp = xp.shape[1:]
    phi_hat, psi_hat = filter_bank(hp, wp)

    def lowpass(u_hat):
        return sfft.ifft2(u_hat * phi_hat).real

    x_hat = sfft.fft2(xp)
    out = [lowpass(x_hat)[:, None]]
    # order 1: (n, J, L, hp, wp)
    u1 = np.abs(sfft.ifft2(x_hat[:, None, None] * psi_hat[None]))
    u1_hat = sfft.fft2(u1)
    out.append(lowpass(u1_hat).reshape(n, J * L, hp, wp))
    for j1 in range(J):
        for j2 in range(j1 + 1, J):
            # (n, L_first, L_second, hp, wp)
            u2 = np.abs(sfft.ifft2(u1_hat[:, j1, :, None] * psi_hat[j2][None, None]))
            out.append(lowpass(sfft.fft2(u2)).reshape(n, L * L, hp, wp))
    s = _pool(np.concatenate(out, axis=1), height, width)
    # low-pass of non-negative inputs is non-negative; strip FFT roundoff
    return np.maximum(s, 0.0)


def scatter_batch(images) -> np.ndarray:
    """Scatter a batch ``(n, C, H, W)`` into features ``(n, 81*C, H//4, W//4)``."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ShapeError(f"expected (n, C, H, W), got {x.shape}")
    n, c, height, width = x.shape
    if c not in (1, 3):
        raise ParameterError(f"unsupported channel count {c} (need 1 or 3)")
    if height < POOL or width < POOL:
        raise ShapeError(f"image must be at least {POOL}x{POOL}, got {height}x{width}")
    planes = x.reshape(n * c, height, width)
    chunks = [_scatter_planes(planes[i : i + _CHUNK]) for i in range(0, n * c, _CHUNK)]
    feats = np.concatenate(chunks, axis=0)
    return feats.reshape(n, c * MAPS_PER_CHANNEL, height // POOL, width // POOL)


def scatter_transform(img) -> np.ndarray:
    """Scattering features of one image as a ``(k, H//4, W//4)`` map."""
    return scatter_batch(as_image(img)[None])[0]


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and (floored) standard deviation of a client's features."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


def fit_normalizer(features) -> NormStats:
    """Per-channel statistics over a client's own feature maps.

    Args:
        features: a sequence of ``(k, h, w)`` maps or an array ``(n, k, h, w)``.
    """
    if len(features) == 0:
        raise ParameterError("cannot fit a normalizer on no feature maps")
    try:
        f = np.asarray(features, dtype=np.float64)
    except ValueError as exc:
        raise ShapeError("feature maps have non-uniform shapes") from exc
    if f.ndim != 4:
        raise ShapeError(f"expected (n, k, h, w), got {f.shape}")
    mean = f.mean(axis=(0, 2, 3))
    std = np.maximum(f.std(axis=(0, 2, 3)), STD_FLOOR)
    return NormStats(mean=mean, std=std)


def _check_channels(f: np.ndarray, stats: NormStats) -> int:
    axis = f.ndim - 3
    if f.ndim not in (3, 4) or f.shape[axis] != stats.channels:
        raise ShapeError(f"feature shape {f.shape} does not match {stats.channels} channels")
    return axis


def normalize(features, stats: NormStats) -> np.ndarray:
    """Apply ``(x - mean) / std`` per channel to one map or a batch of maps."""
    f = np.asarray(features, dtype=np.float64)
    _check_channels(f, stats)
    return (f - stats.mean[:, None, None]) / stats.std[:, None, None]


def denormalize(features, stats: NormStats) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    _check_channels(f, stats)
    return f * stats.std[:, None, None] + stats.mean[:, None, None]
