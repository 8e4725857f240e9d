"""Spatial (PSF) and spectral (SRF) degradation operators.

The numpy functions synthesize data; the ``*_t`` functions are differentiable
torch versions used by the degradation-estimation branch of the network. Both
follow the same conventions: true convolution with reflect padding, then
subsampling at offset 0; SRF columns are non-negative and sum to one.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .imagery import SceneTriplet, SpectralImage


class DegenerateSRFError(ValueError):
    pass


class KernelError(ArithmeticError):
    pass


def default_kernel_size(lambda1: float, lambda2: float, cap: int = 15) -> int:
    k = 2 * math.ceil(3 * math.sqrt(max(lambda1, lambda2))) + 1
    return min(k, cap)


@dataclass
class PSFParams:
    lambda1: float
    lambda2: float
    theta_k: float = 0.0
    kernel_size: Optional[int] = None
    scale: int = 1

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("PSF eigenvalues must be positive")
        if self.kernel_size is None:
            self.kernel_size = default_kernel_size(self.lambda1, self.lambda2)
        self.kernel_size = int(self.kernel_size)
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 3")
        self.scale = int(self.scale)
        if self.scale < 1:
            raise ValueError("scale must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class SRFMatrix:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ValueError("SRF must be a B x b matrix")
        if np.any(w < 0):
            raise ValueError("SRF entries must be non-negative")
        if not np.allclose(w.sum(axis=0), 1.0, atol=1e-6, rtol=0):
            raise ValueError("SRF columns must sum to one")
        self.weights = w

    @property
    def hsi_bands(self) -> int:
        return self.weights.shape[0]

    @property
    def msi_bands(self) -> int:
        return self.weights.shape[1]


def covariance(lambda1, lambda2, theta):
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return rot @ np.diag([lambda1, lambda2]) @ rot.T


def kernel_grid(size: int):
    """Column (x) and row (y) offsets of each cell from the kernel centre."""
    r = np.arange(size) - size // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    return xx, yy


def build_agk_kernel(params: PSFParams) -> np.ndarray:
    """Anisotropic Gaussian kernel, size x size, summing to one.

    The first eigen-axis lies along image columns (x) when ``theta_k = 0``.
    """
    sigma = covariance(params.lambda1, params.lambda2, params.theta_k)
    det = sigma[0, 0] * sigma[1, 1] - sigma[0, 1] * sigma[1, 0]
    if not det > 0 or not np.isfinite(det):
        raise KernelError(f"singular PSF covariance (det={det})")
    inv = np.array([[sigma[1, 1], -sigma[0, 1]], [-sigma[1, 0], sigma[0, 0]]]) / det
    xx, yy = kernel_grid(params.kernel_size)
    q = inv[0, 0] * xx * xx + (inv[0, 1] + inv[1, 0]) * xx * yy + inv[1, 1] * yy * yy
    k = np.exp(-0.5 * q)
    return k / k.sum()


def _check_divisible(h, w, scale):
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"spatial size {h}x{w} not divisible by scale {scale}")


def spatial_degrade(img: SpectralImage, kernel, scale: int) -> SpectralImage:
    kernel = np.asarray(kernel, dtype=np.float64)
    scale = int(scale)
    _check_divisible(img.height, img.width, scale)
    data = img.data.astype(np.float64)
    out = np.empty((img.height // scale, img.width // scale, img.bands))
    for b in range(img.bands):
        blurred = ndimage.convolve(data[:, :, b], kernel, mode="mirror")
        out[:, :, b] = blurred[::scale, ::scale]
    return SpectralImage(out.astype(np.float32), img.wavelengths)


def spectral_degrade(img: SpectralImage, srf) -> SpectralImage:
    weights = srf.weights if isinstance(srf, SRFMatrix) else np.asarray(srf, dtype=np.float64)
    if img.bands != weights.shape[0]:
        raise ValueError(f"image has {img.bands} bands, SRF expects {weights.shape[0]}")
    out = img.data.astype(np.float64) @ weights
    return SpectralImage(out.astype(np.float32))


def project_srf(raw) -> SRFMatrix:
    """Clamp negatives to zero, then normalize each column to unit sum."""
    w = np.clip(np.asarray(raw, dtype=np.float64), 0.0, None)
    if w.ndim != 2 or w.shape[1] < 1:
        raise ValueError("raw SRF must be a 2-D matrix with at least one column")
    sums = w.sum(axis=0)
    bad = np.flatnonzero(sums <= 0)
    if bad.size:
        raise DegenerateSRFError(f"SRF column(s) {bad.tolist()} have no positive weight")
    return SRFMatrix(w / sums)


def gaussian_srf(wavelengths, centers, fwhm) -> SRFMatrix:
    """Synthetic camera response: one Gaussian column per MSI band."""
    wl = np.asarray(wavelengths, dtype=np.float64)[:, None]
    centers = np.asarray(centers, dtype=np.float64)[None, :]
    fwhm = np.broadcast_to(np.asarray(fwhm, dtype=np.float64), centers.shape)
    sig = fwhm / (2 * math.sqrt(2 * math.log(2)))
    return project_srf(np.exp(-0.5 * ((wl - centers) / sig) ** 2))


def rgb_like_srf(bands: int = 31, lo: float = 400.0, hi: float = 700.0) -> SRFMatrix:
    wl = np.linspace(lo, hi, bands)
    return gaussian_srf(wl, centers=[460.0, 545.0, 610.0], fwhm=[70.0, 80.0, 75.0])


def synthesize_triplet(truth: SpectralImage, psf: PSFParams, srf) -> SceneTriplet:
    """Wald-protocol observations: HR-MSI = X R, LR-HSI = blur+decimate(X)."""
    if not isinstance(srf, SRFMatrix):
        srf = SRFMatrix(srf)
    hrmsi = spectral_degrade(truth, srf)
    lrhsi = spatial_degrade(truth, build_agk_kernel(psf), psf.scale)
    meta = {"psf": psf.to_dict(), "srf": srf.weights.tolist()}
    return SceneTriplet(hrmsi=hrmsi, lrhsi=lrhsi, scale=psf.scale, truth=truth, meta=meta)


# torch counterparts ---------------------------------------------------------

def agk_kernel_t(lambda1, lambda2, theta, size: int):
    """Differentiable AGK kernel; uses the closed-form inverse covariance."""
    dtype = lambda1.dtype
    r = torch.arange(size, dtype=dtype, device=lambda1.device) - size // 2
    yy, xx = torch.meshgrid(r, r, indexing="ij")
    c, s = torch.cos(theta), torch.sin(theta)
    # Sigma^-1 = Rot diag(1/l1, 1/l2) Rot^T
    a = c * c / lambda1 + s * s / lambda2
    b = c * s * (1 / lambda1 - 1 / lambda2)
    d = s * s / lambda1 + c * c / lambda2
    q = a * xx * xx + 2 * b * xx * yy + d * yy * yy
    k = torch.exp(-0.5 * q)
    return k / k.sum()


def spatial_degrade_t(x, kernel, scale: int):
    """Blur every channel of an (N, C, H, W) tensor with ``kernel``, then decimate."""
    n, c, h, w = x.shape
    _check_divisible(h, w, scale)
    ks = kernel.shape[-1]
    p = ks // 2
    xp = F.pad(x, (p, p, p, p), mode="reflect")
    weight = torch.flip(kernel, dims=(-2, -1)).reshape(1, 1, ks, ks).expand(c, 1, ks, ks)
    y = F.conv2d(xp, weight.to(x.dtype), groups=c)
    return y[:, :, ::scale, ::scale]


def spectral_degrade_t(x, weights):
    """(N, B, H, W) @ (B, b) -> (N, b, H, W)."""
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"tensor has {x.shape[1]} bands, SRF expects {weights.shape[0]}")
    return torch.einsum("nbhw,bk->nkhw", x, weights.to(x.dtype))


def project_srf_t(raw):
    w = torch.clamp(raw, min=0.0)
    sums = w.sum(dim=0, keepdim=True)
    if bool((sums <= 0).any()):
        raise DegenerateSRFError("SRF column with no positive weight")
    return w / sums
