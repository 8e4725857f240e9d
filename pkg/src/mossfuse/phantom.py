"""Procedural hyperspectral scenes with smooth spectra.

A scene is a linear mixture ``X = A @ E``: a few smooth endmember spectra
``E`` (sums of broad Gaussians over wavelength) weighted by abundance maps
``A`` built from soft-edged shapes, gradients and gentle texture. Sharp shape
boundaries give the HR-MSI detail that the LR-HSI cannot resolve.
"""
import numpy as np

from .imagery import SpectralImage


def smooth_spectra(rng, n, wavelengths):
    wl = np.asarray(wavelengths, dtype=np.float64)
    span = wl[-1] - wl[0]
    spectra = np.empty((n, wl.size))
    for i in range(n):
        s = np.full(wl.size, 0.05)
        for _ in range(rng.integers(2, 4)):
            center = rng.uniform(wl[0] - 0.1 * span, wl[-1] + 0.1 * span)
            width = rng.uniform(0.12, 0.35) * span
            s += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((wl - center) / width) ** 2)
        spectra[i] = s / s.max()
    return spectra


def abundance_maps(rng, height, width, n):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    maps = np.zeros((n, height, width))
    maps[0] = 0.4 + 0.3 * (xx / width) + 0.2 * np.sin(yy / height * 2 * np.pi)
    for i in range(1, n):
        for _ in range(3):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            if rng.random() < 0.5:
                r = rng.uniform(0.1, 0.3) * min(height, width)
                d = np.hypot(yy - cy, xx - cx) - r
            else:
                hy, hx = rng.uniform(0.08, 0.25, size=2) * np.array([height, width])
                d = np.maximum(np.abs(yy - cy) - hy, np.abs(xx - cx) - hx)
            maps[i] += 1.0 / (1.0 + np.exp(d / 0.6))
        f = rng.uniform(2, 5, size=2) * 2 * np.pi
        maps[i] += 0.15 * (1 + np.sin(f[0] * xx / width + f[1] * yy / height))
    maps = np.clip(maps, 0, None) + 1e-3
    return maps / maps.sum(axis=0, keepdims=True)


def make_phantom(height=64, width=64, bands=31, endmembers=4, seed=0,
                 wl_range=(400.0, 700.0)) -> SpectralImage:
    rng = np.random.default_rng(seed)
    wl = np.linspace(wl_range[0], wl_range[1], bands)
    spectra = smooth_spectra(rng, endmembers, wl)
    maps = abundance_maps(rng, height, width, endmembers)
    cube = np.einsum("khw,kb->hwb", maps, spectra)
    cube = (cube - cube.min()) / (cube.max() - cube.min())
    return SpectralImage(cube.astype(np.float32), wl)


# anisotropic, rotated blur used by the toy benchmark scene
TOY_PSF = dict(lambda1=6.0, lambda2=1.5, theta_k=0.7, kernel_size=13)


def toy_triplet(size=64, bands=31, scale=4, seed=0):
    """Phantom degraded with :data:`TOY_PSF` and the RGB-like Gaussian SRF."""
    from .degradation import PSFParams, rgb_like_srf, synthesize_triplet

    truth = make_phantom(size, size, bands, seed=seed)
    return synthesize_triplet(truth, PSFParams(scale=scale, **TOY_PSF), rgb_like_srf(bands))
