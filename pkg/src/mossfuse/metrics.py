"""Reference-based quality metrics for H x W x B cubes.

``ref`` is always the authoritative argument (ERGAS normalizes by its band
means).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imagery import SpectralImage


class DegenerateMetricError(ValueError):
    pass


def _arrays(ref, est):
    r = ref.data if isinstance(ref, SpectralImage) else np.asarray(ref)
    e = est.data if isinstance(est, SpectralImage) else np.asarray(est)
    if r.ndim == 2:
        r = r[:, :, None]
    if e.ndim == 2:
        e = e[:, :, None]
    if r.shape != e.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {e.shape}")
    return r.astype(np.float64), e.astype(np.float64)


def psnr_per_band(ref, est, peak=1.0):
    r, e = _arrays(ref, est)
    mse = ((r - e) ** 2).mean(axis=(0, 1))
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10 * np.log10(peak ** 2 / np.where(mse == 0, 1, mse)))


def psnr(ref, est, peak=1.0):
    """Mean of per-band PSNR in dB; ``inf`` when the images are identical."""
    return float(np.mean(psnr_per_band(ref, est, peak)))


def psnr_pooled(ref, est, peak=1.0):
    r, e = _arrays(ref, est)
    mse = ((r - e) ** 2).mean()
    return math.inf if mse == 0 else float(10 * np.log10(peak ** 2 / mse))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, window):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, window.shape), window)


def ssim_band(r, e, peak=1.0, window=None, k1=0.01, k2=0.03):
    window = gaussian_window() if window is None else window
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_r, mu_e = _filter_valid(r, window), _filter_valid(e, window)
    var_r = _filter_valid(r * r, window) - mu_r ** 2
    var_e = _filter_valid(e * e, window) - mu_e ** 2
    cov = _filter_valid(r * e, window) - mu_r * mu_e
    num = (2 * mu_r * mu_e + c1) * (2 * cov + c2)
    den = (mu_r ** 2 + mu_e ** 2 + c1) * (var_r + var_e + c2)
    return float(np.mean(num / den))


def ssim(ref, est, peak=1.0, win_size=11, sigma=1.5):
    r, e = _arrays(ref, est)
    if min(r.shape[:2]) < win_size:
        raise ValueError(f"image {r.shape[:2]} smaller than the {win_size}x{win_size} window")
    window = gaussian_window(win_size, sigma)
    return float(np.mean([ssim_band(r[:, :, b], e[:, :, b], peak, window)
                          for b in range(r.shape[2])]))


def sam(ref, est, return_skipped=False):
    """Mean spectral angle in degrees over pixels where both spectra are non-zero."""
    r, e = _arrays(ref, est)
    r, e = r.reshape(-1, r.shape[2]), e.reshape(-1, e.shape[2])
    nr, ne = np.linalg.norm(r, axis=1), np.linalg.norm(e, axis=1)
    ok = (nr > 0) & (ne > 0)
    if not ok.any():
        raise DegenerateMetricError("every pixel has a zero-norm spectrum")
    # half-angle form: exact zero for identical spectra, stable near 0 and 180 degrees
    u, v = r[ok] / nr[ok, None], e[ok] / ne[ok, None]
    theta = 2 * np.arctan2(np.linalg.norm(u - v, axis=1), np.linalg.norm(u + v, axis=1))
    angle = float(np.degrees(theta).mean())
    skipped = int((~ok).sum())
    return (angle, skipped) if return_skipped else angle


def ergas(ref, est, scale):
    r, e = _arrays(ref, est)
    mu = r.mean(axis=(0, 1))
    if np.any(mu == 0):
        raise DegenerateMetricError("reference band with zero mean")
    rmse = np.sqrt(((r - e) ** 2).mean(axis=(0, 1)))
    return float(100.0 / scale * np.sqrt(np.mean((rmse / mu) ** 2)))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    sam: float
    ergas: float
    psnr_pooled: Optional[float] = None
    sam_skipped: int = 0
    per_band: Optional[List[float]] = None

    def to_json_dict(self):
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return v
        out = {}
        for k, v in asdict(self).items():
            out[k] = [enc(x) for x in v] if isinstance(v, list) else enc(v)
        return out


def evaluate(ref, est, scale, peak=1.0) -> MetricReport:
    angle, skipped = sam(ref, est, return_skipped=True)
    return MetricReport(
        psnr=psnr(ref, est, peak),
        ssim=ssim(ref, est, peak),
        sam=angle,
        ergas=ergas(ref, est, scale),
        psnr_pooled=psnr_pooled(ref, est, peak),
        sam_skipped=skipped,
        per_band=[float(v) for v in psnr_per_band(ref, est, peak)],
    )
