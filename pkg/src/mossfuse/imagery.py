"""Image containers, the ``.bsq`` + JSON file format, and resampling helpers.

Arrays are stored height x width x bands (channels last). The network side of
the package converts to ``(1, bands, H, W)`` tensors with :func:`to_tensor`.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ImageFormatError(ValueError):
    """Header is missing, unreadable or inconsistent."""


class ImageIntegrityError(ValueError):
    """Payload size does not match the header."""


class DegenerateInputError(ValueError):
    pass


@dataclass
class SpectralImage:
    data: np.ndarray
    wavelengths: Optional[Sequence[float]] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError(f"expected H x W x B data, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        self.data = data
        if self.wavelengths is not None:
            wl = [float(w) for w in self.wavelengths]
            if len(wl) != data.shape[2]:
                raise ValueError("wavelengths length must equal band count")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise ValueError("wavelengths must be strictly increasing")
            self.wavelengths = wl

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape


@dataclass
class SceneTriplet:
    hrmsi: SpectralImage
    lrhsi: SpectralImage
    scale: int
    truth: Optional[SpectralImage] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = int(self.scale)
        if s < 1:
            raise ValueError("scale must be >= 1")
        self.scale = s
        if (self.hrmsi.height != self.lrhsi.height * s
                or self.hrmsi.width != self.lrhsi.width * s):
            raise ValueError(
                f"HR-MSI {self.hrmsi.shape[:2]} is not LR-HSI {self.lrhsi.shape[:2]} x {s}")
        if self.truth is not None:
            if self.truth.shape[:2] != self.hrmsi.shape[:2]:
                raise ValueError("truth spatial size must match HR-MSI")
            if self.truth.bands != self.lrhsi.bands:
                raise ValueError("truth band count must match LR-HSI")


def _header_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _payload_path(path) -> Path:
    return Path(path).with_suffix(".bsq")


def save_image(img: SpectralImage, path) -> None:
    """Write ``<name>.bsq`` (little-endian float32, band-sequential) and ``<name>.json``."""
    payload = _payload_path(path)
    header = {"height": img.height, "width": img.width, "bands": img.bands}
    if img.wavelengths is not None:
        header["wavelengths_nm"] = list(img.wavelengths)
    bsq = np.ascontiguousarray(np.transpose(img.data, (2, 0, 1))).astype("<f4")
    with open(payload, "wb") as fh:
        fh.write(bsq.tobytes())
    with open(_header_path(path), "w") as fh:
        json.dump(header, fh, indent=2)


def load_image(path) -> SpectralImage:
    hdr_path = _header_path(path)
    try:
        with open(hdr_path) as fh:
            header = json.load(fh)
        h, w, b = int(header["height"]), int(header["width"]), int(header["bands"])
    except FileNotFoundError as exc:
        raise ImageFormatError(f"missing header {hdr_path}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ImageFormatError(f"corrupt header {hdr_path}: {exc}") from exc
    if min(h, w, b) < 1:
        raise ImageFormatError(f"non-positive dimensions in {hdr_path}")

    raw = np.fromfile(_payload_path(path), dtype="<f4")
    if raw.size != h * w * b:
        raise ImageIntegrityError(
            f"header says {h}x{w}x{b} = {h * w * b} values, payload has {raw.size}")
    data = raw.reshape(b, h, w).transpose(1, 2, 0).astype(np.float32)
    return SpectralImage(data, header.get("wavelengths_nm"))


def normalize_minmax(img: SpectralImage) -> SpectralImage:
    """Global min-max scaling of the whole cube to [0, 1]."""
    d = img.data.astype(np.float64)
    lo, hi = d.min(), d.max()
    if not hi > lo:
        raise DegenerateInputError("cannot normalize a constant image")
    out = ((d - lo) / (hi - lo)).astype(np.float32)
    # float32 rounding may nudge the extremes off the exact endpoints
    out[d == lo] = 0.0
    out[d == hi] = 1.0
    return SpectralImage(out, img.wavelengths)


def crop_patches(img: SpectralImage, size: int, stride: int) -> list:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if size < 1 or size > min(img.height, img.width):
        raise ValueError(f"patch size {size} exceeds image extent {img.shape[:2]}")
    patches = []
    for r in range(0, img.height - size + 1, stride):
        for c in range(0, img.width - size + 1, stride):
            patches.append(SpectralImage(img.data[r:r + size, c:c + size].copy(), img.wavelengths))
    return patches


def cubic_weight(t, a: float = -0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    w[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return w


def reflect_index(i, n: int):
    """Mirror indices into [0, n) without repeating the edge sample."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i > n - 1, period - i, i)


def cubic_matrix(n_in: int, factor: int, a: float = -0.5) -> np.ndarray:
    """(n_in*factor, n_in) matrix applying 1-D cubic upsampling along one axis."""
    n_out = n_in * factor
    u = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(u).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        w = cubic_weight(u - idx, a)
        np.add.at(m, (np.arange(n_out), reflect_index(idx, n_in)), w)
    return m


def upsample(img: SpectralImage, factor: int) -> SpectralImage:
    """Separable bicubic upsampling (a = -0.5, reflect boundary), per band."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("upsampling factor must be >= 1")
    if factor == 1:
        return SpectralImage(img.data.copy(), img.wavelengths)
    mh = cubic_matrix(img.height, factor)
    mw = cubic_matrix(img.width, factor)
    out = np.einsum("ih,hwb,jw->ijb", mh, img.data.astype(np.float64), mw)
    return SpectralImage(out.astype(np.float32), img.wavelengths)


def read_srf_csv(path) -> np.ndarray:
    """Read a B x b SRF table; a non-numeric first row is treated as a header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ImageFormatError(f"empty SRF file {path}")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    try:
        table = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ImageFormatError(f"non-numeric SRF entry in {path}") from exc
    if table.ndim != 2 or table.size == 0:
        raise ImageFormatError(f"ragged SRF table in {path}")
    return table


def write_srf_csv(weights: np.ndarray, path, header: bool = True) -> None:
    weights = np.asarray(weights)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"msi_band_{j}" for j in range(weights.shape[1])])
        for row in weights:
            w.writerow([repr(float(v)) for v in row])


def data_root() -> Path:
    return Path(os.environ.get("MOSSFUSE_DATA_DIR", "."))


def to_tensor(img, dtype=None):
    """H x W x B image (or array) to a (1, B, H, W) tensor."""
    import torch

    data = img.data if isinstance(img, SpectralImage) else np.asarray(img)
    t = torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))[None]
    return t.to(dtype) if dtype is not None else t


def from_tensor(t, wavelengths=None) -> SpectralImage:
    arr = t.detach().cpu().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return SpectralImage(arr.transpose(1, 2, 0).astype(np.float32), wavelengths)
