"""Post-hoc diagnostics: PCA of the decoupled features, per-band error maps,
and estimated-vs-true degradation comparison. Figures are written as PNG."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .degradation import PSFParams, SRFMatrix, build_agk_kernel
from .imagery import SpectralImage

POPULATIONS = ("shared_Y", "shared_x", "comp_Y", "comp_x")


@dataclass
class ClusterStats:
    mean_shared_similarity: float
    mean_cross_similarity: float
    pca_coords: Dict[str, np.ndarray]
    explained_variance: np.ndarray
    total_variance: float
    components: np.ndarray


def _feature_arrays(features) -> Dict[str, np.ndarray]:
    """Map each population to an (H*W, C) sample matrix (first batch item)."""
    out = {}
    for name in POPULATIONS:
        t = features[name] if isinstance(features, dict) else getattr(features, name)
        a = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
        if a.ndim == 4:  # (N, C, H, W)
            a = a[0].reshape(a.shape[1], -1).T
        elif a.ndim == 3:  # (H, W, C)
            a = a.reshape(-1, a.shape[2])
        out[name] = a.astype(np.float64)
    return out


def cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def pca_features(features, n_components=2, max_samples=4096) -> ClusterStats:
    """Joint PCA over the pooled per-pixel channel vectors of all four maps."""
    arrays = _feature_arrays(features)
    n = arrays["shared_Y"].shape[0]
    if n * len(POPULATIONS) < 2:
        raise ValueError("need at least two samples for PCA")
    stride = max(1, -(-n // max_samples))
    sub = {k: v[::stride] for k, v in arrays.items()}
    pooled = np.concatenate([sub[k] for k in POPULATIONS])
    centred = pooled - pooled.mean(axis=0)
    _, sv, vt = np.linalg.svd(centred, full_matrices=False)
    var = sv ** 2 / (pooled.shape[0] - 1)
    k = min(n_components, vt.shape[0])
    comps = vt[:k]
    mean = pooled.mean(axis=0)
    coords = {name: (sub[name] - mean) @ comps.T for name in POPULATIONS}

    cross = [cosine(arrays["shared_Y"], arrays["comp_Y"]),
             cosine(arrays["shared_x"], arrays["comp_x"]),
             cosine(arrays["comp_Y"], arrays["comp_x"])]
    return ClusterStats(
        mean_shared_similarity=cosine(arrays["shared_Y"], arrays["shared_x"]),
        mean_cross_similarity=float(np.mean(cross)),
        pca_coords=coords,
        explained_variance=var[:k],
        total_variance=float(centred.var(axis=0, ddof=1).sum()),
        components=comps,
    )


def plot_pca(stats: ClusterStats, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, pts in stats.pca_coords.items():
        ax.scatter(pts[:, 0], pts[:, 1], s=3, alpha=0.5, label=name)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(markerscale=4)
    ax.set_title(f"shared cos {stats.mean_shared_similarity:.3f} / "
                 f"cross cos {stats.mean_cross_similarity:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def error_map(ref: SpectralImage, est: SpectralImage, band: int, path=None):
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    if not 0 <= band < ref.bands:
        raise ValueError(f"band {band} outside [0, {ref.bands})")
    err = np.abs(ref.data[:, :, band].astype(np.float64) - est.data[:, :, band])
    stats = {"band": band, "min": float(err.min()), "max": float(err.max()),
             "mean": float(err.mean())}
    if path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(err, cmap="jet")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title(f"|error|, band {band}")
        ax.axis("off")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return err, stats


def kernel_ncc(a, b):
    """Normalized cross-correlation <a, b> / (|a| |b|); 1 iff positive multiples."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    return float((a * b).sum() / (np.linalg.norm(a) * np.linalg.norm(b)))


def kernel_zncc(a, b):
    """Zero-mean variant of :func:`kernel_ncc` (Pearson correlation of the cells)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return kernel_ncc(a - a.mean(), b - b.mean())


def compare_degradation(est, truth, path=None) -> dict:
    """``est`` and ``truth`` are ``(PSFParams or kernel, SRFMatrix or array)`` pairs."""
    def kern(p):
        return build_agk_kernel(p) if isinstance(p, PSFParams) else np.asarray(p, dtype=np.float64)

    def srf(r):
        return r.weights if isinstance(r, SRFMatrix) else np.asarray(r, dtype=np.float64)

    k_est, k_true = kern(est[0]), kern(truth[0])
    r_est, r_true = srf(est[1]), srf(truth[1])
    if k_est.shape != k_true.shape:
        raise ValueError(f"kernel sizes differ: {k_est.shape} vs {k_true.shape}")
    if r_est.shape != r_true.shape:
        raise ValueError(f"SRF shapes differ: {r_est.shape} vs {r_true.shape}")
    l1 = np.abs(r_est - r_true).sum(axis=0)
    report = {"kernel_ncc": kernel_ncc(k_est, k_true), "kernel_zncc": kernel_zncc(k_est, k_true),
              "srf_l1_per_band": l1.tolist(), "srf_l1_mean": float(l1.mean())}
    if path is not None:
        _plot_degradation(k_est, k_true, r_est, r_true, path)
    return report


def _plot_degradation(k_est, k_true, r_est, r_true, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    vmax = max(k_est.max(), k_true.max())
    axes[0].imshow(k_true, vmin=0, vmax=vmax)
    axes[0].set_title("true PSF")
    axes[1].imshow(k_est, vmin=0, vmax=vmax)
    axes[1].set_title("estimated PSF")
    for ax in axes[:2]:
        ax.axis("off")
    for j in range(r_true.shape[1]):
        line, = axes[2].plot(r_true[:, j], "-")
        axes[2].plot(r_est[:, j], "--", color=line.get_color())
    axes[2].set_title("SRF (solid: true, dashed: estimated)")
    axes[2].set_xlabel("HSI band")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_analysis(out_dir, stats: Optional[ClusterStats] = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if stats is not None:
        plot_pca(stats, out_dir / "pca_features.png")
        np.savez(out_dir / "pca_coords.npz", **stats.pca_coords)
