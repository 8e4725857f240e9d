"""Simulate an observation pair and check that the two degradations commute.

Builds a phantom cube, blurs/decimates it with an anisotropic Gaussian kernel
and projects it through an RGB-like spectral response. Writes a small figure of
the kernel and the three images to ``demo_out/degradation.png``.

    python3 demos/01_degradation_model.py
"""
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mossfuse import degradation as deg
from mossfuse.phantom import make_phantom

out = Path("demo_out")
out.mkdir(exist_ok=True)

truth = make_phantom(64, 64, 31, seed=0)
psf = deg.PSFParams(lambda1=6.0, lambda2=1.5, theta_k=0.7, kernel_size=13, scale=4)
srf = deg.rgb_like_srf(31)
kernel = deg.build_agk_kernel(psf)
scene = deg.synthesize_triplet(truth, psf, srf)
print("truth", truth.shape, "HR-MSI", scene.hrmsi.shape, "LR-HSI", scene.lrhsi.shape)

# spatial-then-spectral equals spectral-then-spatial
a = deg.spectral_degrade(deg.spatial_degrade(truth, kernel, 4), srf).data
b = deg.spatial_degrade(deg.spectral_degrade(truth, srf), kernel, 4).data
print("max |difference| between the two orders:", float(np.abs(a - b).max()))

fig, ax = plt.subplots(1, 4, figsize=(13, 3.4))
ax[0].imshow(kernel, cmap="magma")
ax[0].set_title("blur kernel")
ax[1].imshow(truth.data[..., 15], cmap="gray")
ax[1].set_title("truth, band 15")
ax[2].imshow(np.clip(scene.hrmsi.data[..., ::-1] / scene.hrmsi.data.max(), 0, 1))
ax[2].set_title("HR-MSI")
ax[3].imshow(scene.lrhsi.data[..., 15], cmap="gray")
ax[3].set_title("LR-HSI, band 15")
for a_ in ax:
    a_.axis("off")
fig.tight_layout()
fig.savefig(out / "degradation.png", dpi=100)
print("wrote", out / "degradation.png")
