"""Quick invariant checks runnable without pytest (``mossfuse selftest``)."""
import io
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import torch

from . import degradation as deg
from . import losses as L
from .blocks import DilatedReparamConv
from .imagery import SpectralImage
from .metrics import ergas, psnr, sam, ssim
from .network import DecoupledFeatures, ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, build_model, cosine_lr


def random_psf(rng, scale=1):
    return deg.PSFParams(rng.uniform(0.3, 6.0), rng.uniform(0.3, 6.0), rng.uniform(0, np.pi),
                         int(rng.choice([5, 7, 9, 11, 13])), scale)


def random_srf(rng, bands, msi):
    return deg.project_srf(rng.random((bands, msi)) + 1e-3)


def check_kernels(rng, n=200):
    worst = 0.0
    for _ in range(n):
        k = deg.build_agk_kernel(random_psf(rng))
        worst = max(worst, abs(k.sum() - 1))
    swap = np.abs(deg.build_agk_kernel(deg.PSFParams(4, 1, np.pi / 2, 9))
                  - deg.build_agk_kernel(deg.PSFParams(1, 4, 0.0, 9))).max()
    return worst < 1e-9 and swap < 1e-10, f"max |sum-1| {worst:.1e}, axis swap {swap:.1e}"


def check_commutativity(rng, n=20):
    worst = 0.0
    for _ in range(n):
        s = int(rng.choice([2, 4]))
        X = SpectralImage(rng.random((8 * s, 8 * s, 6)))
        k = deg.build_agk_kernel(random_psf(rng, s))
        R = random_srf(rng, 6, 3)
        a = deg.spatial_degrade(deg.spectral_degrade(X, R), k, s).data
        b = deg.spectral_degrade(deg.spatial_degrade(X, k, s), R).data
        worst = max(worst, np.abs(a - b).max())
    return worst < 1e-5, f"max |C(XR) - (CX)R| {worst:.1e}"


def check_srf(rng):
    ok = True
    for _ in range(50):
        r = deg.project_srf(rng.normal(size=(10, 3)) + 0.5).weights
        ok &= bool(np.all(r >= 0) and np.allclose(r.sum(0), 1, atol=1e-6))
        ok &= bool(np.abs(deg.project_srf(r).weights - r).max() < 1e-7)
    try:
        deg.project_srf(np.array([[0.0], [0.0], [-3.0]]))
        ok = False
    except deg.DegenerateSRFError:
        pass
    return ok, "non-negative, unit columns, idempotent, degenerate rejected"


def check_reparam(rng):
    torch.manual_seed(int(rng.integers(1 << 31)))
    block = DilatedReparamConv(8)
    for bn in [block.lk_bn, *block.bns]:
        bn.running_mean.uniform_(-1, 1)
        bn.running_var.uniform_(0.5, 2)
        bn.weight.data.uniform_(0.5, 1.5)
        bn.bias.data.uniform_(-0.5, 0.5)
    block.eval()
    x = torch.randn(4, 8, 20, 20)
    with torch.no_grad():
        before = block(x)
        after = block.merge()(x)
    err = float((before - after).abs().max())
    return err < 1e-4, f"max |merged - multibranch| {err:.1e}"


def check_losses():
    a = torch.randn(1, 4, 5, 5)
    same = float(L.subspace_clustering_loss(DecoupledFeatures(a, a, a, a)))
    e1 = torch.zeros(1, 4, 1, 1)
    e2, e3, e4 = e1.clone(), e1.clone(), e1.clone()
    e1[0, 0], e2[0, 1], e3[0, 2], e4[0, 3] = 1, 1, 1, 1
    orth = float(L.subspace_clustering_loss(DecoupledFeatures(e1, e2, e1, e3)))
    rep = L.total_loss(1.0, 2.0, 3.0, 4.0, L.LossWeights(0.1, 1, 1)).total
    ok = (abs(same - math.log(4)) < 1e-6 and abs(orth - math.log(1 + 3 / math.e)) < 1e-6
          and rep == 8.2)
    return ok, f"L_SC identical {same:.6f}, orthogonal {orth:.6f}, weighted total {rep}"


def check_metrics(rng):
    ref = rng.random((24, 24, 4)) * 0.8 + 0.1
    ok = (math.isinf(psnr(ref, ref)) and abs(ssim(ref, ref) - 1) < 1e-12
          and sam(ref, ref) < 1e-6 and ergas(ref, ref, 4) == 0)
    ok &= abs(psnr(ref, ref + 0.1) - 20) < 1e-6
    return ok, "identity and uniform-error cases"


def check_schedule():
    cfg = TrainConfig(epochs=300)
    ok = cosine_lr(0, cfg) == 1e-3 and cosine_lr(299, cfg) == 1e-6
    return ok, "cosine schedule endpoints"


def check_checkpoint():
    model = build_model(ModelConfig(6, 3, 2, width=8, heads=2, base_blocks=1,
                                    decoder_blocks=1, fused_decoder_blocks=1), seed=0).eval()
    Y, x = torch.rand(1, 3, 16, 16), torch.rand(1, 6, 8, 8)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "ckpt.npz"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
    with torch.no_grad():
        same = torch.equal(model(Y, x).fused, loaded(Y, x).fused)
    return same, "bitwise forward after save/load"


def run(stream=None, seed=0) -> bool:
    rng = np.random.default_rng(seed)
    checks = [
        ("agk kernel", lambda: check_kernels(rng)),
        ("degradation commutativity", lambda: check_commutativity(rng)),
        ("srf projection", lambda: check_srf(rng)),
        ("reparam merge", lambda: check_reparam(rng)),
        ("loss oracles", check_losses),
        ("metric sanity", lambda: check_metrics(rng)),
        ("lr schedule", check_schedule),
        ("checkpoint round-trip", check_checkpoint),
    ]
    out = stream or io.StringIO()
    all_ok = True
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.2f}s)",
              file=out)
    return all_ok
